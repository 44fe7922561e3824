#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

const fs::path& work_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("mmfuse_test_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

class RemoveWorkDir : public ::testing::Environment {
 public:
  void TearDown() override { fs::remove_all(work_dir()); }
};
[[maybe_unused]] ::testing::Environment* const kCleanup = ::testing::AddGlobalTestEnvironment(new RemoveWorkDir);

std::string path_of(const std::string& name) { return (work_dir() / name).string(); }

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
}

struct Result {
  int code = -1;
  std::string out, err;
};

Result run(const std::string& args) {
  const std::string out = path_of("stdout.txt"), err = path_of("stderr.txt");
  const std::string cmd = std::string(MMFUSE_CLI_PATH) + " " + args + " > " + out + " 2> " + err;
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::string tiny_config() {
  const std::string path = path_of("tiny.cfg");
  spit(path,
       "# small task for quick runs\n"
       "experiment.label = tiny\n"
       "task.n = 4\ntask.T = 4\ntask.D = 6\n"
       "task.train_size = 24\ntask.val_size = 8\ntask.test_size = 8\n"
       "model.key_dim = 6\nmodel.gate_dim = 6\nmodel.coattn_k = 5\nmodel.coattn_hidden = 8\n"
       "model.mlp_hidden = 8\nmodel.fused_out = 8\nmodel.otk_iters = 20\n"
       "train.max_epochs = 3\ntrain.runs = 3\n");
  return path;
}

void put_u16(std::string& s, std::uint16_t v) {
  s += static_cast<char>(v & 0xFF);
  s += static_cast<char>(v >> 8);
}
void put_u32(std::string& s, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) s += static_cast<char>((v >> (8 * k)) & 0xFF);
}

// Stereo PCM16 WAV of a 440 Hz tone, written byte by byte.
void write_pcm16_stereo(const std::string& path, std::size_t frames, double rate) {
  std::string data;
  for (std::size_t i = 0; i < frames; ++i) {
    const double x = 0.5 * std::sin(2 * M_PI * 440.0 * static_cast<double>(i) / rate);
    put_u16(data, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(x * 32767))));
    put_u16(data, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(-x * 16000))));
  }
  std::string w = "RIFF";
  put_u32(w, static_cast<std::uint32_t>(36 + data.size()));
  w += "WAVEfmt ";
  put_u32(w, 16);
  put_u16(w, 1);
  put_u16(w, 2);
  put_u32(w, static_cast<std::uint32_t>(rate));
  put_u32(w, static_cast<std::uint32_t>(rate * 4));
  put_u16(w, 4);
  put_u16(w, 16);
  w += "data";
  put_u32(w, static_cast<std::uint32_t>(data.size()));
  spit(path, w + data);
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

// ---------------------------------------------------------------------------
// Usage and exit codes

TEST(CliUsage, MissingOrUnknownSubcommandExitsOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("train --no-such-flag").code, 1);
  EXPECT_EQ(run("ot --source a.csv").code, 1);
}

TEST(CliUsage, HelpExitsZeroAndListsSubcommands) {
  const Result r = run("--help");
  EXPECT_EQ(r.code, 0);
  for (const char* sub : {"train", "eval", "ablate", "gradcheck", "ot", "calib", "aso", "features", "report"})
    EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
}

TEST(CliExitCodes, ConfigProblems) {
  const std::string cfg = tiny_config();
  EXPECT_EQ(run("train -c " + path_of("absent.cfg")).code, 3);
  EXPECT_EQ(run("train -c " + cfg + " --set model.bogus=1").code, 1);
  EXPECT_EQ(run("train -c " + cfg + " --set train.lr=-1").code, 1);
  EXPECT_EQ(run("ablate -c " + cfg + " --axis sideways").code, 1);
  // no_ot needs T == n; caught before any training.
  EXPECT_EQ(run("ablate -c " + cfg + " --axis no_ot --set task.T=5").code, 1);
}

TEST(CliExitCodes, DivergenceExitsTwo) {
  const Result r = run("train -c " + tiny_config() + " --set train.lr=1e100 -o " + path_of("diverged.json"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("numerical"), std::string::npos);
}

// ---------------------------------------------------------------------------
// Experiments

TEST(CliTrain, RerunGivesByteIdenticalReport) {
  const std::string cfg = tiny_config();
  const std::string a = path_of("run_a.json"), b = path_of("run_b.json");
  ASSERT_EQ(run("train -c " + cfg + " -o " + a).code, 0);
  ASSERT_EQ(run("train -c " + cfg + " -o " + b).code, 0);
  const std::string ra = slurp(a);
  EXPECT_FALSE(ra.empty());
  EXPECT_EQ(ra, slurp(b));
  EXPECT_NE(ra.find("\"fingerprint\""), std::string::npos);
  // A different seed list changes the report.
  const std::string c = path_of("run_c.json");
  ASSERT_EQ(run("train -c " + cfg + " --set train.seed=50 -o " + c).code, 0);
  EXPECT_NE(slurp(c), ra);
}

TEST(CliAblate, RerunGivesByteIdenticalReports) {
  const std::string cfg = tiny_config();
  const std::string a = path_of("abl_a.json"), b = path_of("abl_b.json");
  ASSERT_EQ(run("ablate -c " + cfg + " --axis layers --set train.runs=1 --set train.max_epochs=1 -o " + a).code, 0);
  ASSERT_EQ(run("ablate -c " + cfg + " --axis layers --set train.runs=1 --set train.max_epochs=1 -o " + b).code, 0);
  EXPECT_EQ(slurp(a), slurp(b));
  const Result r = run("report " + a);
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(count_lines(r.out), 6u);  // header + five layer counts
}

TEST(CliReport, ColumnsFollowTheFixedOrder) {
  const std::string rep = path_of("for_report.json"), csv = path_of("table.csv");
  ASSERT_EQ(run("train -c " + tiny_config() + " -o " + rep).code, 0);
  ASSERT_EQ(run("report " + rep + " " + rep + " -o " + csv).code, 0);
  const std::string text = slurp(csv);
  EXPECT_EQ(text.substr(0, text.find('\n')), "config,Prec,Rec,F1,Acc,Spec,ECE,ACE");
  EXPECT_EQ(count_lines(text), 3u);
  EXPECT_EQ(run("report " + path_of("absent.json")).code, 3);
  spit(path_of("broken.json"), "[{\"label\": 1}]");
  EXPECT_EQ(run("report " + path_of("broken.json")).code, 3);
}

TEST(CliEval, SavedModelScoresAndFeedsCalib) {
  const std::string cfg = tiny_config(), model = path_of("model.json"), preds = path_of("preds.csv");
  ASSERT_EQ(run("train -c " + cfg + " -o " + path_of("r.json") + " --model " + model).code, 0);
  const Result ev = run("eval -m " + model + " --predictions " + preds);
  ASSERT_EQ(ev.code, 0);
  EXPECT_EQ(ev.out.substr(0, ev.out.find('\n')), "Prec,Rec,F1,Acc,Spec,ECE,ACE,loss");
  EXPECT_EQ(count_lines(slurp(preds)), 9u);  // header + eight test samples
  EXPECT_EQ(run("eval -m " + model + " --predictions " + path_of("preds2.csv")).code, 0);
  EXPECT_EQ(slurp(preds), slurp(path_of("preds2.csv")));

  // ECE from calib agrees with the ECE column of eval.
  const Result cal = run("calib -i " + preds + " --bins 10");
  ASSERT_EQ(cal.code, 0);
  std::istringstream lines(ev.out);
  std::string header, values;
  std::getline(lines, header);
  std::getline(lines, values);
  std::vector<std::string> fields;
  std::stringstream vs(values);
  for (std::string f; std::getline(vs, f, ',');) fields.push_back(f);
  ASSERT_EQ(fields.size(), 8u);
  EXPECT_EQ(cal.out.substr(0, cal.out.find('\n')), "ECE," + fields[5]);
}

TEST(CliGradcheck, SmallModelPasses) {
  const Result r = run("gradcheck -c " + tiny_config() + " --max-entries 4");
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
  EXPECT_GT(count_lines(r.out), 10u);
}

// ---------------------------------------------------------------------------
// Analysis tools

TEST(CliOt, ExactCostOfHandExampleAndErrors) {
  spit(path_of("src.csv"), "x,y\n0,0\n1,0\n0,1\n");
  spit(path_of("tgt.csv"), "0,0\n2,0\n");
  // b_1 takes 1/3 from (1,0) at cost 1 and 1/6 from (0,0) at cost 4;
  // b_0 takes the rest at cost 0 and 1: total 1/3 + 2/3 + 1/3.
  const Result r = run("ot --source " + path_of("src.csv") + " --target " + path_of("tgt.csv") + " --plan " +
                       path_of("plan.csv"));
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(r.out);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  const auto c1 = row.find(','), c2 = row.find(',', c1 + 1);
  EXPECT_NEAR(std::stod(row.substr(c1 + 1, c2 - c1 - 1)), 4.0 / 3.0, 1e-12);
  EXPECT_EQ(count_lines(slurp(path_of("plan.csv"))), 3u);

  spit(path_of("ragged.csv"), "0,0\n1\n");
  EXPECT_EQ(run("ot --source " + path_of("ragged.csv") + " --target " + path_of("tgt.csv")).code, 3);
  spit(path_of("wide.csv"), "0,0,0\n");
  EXPECT_EQ(run("ot --source " + path_of("wide.csv") + " --target " + path_of("tgt.csv")).code, 3);
  EXPECT_EQ(run("ot --source " + path_of("nothing.csv") + " --target " + path_of("tgt.csv")).code, 3);
  EXPECT_EQ(run("ot --source " + path_of("src.csv") + " --target " + path_of("tgt.csv") + " --method sinkhorn --eps 0")
                .code,
            1);
}

TEST(CliCalib, HandExampleAndJsonBins) {
  // Confidence 1 everywhere, half correct: ECE = 0.5.
  spit(path_of("half.csv"), "p0,p1,label\n1,0,0\n1,0,1\n0,1,1\n0,1,0\n");
  const Result r = run("calib -i " + path_of("half.csv") + " --format json -o " + path_of("bins.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.substr(0, r.out.find('\n')), "ECE,0.5");
  EXPECT_NE(slurp(path_of("bins.json")).find("\"ece_bins\""), std::string::npos);
  spit(path_of("bad.csv"), "0.7,0.7,1\n");
  EXPECT_EQ(run("calib -i " + path_of("bad.csv")).code, 3);
}

TEST(CliAso, ShiftedScoresAreDominantAndRerunsMatch) {
  spit(path_of("a.txt"), "10.1 10.3 10.2 10.5 10.4 10.0\n");
  spit(path_of("b.txt"), "0.1, 0.3, 0.2, 0.5, 0.4, 0.0\n");
  const std::string args = "aso -a " + path_of("a.txt") + " -b " + path_of("b.txt") + " --iters 300 --seed 4";
  const Result r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("verdict,stochastically dominant"), std::string::npos);
  EXPECT_EQ(run(args).out, r.out);
  spit(path_of("junk.txt"), "1 2 x\n");
  EXPECT_EQ(run("aso -a " + path_of("junk.txt") + " -b " + path_of("b.txt")).code, 3);
  EXPECT_EQ(run(args + " --confidence 1.5").code, 1);
}

TEST(CliFeatures, StereoPcm16ToTensorAndCsv) {
  const std::string wav = path_of("tone.wav");
  write_pcm16_stereo(wav, 16000, 16000);
  const std::string t1 = path_of("tone.mmft"), t2 = path_of("tone2.mmft");
  ASSERT_EQ(run("features -i " + wav + " -o " + t1).code, 0);
  ASSERT_EQ(run("features -i " + wav + " -o " + t2).code, 0);
  const std::string bytes = slurp(t1);
  EXPECT_EQ(bytes.size(), 24u + 3u * 224u * 224u * 4u);
  EXPECT_EQ(bytes.substr(0, 4), "MMFT");
  EXPECT_EQ(bytes, slurp(t2));

  ASSERT_EQ(run("features -i " + wav + " -o " + path_of("tone.csv") + " --format csv --image-size 32").code, 0);
  for (const char* ch : {"log_mel", "delta", "delta2"}) {
    const std::string text = slurp(path_of(std::string("tone_") + ch + ".csv"));
    EXPECT_EQ(count_lines(text), 32u) << ch;
    EXPECT_EQ(std::count(text.begin(), text.begin() + static_cast<long>(text.find('\n')), ','), 31) << ch;
  }

  spit(path_of("fake.wav"), "definitely not audio");
  EXPECT_EQ(run("features -i " + path_of("fake.wav") + " -o " + path_of("x.mmft")).code, 3);
  EXPECT_EQ(run("features -i " + path_of("missing.wav") + " -o " + path_of("x.mmft")).code, 3);
}
