#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <mutex>
#include <numbers>
#include <string>
#include <vector>

#include <fftw3.h>

#include "mmfuse/matrix.hpp"

namespace mmfuse::audio {

struct Waveform {
  std::vector<double> samples;
  double sample_rate = 16000;
};

struct FeatureParams {
  std::size_t n_fft = 2048;
  std::size_t hop = 1024;
  std::size_t n_mels = 224;
  double fmin = 0;
  double fmax = 0;  // 0 means sample_rate / 2
  double amin = 1e-10;
  double top_db = 80;
  std::size_t delta_width = 9;
  std::size_t image_size = 224;
};

/// Complex spectrum, bins x frames.
struct Spectrum {
  std::size_t bins = 0;
  std::size_t frames = 0;
  std::vector<std::complex<double>> data;  // bin-major

  std::complex<double>& at(std::size_t bin, std::size_t frame) { return data[bin * frames + frame]; }
  const std::complex<double>& at(std::size_t bin, std::size_t frame) const { return data[bin * frames + frame]; }

  Matrix power() const {
    Matrix m(bins, frames);
    for (std::size_t k = 0; k < data.size(); ++k) m[k] = static_cast<Real>(std::norm(data[k]));
    return m;
  }
  Matrix magnitude() const {
    Matrix m(bins, frames);
    for (std::size_t k = 0; k < data.size(); ++k) m[k] = static_cast<Real>(std::abs(data[k]));
    return m;
  }
};

// Periodic Hann window of length n.
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  return w;
}

// Mirror padding without repeating the edge sample.
inline std::vector<double> reflect_pad(const std::vector<double>& x, std::size_t pad) {
  if (pad >= x.size()) throw InputError("reflect_pad: signal too short for padding " + std::to_string(pad));
  std::vector<double> out(x.size() + 2 * pad);
  for (std::size_t i = 0; i < pad; ++i) out[i] = x[pad - i];
  std::copy(x.begin(), x.end(), out.begin() + static_cast<std::ptrdiff_t>(pad));
  for (std::size_t i = 0; i < pad; ++i) out[pad + x.size() + i] = x[x.size() - 2 - i];
  return out;
}

namespace detail {
// FFTW planning is not thread-safe; execution on distinct plans is.
inline std::mutex& fftw_plan_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

/// Centered short-time Fourier transform with a Hann window. The signal is
/// reflect-padded by n_fft / 2 on both sides, giving 1 + len / hop frames.
inline Spectrum stft(const Waveform& w, std::size_t n_fft = 2048, std::size_t hop = 1024) {
  if (n_fft < 256 || (n_fft & (n_fft - 1)) != 0) {
    throw ParameterError("stft: n_fft must be a power of two >= 256, got " + std::to_string(n_fft));
  }
  if (hop == 0) throw ParameterError("stft: hop must be >= 1");
  if (w.samples.size() < n_fft) {
    throw InputError("stft: signal of " + std::to_string(w.samples.size()) + " samples is shorter than n_fft " +
                     std::to_string(n_fft));
  }
  const std::vector<double> padded = reflect_pad(w.samples, n_fft / 2);
  const std::vector<double> window = hann_window(n_fft);
  Spectrum s;
  s.bins = n_fft / 2 + 1;
  s.frames = 1 + (padded.size() - n_fft) / hop;
  s.data.resize(s.bins * s.frames);

  std::vector<double> in(n_fft);
  std::vector<fftw_complex> out(s.bins);
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(n_fft), in.data(), out.data(), FFTW_ESTIMATE);
  }
  for (std::size_t f = 0; f < s.frames; ++f) {
    for (std::size_t i = 0; i < n_fft; ++i) in[i] = padded[f * hop + i] * window[i];
    fftw_execute(plan);
    for (std::size_t k = 0; k < s.bins; ++k) s.at(k, f) = {out[k][0], out[k][1]};
  }
  {
    std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
    fftw_destroy_plan(plan);
  }
  return s;
}

// Slaney mel scale: linear below 1 kHz, logarithmic above.
inline double hz_to_mel(double hz) {
  constexpr double f_sp = 200.0 / 3.0, min_log_hz = 1000.0, min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  return hz >= min_log_hz ? min_log_mel + std::log(hz / min_log_hz) / logstep : hz / f_sp;
}

inline double mel_to_hz(double mel) {
  constexpr double f_sp = 200.0 / 3.0, min_log_hz = 1000.0, min_log_mel = min_log_hz / f_sp;
  const double logstep = std::log(6.4) / 27.0;
  return mel >= min_log_mel ? min_log_hz * std::exp(logstep * (mel - min_log_mel)) : f_sp * mel;
}

/// n_mels + 2 band edges equally spaced on the mel scale, in Hz.
inline std::vector<double> mel_band_edges(std::size_t n_mels, double fmin, double fmax) {
  const double lo = hz_to_mel(fmin), hi = hz_to_mel(fmax);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  return edges;
}

/// Triangular filters (n_mels x (n_fft/2 + 1)) normalized to equal area.
inline Matrix mel_filterbank(std::size_t n_mels, double sample_rate, std::size_t n_fft, double fmin = 0,
                             double fmax = 0) {
  if (n_mels < 1) throw ParameterError("mel_filterbank: n_mels must be >= 1");
  if (!(sample_rate > 0)) throw ParameterError("mel_filterbank: sample rate must be positive");
  const std::size_t bins = n_fft / 2 + 1;
  if (n_mels > bins) {
    throw ParameterError("mel_filterbank: " + std::to_string(n_mels) + " mel bands exceed " + std::to_string(bins) +
                         " FFT bins");
  }
  if (fmax <= 0) fmax = sample_rate / 2;
  const std::vector<double> edges = mel_band_edges(n_mels, fmin, fmax);
  Matrix fb(n_mels, bins);
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    const double enorm = 2.0 / (right - left);
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = sample_rate * static_cast<double>(k) / static_cast<double>(n_fft);
      const double up = (f - left) / (center - left);
      const double down = (right - f) / (right - center);
      fb(m, k) = static_cast<Real>(std::max(0.0, std::min(up, down)) * enorm);
    }
  }
  return fb;
}

/// 10 log10(max(mel power, amin)), floored at top_db below the peak.
inline Matrix power_to_db(const Matrix& power, double amin = 1e-10, double top_db = 80) {
  Matrix db = kernel::map(power, [amin](Real v) { return static_cast<Real>(10.0 * std::log10(std::max<double>(v, amin))); });
  if (top_db > 0) {
    const Real peak = *std::max_element(db.data().begin(), db.data().end());
    for (auto& v : db.data()) v = std::max(v, static_cast<Real>(peak - top_db));
  }
  return db;
}

inline Matrix log_mel(const Waveform& w, const FeatureParams& p = {}) {
  if (!(w.sample_rate > 0)) throw InputError("log_mel: sample rate must be positive");
  const Spectrum s = stft(w, p.n_fft, p.hop);
  const Matrix fb = mel_filterbank(p.n_mels, w.sample_rate, p.n_fft, p.fmin, p.fmax);
  return power_to_db(kernel::matmul(fb, s.power()), p.amin, p.top_db);
}

/// Least-squares slope along each row over a centered window of `width`
/// frames, replicating edge frames:
///   d[t] = sum_{k=1..h} k (x[t+k] - x[t-k]) / (2 sum_{k=1..h} k^2).
inline Matrix delta(const Matrix& m, std::size_t width = 9) {
  if (width < 3 || width % 2 == 0) throw ParameterError("delta: width must be odd and >= 3, got " + std::to_string(width));
  const std::size_t h = width / 2;
  Real denom = 0;
  for (std::size_t k = 1; k <= h; ++k) denom += static_cast<Real>(k * k);
  denom *= 2;
  Matrix out(m.rows(), m.cols());
  const auto last = static_cast<std::ptrdiff_t>(m.cols()) - 1;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t t = 0; t < m.cols(); ++t) {
      Real acc = 0;
      for (std::size_t k = 1; k <= h; ++k) {
        const auto ti = static_cast<std::ptrdiff_t>(t);
        const auto kk = static_cast<std::ptrdiff_t>(k);
        const std::size_t fwd = static_cast<std::size_t>(std::min(ti + kk, last));
        const std::size_t bwd = static_cast<std::size_t>(std::max<std::ptrdiff_t>(ti - kk, 0));
        acc += static_cast<Real>(k) * (m(i, fwd) - m(i, bwd));
      }
      out(i, t) = acc / denom;
    }
  }
  return out;
}

/// Bilinear resampling with corner pixels aligned.
inline Matrix resize_bilinear(const Matrix& m, std::size_t rows, std::size_t cols) {
  if (m.empty() || rows == 0 || cols == 0) throw ParameterError("resize_bilinear: empty input or output");
  Matrix out(rows, cols);
  auto coord = [](std::size_t dst, std::size_t out_n, std::size_t in_n) {
    if (out_n == 1 || in_n == 1) return 0.0;
    return static_cast<double>(dst) * static_cast<double>(in_n - 1) / static_cast<double>(out_n - 1);
  };
  for (std::size_t r = 0; r < rows; ++r) {
    const double y = coord(r, rows, m.rows());
    const auto y0 = static_cast<std::size_t>(std::floor(y));
    const std::size_t y1 = std::min(y0 + 1, m.rows() - 1);
    const double fy = y - static_cast<double>(y0);
    for (std::size_t c = 0; c < cols; ++c) {
      const double x = coord(c, cols, m.cols());
      const auto x0 = static_cast<std::size_t>(std::floor(x));
      const std::size_t x1 = std::min(x0 + 1, m.cols() - 1);
      const double fx = x - static_cast<double>(x0);
      const double top = (1 - fx) * m(y0, x0) + fx * m(y0, x1);
      const double bot = (1 - fx) * m(y1, x0) + fx * m(y1, x1);
      out(r, c) = static_cast<Real>((1 - fy) * top + fy * bot);
    }
  }
  return out;
}

/// Log-mel, delta and delta-delta channels, each resized to image_size^2.
struct SpectrogramImage {
  std::array<Matrix, 3> channels;
};

inline SpectrogramImage to_image(const Waveform& w, const FeatureParams& p = {}) {
  const Matrix lm = log_mel(w, p);
  const Matrix d1 = delta(lm, p.delta_width);
  const Matrix d2 = delta(d1, p.delta_width);
  SpectrogramImage img;
  img.channels[0] = resize_bilinear(lm, p.image_size, p.image_size);
  img.channels[1] = resize_bilinear(d1, p.image_size, p.image_size);
  img.channels[2] = resize_bilinear(d2, p.image_size, p.image_size);
  return img;
}

// ---------------------------------------------------------------------------
// File formats.

namespace detail {
inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>(v >> 8));
}
}  // namespace detail

/// Reads a RIFF/WAVE file holding 16-bit PCM or 32-bit float samples.
/// Multi-channel audio is averaged down to mono.
inline Waveform read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_wav: cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0) {
    throw IoError("read_wav: " + path + " is not a RIFF/WAVE file");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const unsigned char* chunk = buf.data() + pos;
    const std::size_t len = detail::read_u32(chunk + 4);
    if (pos + 8 + len > buf.size()) throw IoError("read_wav: truncated chunk in " + path);
    if (std::memcmp(chunk, "fmt ", 4) == 0 && len >= 16) {
      format = detail::read_u16(chunk + 8);
      channels = detail::read_u16(chunk + 10);
      rate = detail::read_u32(chunk + 12);
      bits = detail::read_u16(chunk + 22);
      if (format == 0xFFFE && len >= 26) format = detail::read_u16(chunk + 32);  // extensible subformat
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_len = len;
    }
    pos += 8 + len + (len & 1);
  }
  if (!data || channels == 0 || rate == 0) throw IoError("read_wav: missing fmt or data chunk in " + path);
  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  if (!pcm16 && !f32) {
    throw IoError("read_wav: unsupported encoding (format " + std::to_string(format) + ", " + std::to_string(bits) +
                  " bits) in " + path);
  }
  const std::size_t width = bits / 8;
  const std::size_t frames = data_len / (width * channels);
  Waveform w;
  w.sample_rate = rate;
  w.samples.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0;
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + (i * channels + c) * width;
      if (pcm16) {
        acc += static_cast<double>(static_cast<std::int16_t>(detail::read_u16(p))) / 32768.0;
      } else {
        const std::uint32_t u = detail::read_u32(p);
        float v;
        std::memcpy(&v, &u, 4);
        acc += v;
      }
    }
    w.samples[i] = acc / channels;
  }
  return w;
}

enum class WavEncoding { Pcm16, Float32 };

inline void write_wav(const std::string& path, const std::vector<std::vector<double>>& channel_samples,
                      std::uint32_t sample_rate, WavEncoding enc = WavEncoding::Float32) {
  if (channel_samples.empty()) throw InputError("write_wav: no channels");
  const std::size_t frames = channel_samples.front().size();
  const auto channels = static_cast<std::uint16_t>(channel_samples.size());
  const std::uint16_t bits = enc == WavEncoding::Pcm16 ? 16 : 32;
  const std::uint32_t data_len = static_cast<std::uint32_t>(frames * channels * (bits / 8));
  std::string out = "RIFF";
  detail::put_u32(out, 36 + data_len);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, enc == WavEncoding::Pcm16 ? 1 : 3);
  detail::put_u16(out, channels);
  detail::put_u32(out, sample_rate);
  detail::put_u32(out, sample_rate * channels * (bits / 8));
  detail::put_u16(out, static_cast<std::uint16_t>(channels * (bits / 8)));
  detail::put_u16(out, bits);
  out += "data";
  detail::put_u32(out, data_len);
  for (std::size_t i = 0; i < frames; ++i) {
    for (const auto& ch : channel_samples) {
      if (enc == WavEncoding::Pcm16) {
        const double v = std::clamp(ch[i], -1.0, 32767.0 / 32768.0);
        detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(v * 32768.0))));
      } else {
        const float v = static_cast<float>(ch[i]);
        std::uint32_t u;
        std::memcpy(&u, &v, 4);
        detail::put_u32(out, u);
      }
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_wav: cannot open " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

// Tensor file: "MMFT", u32 version (1), u32 rank, u32 dims[rank], then
// little-endian float32 values in row-major order over the dims.
inline constexpr char kTensorMagic[4] = {'M', 'M', 'F', 'T'};

inline void write_tensor(const std::string& path, const SpectrogramImage& img) {
  std::string out(kTensorMagic, 4);
  detail::put_u32(out, 1);
  detail::put_u32(out, 3);
  detail::put_u32(out, 3);
  detail::put_u32(out, static_cast<std::uint32_t>(img.channels[0].rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(img.channels[0].cols()));
  for (const Matrix& ch : img.channels) {
    for (Real v : ch.data()) {
      const float fv = static_cast<float>(v);
      std::uint32_t u;
      std::memcpy(&u, &fv, 4);
      detail::put_u32(out, u);
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_tensor: cannot open " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

inline SpectrogramImage read_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_tensor: cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 24 || std::memcmp(buf.data(), kTensorMagic, 4) != 0) throw IoError("read_tensor: bad header in " + path);
  if (detail::read_u32(buf.data() + 4) != 1 || detail::read_u32(buf.data() + 8) != 3 ||
      detail::read_u32(buf.data() + 12) != 3) {
    throw IoError("read_tensor: unsupported version or rank in " + path);
  }
  const std::size_t rows = detail::read_u32(buf.data() + 16), cols = detail::read_u32(buf.data() + 20);
  if (buf.size() != 24 + 3 * rows * cols * 4) throw IoError("read_tensor: size mismatch in " + path);
  SpectrogramImage img;
  const unsigned char* p = buf.data() + 24;
  for (auto& ch : img.channels) {
    ch = Matrix(rows, cols);
    for (auto& v : ch.data()) {
      const std::uint32_t u = detail::read_u32(p);
      float fv;
      std::memcpy(&fv, &u, 4);
      v = fv;
      p += 4;
    }
  }
  return img;
}

}  // namespace mmfuse::audio
