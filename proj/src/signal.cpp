#include "dwdn/signal.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>

namespace dwdn {
namespace {

// FFTW planning is not thread-safe; execution on distinct plans is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    real_ = static_cast<double*>(fftw_malloc(sizeof(double) * n));
    spec_ = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1)));
    std::lock_guard lock(planner_mutex());
    forward_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), real_, spec_, FFTW_ESTIMATE);
    inverse_ = fftw_plan_dft_c2r_1d(static_cast<int>(n), spec_, real_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(inverse_);
    fftw_free(real_);
    fftw_free(spec_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* real() { return real_; }
  fftw_complex* spec() { return spec_; }
  void forward() { fftw_execute(forward_); }
  // Unnormalized: the caller divides by n.
  void inverse() { fftw_execute(inverse_); }

 private:
  std::size_t n_;
  double* real_;
  fftw_complex* spec_;
  fftw_plan forward_;
  fftw_plan inverse_;
};

RealFft& fft_for(std::size_t n) {
  thread_local std::map<std::size_t, std::unique_ptr<RealFft>> cache;
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<RealFft>(n);
  return *slot;
}

std::size_t reflect(std::ptrdiff_t j, std::size_t len) {
  if (len == 1) return 0;
  const auto n = static_cast<std::ptrdiff_t>(len);
  while (j < 0 || j >= n) {
    if (j < 0) j = -j;
    if (j >= n) j = 2 * (n - 1) - j;
  }
  return static_cast<std::size_t>(j);
}

// Summed squared window at each padded sample position.
std::vector<double> window_norm(const std::vector<double>& win, std::size_t frames, std::size_t hop) {
  const std::size_t padded = (frames - 1) * hop + win.size();
  std::vector<double> norm(padded, 0.0);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t n = 0; n < win.size(); ++n) norm[t * hop + n] += win[n] * win[n];
  return norm;
}

constexpr double kNormFloor = 1e-8;

// Strided view of one item's complex frames: element (t, k) lives at
// base + t * frame_stride + k * bin_stride.
struct FrameLayout {
  std::size_t frame_stride;
  std::size_t bin_stride;
};

void overlap_add(const Scalar* re, const Scalar* im, FrameLayout layout, std::size_t frames,
                 const StftConfig& cfg, const std::vector<double>& win, const std::vector<double>& norm,
                 std::size_t out_len, Scalar* out) {
  const std::size_t n = cfg.window;
  const std::size_t bins = cfg.bins();
  RealFft& fft = fft_for(n);
  std::vector<double> acc(norm.size(), 0.0);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t k = 0; k < bins; ++k) {
      const std::size_t i = t * layout.frame_stride + k * layout.bin_stride;
      fft.spec()[k][0] = static_cast<double>(re[i]);
      fft.spec()[k][1] = static_cast<double>(im[i]);
    }
    fft.inverse();
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t m = 0; m < n; ++m) acc[t * cfg.hop + m] += fft.real()[m] * inv_n * win[m];
  }
  const std::size_t pad = cfg.pad();
  for (std::size_t s = 0; s < out_len; ++s) {
    const double d = norm[s + pad];
    out[s] = d < kNormFloor ? Scalar(0) : static_cast<Scalar>(acc[s + pad] / d);
  }
}

void check_istft_shape(const StftConfig& cfg, std::size_t frames, std::size_t bins, std::size_t out_len) {
  cfg.validate();
  if (bins != cfg.bins()) {
    throw ShapeError("istft: spectrogram has " + std::to_string(bins) + " bins, window " +
                     std::to_string(cfg.window) + " expects " + std::to_string(cfg.bins()));
  }
  if (out_len == 0 || cfg.frames(out_len) != frames) {
    throw ShapeError("istft: " + std::to_string(frames) + " frames inconsistent with out_len " +
                     std::to_string(out_len) + " (expected " +
                     std::to_string(out_len == 0 ? 0 : cfg.frames(out_len)) + ")");
  }
}

}  // namespace

std::size_t StftConfig::frames(std::size_t samples) const {
  return (samples + 2 * pad() - window) / hop + 1;
}

void StftConfig::validate() const {
  if (window == 0 || window % 2 != 0) throw Error("stft: window size must be even and positive, got " + std::to_string(window));
  if (hop == 0 || hop > window) throw Error("stft: hop must be in [1, window], got " + std::to_string(hop));
}

std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  return w;
}

void Waveform::validate() const {
  if (sample_rate <= 0) throw Error("waveform: sample rate must be positive");
  if (channels.empty()) throw Error("waveform: no channels");
  for (const auto& c : channels) {
    if (c.size() != channels.front().size()) throw Error("waveform: channels differ in length");
  }
}

Spectrogram::Spectrogram(std::size_t c, std::size_t f, std::size_t t)
    : channels(c), bins(f), frames(t), re(c * f * t, Scalar(0)), im(c * f * t, Scalar(0)) {}

Spectrogram stft(const Waveform& x, const StftConfig& cfg) {
  cfg.validate();
  x.validate();
  const std::size_t len = x.length();
  if (len == 0) throw Error("stft: empty signal");
  const std::size_t frames = cfg.frames(len);
  const auto win = hann_window(cfg.window);
  const auto pad = static_cast<std::ptrdiff_t>(cfg.pad());
  Spectrogram s(x.num_channels(), cfg.bins(), frames);
  RealFft& fft = fft_for(cfg.window);
  for (std::size_t c = 0; c < x.num_channels(); ++c) {
    const auto& samples = x.channels[c];
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t n = 0; n < cfg.window; ++n) {
        const auto p = static_cast<std::ptrdiff_t>(t * cfg.hop + n) - pad;
        fft.real()[n] = static_cast<double>(samples[reflect(p, len)]) * win[n];
      }
      fft.forward();
      for (std::size_t k = 0; k < s.bins; ++k) {
        s.re[s.index(c, k, t)] = static_cast<Scalar>(fft.spec()[k][0]);
        s.im[s.index(c, k, t)] = static_cast<Scalar>(fft.spec()[k][1]);
      }
    }
  }
  return s;
}

Waveform istft(const Spectrogram& s, const StftConfig& cfg, std::size_t out_len, int sample_rate) {
  check_istft_shape(cfg, s.frames, s.bins, out_len);
  if (s.re.size() != s.im.size()) throw ShapeError("istft: real and imaginary parts differ in size");
  const auto win = hann_window(cfg.window);
  const auto norm = window_norm(win, s.frames, cfg.hop);
  Waveform w;
  w.sample_rate = sample_rate;
  w.channels.assign(s.channels, std::vector<Scalar>(out_len));
  for (std::size_t c = 0; c < s.channels; ++c) {
    const std::size_t base = c * s.bins * s.frames;
    overlap_add(s.re.data() + base, s.im.data() + base, {1, s.frames}, s.frames, cfg, win, norm, out_len,
                w.channels[c].data());
  }
  return w;
}

Tensor istft_tensor(const Tensor& re, const Tensor& im, std::size_t items, const StftConfig& cfg,
                    std::size_t out_len) {
  if (re.shape() != im.shape() || re.ndim() != 2 || items == 0 || re.dim(0) % items != 0) {
    throw ShapeError("istft: real " + shape_str(re.shape()) + " and imaginary " + shape_str(im.shape()) +
                     " are not [items * frames, bins] for " + std::to_string(items) + " items");
  }
  const std::size_t frames = re.dim(0) / items;
  const std::size_t bins = re.dim(1);
  check_istft_shape(cfg, frames, bins, out_len);
  auto win = hann_window(cfg.window);
  auto norm = window_norm(win, frames, cfg.hop);
  Buffer out(items * out_len);
  for (std::size_t b = 0; b < items; ++b) {
    const std::size_t base = b * frames * bins;
    overlap_add(re.data().data() + base, im.data().data() + base, {bins, 1}, frames, cfg, win, norm, out_len,
                out.data() + b * out_len);
  }
  return Tensor::make_result(
      {items, out_len}, std::move(out), {re, im}, "istft",
      [items, frames, bins, out_len, cfg, win = std::move(win), norm = std::move(norm)](detail::Node& self) {
        detail::Node& pre = *self.parents[0];
        detail::Node& pim = *self.parents[1];
        if (pre.requires_grad) pre.ensure_grad();
        if (pim.requires_grad) pim.ensure_grad();
        const std::size_t n = cfg.window;
        const std::size_t pad = cfg.pad();
        RealFft& fft = fft_for(n);
        std::vector<double> gpad(norm.size());
        for (std::size_t b = 0; b < items; ++b) {
          std::fill(gpad.begin(), gpad.end(), 0.0);
          for (std::size_t s = 0; s < out_len; ++s) {
            const double d = norm[s + pad];
            if (d >= kNormFloor) gpad[s + pad] = static_cast<double>(self.grad[b * out_len + s]) / d;
          }
          for (std::size_t t = 0; t < frames; ++t) {
            for (std::size_t m = 0; m < n; ++m) fft.real()[m] = gpad[t * cfg.hop + m] * win[m];
            fft.forward();
            // Adjoint of the inverse real DFT: interior bins appear twice in
            // the Hermitian sum; the imaginary parts of DC and Nyquist are
            // discarded by the inverse.
            for (std::size_t k = 0; k < bins; ++k) {
              const bool edge = k == 0 || 2 * k == n;
              const double c = (edge ? 1.0 : 2.0) / static_cast<double>(n);
              const std::size_t i = (b * frames + t) * bins + k;
              if (pre.requires_grad) pre.grad[i] += static_cast<Scalar>(c * fft.spec()[k][0]);
              if (pim.requires_grad && !edge) pim.grad[i] += static_cast<Scalar>(c * fft.spec()[k][1]);
            }
          }
        }
      });
}

BandScheme::BandScheme(std::vector<Range> ranges, std::size_t bins) : ranges_(std::move(ranges)), bins_(bins) {
  if (ranges_.empty()) throw Error("band scheme: no bands");
  std::size_t expected = 0;
  for (const auto& [b, e] : ranges_) {
    if (b != expected) {
      throw Error("band scheme: " + std::string(b > expected ? "gap" : "overlap") + " at bin " +
                  std::to_string(std::min(b, expected)));
    }
    if (e <= b) throw Error("band scheme: empty band starting at bin " + std::to_string(b));
    expected = e;
  }
  if (expected != bins_) {
    throw Error("band scheme: covers " + std::to_string(expected) + " of " + std::to_string(bins_) + " bins");
  }
}

BandScheme BandScheme::equal(std::size_t bins, std::size_t count) {
  if (count == 0 || count > bins) {
    throw Error("band scheme: cannot split " + std::to_string(bins) + " bins into " + std::to_string(count) + " bands");
  }
  const std::size_t width = (bins + count - 1) / count;
  std::vector<Range> ranges;
  for (std::size_t b = 0; b < bins; b += width) ranges.emplace_back(b, std::min(b + width, bins));
  return BandScheme(std::move(ranges), bins);
}

std::vector<BandSlice> band_split(const Spectrogram& s, const BandScheme& scheme) {
  if (scheme.bins() != s.bins) {
    throw ShapeError("band_split: scheme covers " + std::to_string(scheme.bins()) + " bins, spectrogram has " +
                     std::to_string(s.bins));
  }
  std::vector<BandSlice> out;
  out.reserve(scheme.size());
  for (const auto& [begin, end] : scheme.ranges()) {
    BandSlice band{s.channels, end - begin, s.frames, {}, {}};
    band.re.reserve(s.channels * band.width * s.frames);
    band.im.reserve(band.re.capacity());
    for (std::size_t c = 0; c < s.channels; ++c) {
      const auto first = s.index(c, begin, 0);
      const auto last = s.index(c, end - 1, 0) + s.frames;
      band.re.insert(band.re.end(), s.re.begin() + first, s.re.begin() + last);
      band.im.insert(band.im.end(), s.im.begin() + first, s.im.begin() + last);
    }
    out.push_back(std::move(band));
  }
  return out;
}

Spectrogram band_merge(std::span<const BandSlice> bands, const BandScheme& scheme) {
  if (bands.size() != scheme.size()) throw ShapeError("band_merge: band count differs from scheme");
  const std::size_t channels = bands.front().channels;
  const std::size_t frames = bands.front().frames;
  Spectrogram s(channels, scheme.bins(), frames);
  for (std::size_t i = 0; i < bands.size(); ++i) {
    const auto& band = bands[i];
    const auto [begin, end] = scheme.ranges()[i];
    if (band.channels != channels || band.frames != frames || band.width != end - begin) {
      throw ShapeError("band_merge: band " + std::to_string(i) + " does not match the scheme");
    }
    const std::size_t block = band.width * frames;
    for (std::size_t c = 0; c < channels; ++c) {
      std::copy_n(band.re.begin() + c * block, block, s.re.begin() + s.index(c, begin, 0));
      std::copy_n(band.im.begin() + c * block, block, s.im.begin() + s.index(c, begin, 0));
    }
  }
  return s;
}

double snr_db(const Waveform& reference, const Waveform& estimate) {
  if (reference.num_channels() != estimate.num_channels() || reference.length() != estimate.length()) {
    throw ShapeError("snr_db: reference is " + std::to_string(reference.num_channels()) + "x" +
                     std::to_string(reference.length()) + ", estimate is " +
                     std::to_string(estimate.num_channels()) + "x" + std::to_string(estimate.length()));
  }
  if (reference.num_channels() == 0 || reference.length() == 0) throw Error("snr_db: empty reference");
  double total = 0.0;
  for (std::size_t c = 0; c < reference.num_channels(); ++c) {
    double signal = 0.0, error = 0.0;
    const auto& y = reference.channels[c];
    const auto& yh = estimate.channels[c];
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double r = static_cast<double>(y[i]);
      const double d = r - static_cast<double>(yh[i]);
      signal += r * r;
      error += d * d;
    }
    if (signal == 0.0) throw Error("snr_db: reference channel " + std::to_string(c) + " is all zero");
    const double ratio = error == 0.0 ? 0.0 : 10.0 * std::log10(signal / error);
    total += error == 0.0 ? kSnrCapDb : std::min(ratio, kSnrCapDb);
  }
  return total / static_cast<double>(reference.num_channels());
}

// ---------------------------------------------------------------------------
// WAV I/O (RIFF, little-endian PCM16 / IEEE float32)

namespace {

std::uint32_t read_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}
std::uint16_t read_u16(const unsigned char* p) { return std::uint16_t(p[0] | p[1] << 8); }

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

}  // namespace

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("wav: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw Error("wav: " + path.string() + " is not a RIFF/WAVE file");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t len = read_u32(chunk + 4);
    if (pos + 8 + len > bytes.size()) throw Error("wav: truncated chunk in " + path.string());
    if (std::memcmp(chunk, "fmt ", 4) == 0 && len >= 16) {
      format = read_u16(chunk + 8);
      channels = read_u16(chunk + 10);
      rate = read_u32(chunk + 12);
      bits = read_u16(chunk + 22);
      if (format == 0xFFFE && len >= 26) format = read_u16(chunk + 8 + 24);
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_len = len;
    }
    pos += 8 + len + (len & 1);
  }
  if (!data || channels == 0) throw Error("wav: missing fmt or data chunk in " + path.string());
  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  if (!pcm16 && !f32) throw Error("wav: only PCM 16-bit and float32 are supported");
  const std::size_t sample_bytes = bits / 8;
  const std::size_t frames = data_len / (sample_bytes * channels);
  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  w.channels.assign(channels, std::vector<Scalar>(frames));
  for (std::size_t i = 0; i < frames; ++i) {
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + (i * channels + c) * sample_bytes;
      if (pcm16) {
        w.channels[c][i] = static_cast<Scalar>(static_cast<std::int16_t>(read_u16(p)) / 32768.0);
      } else {
        const std::uint32_t u = read_u32(p);
        float f;
        std::memcpy(&f, &u, 4);
        w.channels[c][i] = static_cast<Scalar>(f);
      }
    }
  }
  return w;
}

void write_wav(const std::filesystem::path& path, const Waveform& w, WavFormat format) {
  w.validate();
  const std::uint16_t channels = static_cast<std::uint16_t>(w.num_channels());
  const std::uint16_t bits = format == WavFormat::kPcm16 ? 16 : 32;
  const std::uint32_t data_len = static_cast<std::uint32_t>(w.length() * channels * (bits / 8));
  std::string out;
  out.reserve(44 + data_len);
  out += "RIFF";
  put_u32(out, 36 + data_len);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, format == WavFormat::kPcm16 ? 1 : 3);
  put_u16(out, channels);
  put_u32(out, static_cast<std::uint32_t>(w.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(w.sample_rate) * channels * (bits / 8));
  put_u16(out, static_cast<std::uint16_t>(channels * (bits / 8)));
  put_u16(out, bits);
  out += "data";
  put_u32(out, data_len);
  for (std::size_t i = 0; i < w.length(); ++i) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double v = static_cast<double>(w.channels[c][i]);
      if (format == WavFormat::kPcm16) {
        const double clipped = std::clamp(v, -1.0, 32767.0 / 32768.0);
        put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(clipped * 32768.0))));
      } else {
        const float f = static_cast<float>(v);
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        put_u32(out, u);
      }
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("wav: cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

}  // namespace dwdn
