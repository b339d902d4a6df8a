#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "dwdn/tensor.hpp"

namespace dwdn {

struct StftConfig {
  std::size_t window = 256;
  std::size_t hop = 64;

  std::size_t bins() const { return window / 2 + 1; }
  std::size_t pad() const { return window / 2; }
  /// Frames produced for `samples` input samples after reflect padding.
  std::size_t frames(std::size_t samples) const;
  void validate() const;
  bool operator==(const StftConfig&) const = default;
};

/// Periodic Hann window of length `n`.
std::vector<double> hann_window(std::size_t n);

struct Waveform {
  int sample_rate = 8000;
  std::vector<std::vector<Scalar>> channels;

  std::size_t num_channels() const { return channels.size(); }
  std::size_t length() const { return channels.empty() ? 0 : channels.front().size(); }
  void validate() const;
};

/// Complex spectrogram, real and imaginary parts stored [channel][bin][frame].
struct Spectrogram {
  std::size_t channels = 0;
  std::size_t bins = 0;
  std::size_t frames = 0;
  std::vector<Scalar> re;
  std::vector<Scalar> im;

  Spectrogram() = default;
  Spectrogram(std::size_t channels, std::size_t bins, std::size_t frames);

  std::size_t index(std::size_t c, std::size_t f, std::size_t t) const {
    return (c * bins + f) * frames + t;
  }
  bool same_shape(const Spectrogram& o) const {
    return channels == o.channels && bins == o.bins && frames == o.frames;
  }
};

/// Reflect-pads by window/2 on each side, then takes the DFT of each
/// Hann-windowed frame.
Spectrogram stft(const Waveform& x, const StftConfig& cfg);

/// Overlap-add inverse. Each sample is divided by the summed squared window at
/// that position (samples where the sum is below 1e-8 become 0), then the
/// padding is removed. Reconstructs `x` from stft(x) including the edges.
Waveform istft(const Spectrogram& s, const StftConfig& cfg, std::size_t out_len, int sample_rate = 8000);

/// Differentiable inverse STFT for the training objective. `re` and `im` are
/// [items * frames, bins] with row = item * frames + frame; the result is
/// [items, out_len].
Tensor istft_tensor(const Tensor& re, const Tensor& im, std::size_t items, const StftConfig& cfg,
                    std::size_t out_len);

/// Contiguous, disjoint, sorted bin ranges covering [0, bins).
class BandScheme {
 public:
  using Range = std::pair<std::size_t, std::size_t>;  // [begin, end)

  BandScheme(std::vector<Range> ranges, std::size_t bins);
  /// Equal-width bands, width = ceil(bins / count); the last band takes the
  /// remainder. This is a local default, not a tuned vocal band layout.
  static BandScheme equal(std::size_t bins, std::size_t count);

  const std::vector<Range>& ranges() const { return ranges_; }
  std::size_t size() const { return ranges_.size(); }
  std::size_t bins() const { return bins_; }
  std::size_t width(std::size_t band) const { return ranges_.at(band).second - ranges_.at(band).first; }

 private:
  std::vector<Range> ranges_;
  std::size_t bins_;
};

/// One band of a spectrogram, stored [channel][bin-in-band][frame].
struct BandSlice {
  std::size_t channels = 0;
  std::size_t width = 0;
  std::size_t frames = 0;
  std::vector<Scalar> re;
  std::vector<Scalar> im;
};

std::vector<BandSlice> band_split(const Spectrogram& s, const BandScheme& scheme);
Spectrogram band_merge(std::span<const BandSlice> bands, const BandScheme& scheme);

inline constexpr double kSnrCapDb = 100.0;

/// Per-channel 10·log10(Σy² / Σ(y-ŷ)²), averaged over channels. A channel
/// with zero error (or SNR above the cap) contributes kSnrCapDb.
double snr_db(const Waveform& reference, const Waveform& estimate);

enum class WavFormat { kPcm16, kFloat32 };

Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& w, WavFormat format = WavFormat::kFloat32);

}  // namespace dwdn
