#pragma once

#include <cstdint>
#include <vector>

#include "dwdn/dynamic_layer.hpp"
#include "dwdn/signal.hpp"

namespace dwdn {

/// Dimensions of the full separation network.
struct ModelConfig {
  std::size_t n = 16;          // band embedding dim
  std::size_t h = 8;           // reweighting feature dim
  std::size_t max_width = 4;   // W
  std::size_t max_depth = 4;   // D
  std::size_t r = 16;          // RNN hidden dim
  std::size_t h_tac = 16;
  std::size_t bands = 8;
  StftConfig stft{256, 64};
  int sample_rate = 8000;
  bool dual_path = false;
  bool bidirectional = false;
  GateMode gate = GateMode::kTac;

  static ModelConfig desk();
  /// N=64, H=32, D=12, W=16, TAC hidden 64, STFT 2048/512 at 44.1 kHz, dual path.
  static ModelConfig paper();

  void validate() const;
  BandScheme band_scheme() const { return BandScheme::equal(stft.bins(), bands); }
  LayerDims layer_dims() const;
  double frames_per_second() const { return static_cast<double>(sample_rate) / static_cast<double>(stft.hop); }
  bool operator==(const ModelConfig&) const = default;
};

struct SubnetConfig {
  std::size_t w = 1;
  std::size_t d = 1;
  bool operator==(const SubnetConfig&) const = default;
};

/// One unit of depth: a sequence-modeling layer (over frames, per band) and,
/// in dual-path mode, a band-modeling layer (over bands, per frame).
struct DepthUnit {
  DynamicLayerParams sequence;
  std::vector<DynamicLayerParams> band;  // empty or one
};

struct FullModelParams {
  ModelConfig config;
  std::vector<Linear> band_in;   // per band: 2·width -> n
  std::vector<DepthUnit> units;  // max_depth entries
  std::vector<Linear> mask_out;  // per band: n -> 2·width

  static FullModelParams init(const ModelConfig& config, std::uint64_t seed);

  /// Stable, ordered list of every parameter array.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  /// Deep copy with independent storage.
  FullModelParams clone() const;
  /// Checks that array shapes agree with `config`.
  void validate() const;
};

/// A batch of complex spectrograms as graph tensors, [items * frames, bins]
/// with row = item * frames + frame.
struct SpectrogramTensor {
  Tensor re;
  Tensor im;
  std::size_t items = 0;
  std::size_t frames = 0;
  std::size_t bins = 0;

  static SpectrogramTensor from(const Spectrogram& s);
  Spectrogram to_spectrogram() const;
};

/// Band-split embedding, the first `d` depth units at width `w`, then
/// per-band complex masks applied to the mixture. Spectrogram channels are
/// processed as independent items.
SpectrogramTensor model_forward(const Spectrogram& mixture, const FullModelParams& params, std::size_t w,
                                std::size_t d);

struct ModelCosts {
  std::size_t params = 0;
  double macs_per_second = 0.0;
};

/// Analytic size and complexity of subnetwork (w, d), evaluated over a
/// segment of `frames` frames and normalized to one second of audio.
ModelCosts model_costs(const ModelConfig& config, std::size_t w, std::size_t d, std::size_t frames);

void check_subnet(const ModelConfig& config, std::size_t w, std::size_t d);

}  // namespace dwdn
