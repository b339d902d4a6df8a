#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dwdn/model.hpp"

namespace dwdn {

/// Non-finite loss during training; carries the step and sampled subnetwork.
class TrainingError : public Error {
 public:
  using Error::Error;
};

struct TrainConfig {
  double lr = 1e-3;
  double lr_decay = 0.98;
  std::size_t decay_every = 2;  // epochs
  double grad_clip = 5.0;
  std::size_t patience = 10;
  std::size_t max_epochs = 100;
  std::size_t batch_size = 4;
  std::size_t steps_per_epoch = 50;
  std::size_t val_batches = 2;
  std::uint64_t seed = 0;
  /// false trains the configured network alone (single objective term).
  bool sample_subnets = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

/// Learning rate in effect during `epoch` (0-based).
double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch);

struct SampledConfig {
  std::size_t w = 1;
  std::size_t d = 1;
};

/// Uniform, independent width and depth draws from a seeded generator.
class SubnetSampler {
 public:
  SubnetSampler(std::size_t max_width, std::size_t max_depth, std::uint64_t seed);
  SampledConfig sample();

 private:
  std::size_t max_width_;
  std::size_t max_depth_;
  Rng rng_;
};

/// Joint objective: L1 on real parts + L1 on imaginary parts + L1 between the
/// inverse STFTs, each a mean over elements.
Tensor loss_obj(const SpectrogramTensor& estimate, const SpectrogramTensor& target, const StftConfig& stft,
                std::size_t out_len);

/// One training example batch. Channels of each waveform are independent items.
struct Batch {
  Waveform mixture;
  Waveform target;
};

/// Subnetwork term plus full-network term.
Tensor loss_total(const Spectrogram& mixture, const SpectrogramTensor& target, const FullModelParams& params,
                  SampledConfig sampled, std::size_t out_len);

struct SynthSpec {
  double seconds = 2.0;
  int sample_rate = 8000;
  std::size_t items = 1;
  double min_snr_db = -5.0;
  double max_snr_db = 5.0;
};

struct SynthPair {
  Waveform mixture;
  Waveform target;
  Waveform interferer;
};

/// Vocal-like harmonic target plus accompaniment-like interferer (coloured
/// noise and a low harmonic pad) mixed at a random SNR. Samples are quantized
/// to a 2^-24 grid so mixture - interferer reproduces the target exactly.
SynthPair synth_batch(Rng& rng, const SynthSpec& spec);

class DataSource {
 public:
  virtual ~DataSource() = default;
  virtual Batch next(Rng& rng, std::size_t items) = 0;
  virtual int sample_rate() const = 0;
};

class SynthSource : public DataSource {
 public:
  explicit SynthSource(SynthSpec spec) : spec_(spec) {}
  Batch next(Rng& rng, std::size_t items) override;
  int sample_rate() const override { return spec_.sample_rate; }

 private:
  SynthSpec spec_;
};

/// Random crops from <root>/<track>/mixture.wav and <root>/<track>/target.wav.
class WavFolderSource : public DataSource {
 public:
  WavFolderSource(const std::filesystem::path& root, double crop_seconds);
  Batch next(Rng& rng, std::size_t items) override;
  int sample_rate() const override { return sample_rate_; }

 private:
  std::vector<Batch> tracks_;
  std::size_t crop_len_ = 0;
  int sample_rate_ = 0;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, double beta1, double beta2, double eps);
  /// One update from the current gradients; parameters without a gradient are
  /// treated as having a zero gradient.
  void step(double lr);

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<const Tensor> params, double max_norm);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> sampled;  // (w, d) -> count
};

struct TrainResult {
  FullModelParams best;
  std::vector<EpochRecord> history;
  std::vector<double> step_losses;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
};

/// Validation hook: returns the loss for an epoch. The default evaluates the
/// full network on fixed held-out batches.
using Validator = std::function<double(const FullModelParams&, std::size_t epoch)>;

TrainResult train(FullModelParams params, DataSource& data, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch = {}, Validator validator = {});

/// Mean full-network objective over `batches`.
double evaluate_loss(const FullModelParams& params, std::span<const Batch> batches, std::size_t w, std::size_t d);

/// Mean SNR (dB) of subnetwork (w, d) over all items of `batches`.
double evaluate_snr(const FullModelParams& params, std::span<const Batch> batches, std::size_t w, std::size_t d);

/// Runs subnetwork (w, d) on a mixture and returns the separated waveform.
Waveform separate(const FullModelParams& params, const Waveform& mixture, std::size_t w, std::size_t d);

std::string histogram_str(const std::map<std::pair<std::size_t, std::size_t>, std::size_t>& hist);

}  // namespace dwdn
