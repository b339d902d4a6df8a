#include "dwdn/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "dwdn/ops.hpp"

namespace dwdn {
namespace {

Tensor target_waveform(const SpectrogramTensor& target, const StftConfig& stft, std::size_t out_len) {
  return istft_tensor(target.re.detach(), target.im.detach(), target.items, stft, out_len);
}

Tensor objective(const SpectrogramTensor& estimate, const SpectrogramTensor& target, const Tensor& target_wave,
                 const StftConfig& stft, std::size_t out_len) {
  using namespace ops;
  const Tensor wave = istft_tensor(estimate.re, estimate.im, estimate.items, stft, out_len);
  return add(add(l1(estimate.re, target.re), l1(estimate.im, target.im)), l1(wave, target_wave));
}

void check_same(const SpectrogramTensor& a, const SpectrogramTensor& b) {
  if (a.items != b.items || a.frames != b.frames || a.bins != b.bins) {
    throw ShapeError("loss_obj: estimate " + shape_str(a.re.shape()) + " vs target " + shape_str(b.re.shape()));
  }
}

constexpr double kQuantum = 1.0 / 16777216.0;  // 2^-24

Scalar quantize(double v) { return static_cast<Scalar>(std::round(v / kQuantum) * kQuantum); }

double power(const std::vector<double>& x) {
  double p = 0.0;
  for (double v : x) p += v * v;
  return p / static_cast<double>(std::max<std::size_t>(x.size(), 1));
}

std::vector<double> synth_vocal(Rng& rng, std::size_t len, double rate) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> out(len, 0.0);
  std::size_t pos = static_cast<std::size_t>(u(rng) * 0.1 * rate);
  while (pos < len) {
    const std::size_t note = static_cast<std::size_t>((0.25 + 0.35 * u(rng)) * rate);
    const std::size_t gap = static_cast<std::size_t>(0.08 * u(rng) * rate);
    const double f0 = 150.0 + 250.0 * u(rng);
    const double vib_rate = 4.0 + 3.0 * u(rng);
    const double vib_depth = 0.005 + 0.015 * u(rng);
    const double vib_phase = 2.0 * std::numbers::pi * u(rng);
    const double amp = 0.5 + 0.5 * u(rng);
    const double tilt = 0.6 + 0.8 * u(rng);
    double phase = 2.0 * std::numbers::pi * u(rng);
    const std::size_t end = std::min(len, pos + note);
    for (std::size_t i = pos; i < end; ++i) {
      const double t = static_cast<double>(i - pos) / rate;
      const double f = f0 * (1.0 + vib_depth * std::sin(2.0 * std::numbers::pi * vib_rate * t + vib_phase));
      phase += 2.0 * std::numbers::pi * f / rate;
      const double x = static_cast<double>(i - pos) / static_cast<double>(note);
      const double env = amp * std::pow(std::sin(std::numbers::pi * x), 0.5);
      double s = 0.0;
      for (int k = 1; k * f < 0.45 * rate && k <= 12; ++k) s += std::sin(k * phase) / std::pow(k, tilt);
      out[i] = env * s;
    }
    pos = end + gap;
  }
  return out;
}

std::vector<double> synth_accompaniment(Rng& rng, std::size_t len, double rate) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> out(len, 0.0);
  // One-pole low-passed noise.
  const double a = 0.5 + 0.45 * u(rng);
  double state = 0.0;
  for (auto& v : out) {
    state = a * state + (1.0 - a) * n(rng);
    v = state;
  }
  const double noise_p = power(out);
  for (auto& v : out) v /= std::sqrt(noise_p + 1e-12);
  // Low harmonic pad.
  const double f0 = 55.0 + 55.0 * u(rng);
  const double pad_gain = 0.5 + u(rng);
  double phase = 2.0 * std::numbers::pi * u(rng);
  for (std::size_t i = 0; i < len; ++i) {
    phase += 2.0 * std::numbers::pi * f0 / rate;
    double s = 0.0;
    for (int k = 1; k <= 4; ++k) s += std::sin(k * phase) / k;
    const double swell = 0.75 + 0.25 * std::sin(2.0 * std::numbers::pi * 0.5 * static_cast<double>(i) / rate);
    out[i] += pad_gain * swell * s;
  }
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0) || !(lr_decay > 0) || decay_every == 0 || !(grad_clip > 0) || patience == 0 || max_epochs == 0 ||
      batch_size == 0 || steps_per_epoch == 0 || val_batches == 0) {
    throw Error("train config: all schedule values must be positive and patience >= 1");
  }
}

double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch) {
  return cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(epoch / cfg.decay_every));
}

SubnetSampler::SubnetSampler(std::size_t max_width, std::size_t max_depth, std::uint64_t seed)
    : max_width_(max_width), max_depth_(max_depth), rng_(seed) {
  if (max_width == 0 || max_depth == 0) throw Error("sampler: width and depth must be >= 1");
}

SampledConfig SubnetSampler::sample() {
  std::uniform_int_distribution<std::size_t> w(1, max_width_);
  std::uniform_int_distribution<std::size_t> d(1, max_depth_);
  const std::size_t sw = w(rng_);
  return {sw, d(rng_)};
}

Tensor loss_obj(const SpectrogramTensor& estimate, const SpectrogramTensor& target, const StftConfig& stft,
                std::size_t out_len) {
  check_same(estimate, target);
  return objective(estimate, target, target_waveform(target, stft, out_len), stft, out_len);
}

Tensor loss_total(const Spectrogram& mixture, const SpectrogramTensor& target, const FullModelParams& params,
                  SampledConfig sampled, std::size_t out_len) {
  const auto& cfg = params.config;
  check_subnet(cfg, sampled.w, sampled.d);
  const Tensor target_wave = target_waveform(target, cfg.stft, out_len);
  const auto full_est = model_forward(mixture, params, cfg.max_width, cfg.max_depth);
  check_same(full_est, target);
  const Tensor full = objective(full_est, target, target_wave, cfg.stft, out_len);
  if (sampled.w == cfg.max_width && sampled.d == cfg.max_depth) return ops::add(full, full);
  const auto sub_est = model_forward(mixture, params, sampled.w, sampled.d);
  return ops::add(objective(sub_est, target, target_wave, cfg.stft, out_len), full);
}

SynthPair synth_batch(Rng& rng, const SynthSpec& spec) {
  const auto len = static_cast<std::size_t>(std::llround(spec.seconds * spec.sample_rate));
  if (len == 0 || spec.items == 0) throw Error("synth: empty batch requested");
  const double rate = spec.sample_rate;
  std::uniform_real_distribution<double> snr_dist(spec.min_snr_db, spec.max_snr_db);
  SynthPair pair;
  for (Waveform* w : {&pair.mixture, &pair.target, &pair.interferer}) {
    w->sample_rate = spec.sample_rate;
    w->channels.assign(spec.items, std::vector<Scalar>(len));
  }
  for (std::size_t c = 0; c < spec.items; ++c) {
    auto vocal = synth_vocal(rng, len, rate);
    auto accomp = synth_accompaniment(rng, len, rate);
    const double snr = snr_dist(rng);
    const double gain = std::sqrt(power(vocal) / (power(accomp) * std::pow(10.0, snr / 10.0)));
    double peak = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      accomp[i] *= gain;
      peak = std::max(peak, std::abs(vocal[i] + accomp[i]));
    }
    const double norm = 0.9 / std::max(peak, 1e-9);
    for (std::size_t i = 0; i < len; ++i) {
      const Scalar t = quantize(vocal[i] * norm);
      const Scalar a = quantize(accomp[i] * norm);
      pair.target.channels[c][i] = t;
      pair.interferer.channels[c][i] = a;
      pair.mixture.channels[c][i] = t + a;
    }
  }
  return pair;
}

Batch SynthSource::next(Rng& rng, std::size_t items) {
  SynthSpec s = spec_;
  s.items = items;
  auto pair = synth_batch(rng, s);
  return {std::move(pair.mixture), std::move(pair.target)};
}

WavFolderSource::WavFolderSource(const std::filesystem::path& root, double crop_seconds) {
  std::vector<std::filesystem::path> dirs;
  for (const auto& entry : std::filesystem::directory_iterator(root)) {
    if (entry.is_directory()) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());  // directory order is filesystem-dependent
  for (const auto& dir : dirs) {
    const auto mix = dir / "mixture.wav";
    const auto tgt = dir / "target.wav";
    if (!std::filesystem::exists(mix) || !std::filesystem::exists(tgt)) continue;
    Batch b{read_wav(mix), read_wav(tgt)};
    if (b.mixture.sample_rate != b.target.sample_rate || b.mixture.num_channels() != b.target.num_channels() ||
        b.mixture.length() != b.target.length()) {
      throw Error("wav folder: mixture and target differ in " + dir.string());
    }
    if (sample_rate_ == 0) sample_rate_ = b.mixture.sample_rate;
    if (b.mixture.sample_rate != sample_rate_) throw Error("wav folder: tracks have different sample rates");
    tracks_.push_back(std::move(b));
  }
  if (tracks_.empty()) throw Error("wav folder: no <track>/mixture.wav + target.wav pairs under " + root.string());
  crop_len_ = static_cast<std::size_t>(std::llround(crop_seconds * sample_rate_));
  for (const auto& t : tracks_) {
    if (t.mixture.length() < crop_len_) throw Error("wav folder: a track is shorter than the crop length");
  }
}

Batch WavFolderSource::next(Rng& rng, std::size_t items) {
  Batch out;
  out.mixture.sample_rate = out.target.sample_rate = sample_rate_;
  std::uniform_int_distribution<std::size_t> pick(0, tracks_.size() - 1);
  for (std::size_t i = 0; i < items; ++i) {
    const auto& track = tracks_[pick(rng)];
    std::uniform_int_distribution<std::size_t> chan(0, track.mixture.num_channels() - 1);
    std::uniform_int_distribution<std::size_t> start(0, track.mixture.length() - crop_len_);
    const std::size_t c = chan(rng);
    const std::size_t s = start(rng);
    const auto& m = track.mixture.channels[c];
    const auto& t = track.target.channels[c];
    out.mixture.channels.emplace_back(m.begin() + s, m.begin() + s + crop_len_);
    out.target.channels.emplace_back(t.begin() + s, t.begin() + s + crop_len_);
  }
  return out;
}

Adam::Adam(std::vector<Tensor> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto data = params_[i].mutable_data();
    const auto grad = params_[i].grad();
    const bool has = params_[i].has_grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = has ? static_cast<double>(grad[j]) : 0.0;
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      const double update = lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      data[j] = static_cast<Scalar>(static_cast<double>(data[j]) - update);
    }
  }
}

double clip_grad_norm(std::span<const Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (auto g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.mutable_grad()) g = static_cast<Scalar>(static_cast<double>(g) * factor);
    }
  }
  return norm;
}

double evaluate_loss(const FullModelParams& params, std::span<const Batch> batches, std::size_t w, std::size_t d) {
  const auto& cfg = params.config;
  double total = 0.0;
  for (const auto& b : batches) {
    const auto mix = stft(b.mixture, cfg.stft);
    const auto target = SpectrogramTensor::from(stft(b.target, cfg.stft));
    const auto est = model_forward(mix, params, w, d);
    total += static_cast<double>(loss_obj(est, target, cfg.stft, b.mixture.length()).item());
  }
  return total / static_cast<double>(std::max<std::size_t>(batches.size(), 1));
}

Waveform separate(const FullModelParams& params, const Waveform& mixture, std::size_t w, std::size_t d) {
  const auto& cfg = params.config;
  const auto est = model_forward(stft(mixture, cfg.stft), params, w, d);
  return istft(est.to_spectrogram(), cfg.stft, mixture.length(), mixture.sample_rate);
}

double evaluate_snr(const FullModelParams& params, std::span<const Batch> batches, std::size_t w, std::size_t d) {
  double total = 0.0;
  std::size_t items = 0;
  for (const auto& b : batches) {
    const auto est = separate(params, b.mixture, w, d);
    total += snr_db(b.target, est) * static_cast<double>(b.target.num_channels());
    items += b.target.num_channels();
  }
  return total / static_cast<double>(std::max<std::size_t>(items, 1));
}

std::string histogram_str(const std::map<std::pair<std::size_t, std::size_t>, std::size_t>& hist) {
  std::ostringstream os;
  bool first = true;
  for (const auto& [k, v] : hist) {
    if (!first) os << ' ';
    first = false;
    os << k.first << 'x' << k.second << ':' << v;
  }
  return os.str();
}

TrainResult train(FullModelParams params, DataSource& data, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch, Validator validator) {
  cfg.validate();
  params.validate();
  const auto& mc = params.config;
  if (data.sample_rate() != mc.sample_rate) {
    throw Error("train: data sample rate " + std::to_string(data.sample_rate()) + " differs from model sample rate " +
                std::to_string(mc.sample_rate));
  }

  const auto param_list = params.parameters();
  Adam adam(param_list, cfg.beta1, cfg.beta2, cfg.adam_eps);
  Rng data_rng(cfg.seed);
  Rng val_rng(cfg.seed ^ 0x5bd1e995ULL);
  SubnetSampler sampler(mc.max_width, mc.max_depth, cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  std::vector<Batch> val;
  if (!validator) {
    for (std::size_t i = 0; i < cfg.val_batches; ++i) val.push_back(data.next(val_rng, cfg.batch_size));
    validator = [&val](const FullModelParams& p, std::size_t) {
      return evaluate_loss(p, val, p.config.max_width, p.config.max_depth);
    };
  }

  TrainResult result{params.clone(), {}, {}, 0, false};
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_at_epoch(cfg, epoch);
    double epoch_loss = 0.0;
    for (std::size_t step = 0; step < cfg.steps_per_epoch; ++step, ++global_step) {
      const Batch batch = data.next(data_rng, cfg.batch_size);
      const auto mix = stft(batch.mixture, mc.stft);
      const auto target = SpectrogramTensor::from(stft(batch.target, mc.stft));
      const std::size_t out_len = batch.mixture.length();
      SampledConfig s{mc.max_width, mc.max_depth};
      Tensor loss;
      if (cfg.sample_subnets) {
        s = sampler.sample();
        loss = loss_total(mix, target, params, s, out_len);
      } else {
        loss = loss_obj(model_forward(mix, params, s.w, s.d), target, mc.stft, out_len);
      }
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw TrainingError("train: non-finite loss at step " + std::to_string(global_step) +
                            " with sampled subnetwork (w=" + std::to_string(s.w) + ", d=" + std::to_string(s.d) + ")");
      }
      ++rec.sampled[{s.w, s.d}];
      for (auto p : param_list) p.zero_grad();
      loss.backward();
      clip_grad_norm(param_list, cfg.grad_clip);
      adam.step(rec.lr);
      epoch_loss += value;
      result.step_losses.push_back(value);
    }
    rec.train_loss = epoch_loss / static_cast<double>(cfg.steps_per_epoch);
    rec.val_loss = validator(params, epoch);
    if (rec.val_loss < best) {
      best = rec.val_loss;
      since_best = 0;
      result.best = params.clone();
      result.best_epoch = epoch;
    } else {
      ++since_best;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (since_best >= cfg.patience) {
      result.early_stopped = true;
      break;
    }
  }
  for (auto p : param_list) p.zero_grad();
  return result;
}

}  // namespace dwdn
