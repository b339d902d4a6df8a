#include "dwdn/model.hpp"

#include <numeric>

#include "dwdn/ops.hpp"

namespace dwdn {

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.n = 64;
  c.h = 32;
  c.max_width = 16;
  c.max_depth = 12;
  c.r = 64;
  c.h_tac = 64;
  c.bands = 41;
  c.stft = {2048, 512};
  c.sample_rate = 44100;
  c.dual_path = true;
  return c;
}

void ModelConfig::validate() const {
  if (n == 0 || h == 0 || max_width == 0 || max_depth == 0 || r == 0 || h_tac == 0) {
    throw Error("model config: n, h, w, d, r and h_tac must all be >= 1");
  }
  if (sample_rate <= 0) throw Error("model config: sample rate must be positive");
  stft.validate();
  band_scheme();
}

LayerDims ModelConfig::layer_dims() const {
  LayerDims d;
  d.n = n;
  d.h = h;
  d.r = r;
  d.h_tac = h_tac;
  d.max_width = max_width;
  d.bidirectional = bidirectional;
  d.gate = gate;
  return d;
}

void check_subnet(const ModelConfig& config, std::size_t w, std::size_t d) {
  if (w < 1 || w > config.max_width || d < 1 || d > config.max_depth) {
    throw Error("subnetwork (w=" + std::to_string(w) + ", d=" + std::to_string(d) + ") outside valid range w in [1, " +
                std::to_string(config.max_width) + "], d in [1, " + std::to_string(config.max_depth) + "]");
  }
}

FullModelParams FullModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  FullModelParams p;
  p.config = config;
  const auto scheme = config.band_scheme();
  for (std::size_t k = 0; k < scheme.size(); ++k) p.band_in.push_back(Linear::init(2 * scheme.width(k), config.n, rng));
  const auto dims = config.layer_dims();
  for (std::size_t i = 0; i < config.max_depth; ++i) {
    DepthUnit unit{DynamicLayerParams::init(dims, rng), {}};
    if (config.dual_path) unit.band.push_back(DynamicLayerParams::init(dims, rng));
    p.units.push_back(std::move(unit));
  }
  for (std::size_t k = 0; k < scheme.size(); ++k) p.mask_out.push_back(Linear::init(config.n, 2 * scheme.width(k), rng));
  return p;
}

std::vector<NamedTensor> FullModelParams::named_parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t k = 0; k < band_in.size(); ++k) band_in[k].collect("band_in." + std::to_string(k), out);
  for (std::size_t i = 0; i < units.size(); ++i) {
    units[i].sequence.collect("unit" + std::to_string(i) + ".seq", out);
    for (const auto& b : units[i].band) b.collect("unit" + std::to_string(i) + ".band", out);
  }
  for (std::size_t k = 0; k < mask_out.size(); ++k) mask_out[k].collect("mask_out." + std::to_string(k), out);
  return out;
}

std::vector<Tensor> FullModelParams::parameters() const {
  std::vector<Tensor> out;
  for (auto& nt : named_parameters()) out.push_back(nt.tensor);
  return out;
}

std::size_t FullModelParams::parameter_count() const {
  std::size_t total = 0;
  for (const auto& nt : named_parameters()) total += nt.tensor.numel();
  return total;
}

FullModelParams FullModelParams::clone() const {
  FullModelParams p;
  p.config = config;
  for (const auto& l : band_in) p.band_in.push_back(l.clone());
  for (const auto& u : units) {
    DepthUnit c{u.sequence.slice_width(u.sequence.max_width()), {}};
    for (const auto& b : u.band) c.band.push_back(b.slice_width(b.max_width()));
    p.units.push_back(std::move(c));
  }
  for (const auto& l : mask_out) p.mask_out.push_back(l.clone());
  return p;
}

void FullModelParams::validate() const {
  config.validate();
  const auto scheme = config.band_scheme();
  if (band_in.size() != scheme.size() || mask_out.size() != scheme.size()) {
    throw ShapeError("model: band module count does not match the band scheme");
  }
  if (units.size() != config.max_depth) throw ShapeError("model: depth unit count does not match max depth");
  for (std::size_t k = 0; k < scheme.size(); ++k) {
    if (band_in[k].in() != 2 * scheme.width(k) || band_in[k].out() != config.n || mask_out[k].in() != config.n ||
        mask_out[k].out() != 2 * scheme.width(k)) {
      throw ShapeError("model: band module " + std::to_string(k) + " has wrong shape");
    }
  }
  for (const auto& u : units) {
    if (u.band.size() != (config.dual_path ? 1u : 0u)) throw ShapeError("model: dual-path layers inconsistent with config");
    if (u.sequence.max_width() != config.max_width) throw ShapeError("model: expert count does not match max width");
  }
}

SpectrogramTensor SpectrogramTensor::from(const Spectrogram& s) {
  std::vector<Scalar> re(s.re.size()), im(s.im.size());
  for (std::size_t c = 0; c < s.channels; ++c)
    for (std::size_t f = 0; f < s.bins; ++f)
      for (std::size_t t = 0; t < s.frames; ++t) {
        const std::size_t dst = (c * s.frames + t) * s.bins + f;
        re[dst] = s.re[s.index(c, f, t)];
        im[dst] = s.im[s.index(c, f, t)];
      }
  const Shape shape{s.channels * s.frames, s.bins};
  return {Tensor::from(shape, std::move(re)), Tensor::from(shape, std::move(im)), s.channels, s.frames, s.bins};
}

Spectrogram SpectrogramTensor::to_spectrogram() const {
  Spectrogram s(items, bins, frames);
  auto r = re.data();
  auto i = im.data();
  for (std::size_t c = 0; c < items; ++c)
    for (std::size_t f = 0; f < bins; ++f)
      for (std::size_t t = 0; t < frames; ++t) {
        const std::size_t src = (c * frames + t) * bins + f;
        s.re[s.index(c, f, t)] = r[src];
        s.im[s.index(c, f, t)] = i[src];
      }
  return s;
}

SpectrogramTensor model_forward(const Spectrogram& mixture, const FullModelParams& params, std::size_t w,
                                std::size_t d) {
  using namespace ops;
  const auto& cfg = params.config;
  check_subnet(cfg, w, d);
  if (mixture.bins != cfg.stft.bins()) {
    throw ShapeError("model_forward: spectrogram has " + std::to_string(mixture.bins) + " bins, config expects " +
                     std::to_string(cfg.stft.bins()));
  }
  if (mixture.channels == 0 || mixture.frames == 0) throw ShapeError("model_forward: empty spectrogram");

  const auto scheme = cfg.band_scheme();
  const std::size_t items = mixture.channels;
  const std::size_t frames = mixture.frames;
  const std::size_t bands = scheme.size();
  const std::size_t rows = items * frames;  // per band, row = item * frames + t

  // Per-band mixture slices [rows, width], and the embedding input [re | im].
  std::vector<Tensor> mix_re, mix_im, embedded;
  for (std::size_t k = 0; k < bands; ++k) {
    const auto [begin, end] = scheme.ranges()[k];
    const std::size_t width = end - begin;
    std::vector<Scalar> re(rows * width), im(rows * width), both(rows * 2 * width);
    for (std::size_t b = 0; b < items; ++b)
      for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t f = 0; f < width; ++f) {
          const std::size_t row = b * frames + t;
          const auto src = mixture.index(b, begin + f, t);
          re[row * width + f] = mixture.re[src];
          im[row * width + f] = mixture.im[src];
          both[row * 2 * width + f] = mixture.re[src];
          both[row * 2 * width + width + f] = mixture.im[src];
        }
    mix_re.push_back(Tensor::from({rows, width}, std::move(re)));
    mix_im.push_back(Tensor::from({rows, width}, std::move(im)));
    embedded.push_back(params.band_in[k](Tensor::from({rows, 2 * width}, std::move(both))));
  }

  // Band-major rows k * rows + (item * frames + t) double as the band-path
  // layout (steps = bands). The sequence path is time-major over
  // sequences s = item * bands + k.
  const std::size_t seqs = items * bands;
  std::vector<std::size_t> to_time(rows * bands), to_band(rows * bands);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t b = 0; b < items; ++b)
      for (std::size_t k = 0; k < bands; ++k) {
        const std::size_t time_row = t * seqs + b * bands + k;
        const std::size_t band_row = k * rows + b * frames + t;
        to_time[time_row] = band_row;
        to_band[band_row] = time_row;
      }

  Tensor z = permute_rows(concat(std::span<const Tensor>(embedded), 0), to_time);
  const SequenceLayout seq_layout{frames, seqs};
  const SequenceLayout band_layout{bands, rows};
  for (std::size_t i = 0; i < d; ++i) {
    const auto& unit = params.units[i];
    z = dynamic_layer_forward(z, seq_layout, unit.sequence, w);
    if (!unit.band.empty()) {
      z = permute_rows(dynamic_layer_forward(permute_rows(z, to_band), band_layout, unit.band.front(), w), to_time);
    }
  }
  z = permute_rows(z, to_band);

  std::vector<Tensor> out_re, out_im;
  for (std::size_t k = 0; k < bands; ++k) {
    const std::size_t width = scheme.width(k);
    const Tensor mask = params.mask_out[k](slice(z, 0, k * rows, (k + 1) * rows));
    const Tensor mr = slice(mask, 1, 0, width);
    const Tensor mi = slice(mask, 1, width, 2 * width);
    out_re.push_back(mr * mix_re[k] - mi * mix_im[k]);
    out_im.push_back(mr * mix_im[k] + mi * mix_re[k]);
  }
  return {concat(std::span<const Tensor>(out_re), 1), concat(std::span<const Tensor>(out_im), 1), items, frames,
          mixture.bins};
}

ModelCosts model_costs(const ModelConfig& config, std::size_t w, std::size_t d, std::size_t frames) {
  check_subnet(config, w, d);
  if (frames == 0) throw Error("model_costs: frames must be positive");
  const auto scheme = config.band_scheme();
  const auto dims = config.layer_dims();
  const std::size_t bands = scheme.size();
  const std::size_t units_per_depth = config.dual_path ? 2 : 1;

  std::size_t params = 0;
  std::size_t band_macs_per_frame = 0;
  for (std::size_t k = 0; k < bands; ++k) {
    const std::size_t width2 = 2 * scheme.width(k);
    params += width2 * config.n + config.n;  // band_in
    params += config.n * width2 + width2;    // mask_out
    band_macs_per_frame += 2 * width2 * config.n;
  }
  params += d * units_per_depth * layer_param_count(dims, w);

  std::size_t macs = frames * band_macs_per_frame;
  macs += d * bands * layer_macs(dims, w, frames);
  if (config.dual_path) macs += d * frames * layer_macs(dims, w, bands);

  const double seconds = static_cast<double>(frames) / config.frames_per_second();
  return {params, static_cast<double>(macs) / seconds};
}

}  // namespace dwdn
