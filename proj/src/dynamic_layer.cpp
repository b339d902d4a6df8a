#include "dwdn/dynamic_layer.hpp"

#include <Eigen/Core>
#include <cmath>
#include <memory>

#include "dwdn/ops.hpp"

namespace dwdn {
namespace {

Tensor uniform(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Scalar> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<Scalar>(dist(rng));
  return Tensor::from(std::move(shape), std::move(data), true);
}

Tensor clone_param(const Tensor& t) {
  return Tensor::from(t.shape(), {t.data().begin(), t.data().end()}, true);
}

void check_width(const DynamicLayerParams& params, std::size_t w) {
  if (w == 0 || w > params.max_width()) {
    throw Error("dynamic layer: width " + std::to_string(w) + " outside [1, " +
                std::to_string(params.max_width()) + "]");
  }
}

using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Matrix>;
using ConstMatMap = Eigen::Map<const Matrix>;

Scalar stable_sigmoid(Scalar v) {
  if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
  const Scalar e = std::exp(v);
  return e / (Scalar(1) + e);
}

// One GRU direction over the whole sequence batch as a single graph node;
// returns [rows, R]. Gate activations are kept for the backward sweep.
Tensor run_gru(const Tensor& x, SequenceLayout layout, const GruParams& p, bool reverse) {
  const std::size_t r = p.hidden(), r3 = 3 * r;
  const std::size_t s = layout.count, len = layout.length, rows = layout.rows(), in = x.dim(1);
  if (p.w_input.dim(0) != in) {
    throw ShapeError("gru: input " + shape_str(x.shape()) + " vs weight " + shape_str(p.w_input.shape()));
  }

  // Input projection for all steps at once.
  auto xw = std::make_shared<Matrix>(rows, r3);
  xw->noalias() = ConstMatMap(x.data().data(), rows, in) * ConstMatMap(p.w_input.data().data(), in, r3);
  xw->rowwise() += ConstMatMap(p.b_input.data().data(), 1, r3).row(0);

  // Saved per step: reset, update, candidate, and the hidden candidate term.
  auto gates = std::make_shared<Matrix>(rows, r3);
  auto hn = std::make_shared<Matrix>(rows, r);
  Buffer out(rows * r);
  MatMap hs(out.data(), rows, r);
  const ConstMatMap wh(p.w_hidden.data().data(), r, r3);
  const ConstMatMap bh(p.b_hidden.data().data(), 1, r3);
  Matrix h = Matrix::Zero(s, r);
  Matrix hw(s, r3);
  for (std::size_t step = 0; step < len; ++step) {
    const std::size_t t = reverse ? len - 1 - step : step;
    hw.noalias() = h.lazyProduct(wh);
    hw.rowwise() += bh.row(0);
    for (std::size_t j = 0; j < s; ++j) {
      const std::size_t row = t * s + j;
      for (std::size_t k = 0; k < r; ++k) {
        const Scalar rg = stable_sigmoid((*xw)(row, k) + hw(j, k));
        const Scalar zg = stable_sigmoid((*xw)(row, r + k) + hw(j, r + k));
        const Scalar ng = std::tanh((*xw)(row, 2 * r + k) + rg * hw(j, 2 * r + k));
        (*gates)(row, k) = rg;
        (*gates)(row, r + k) = zg;
        (*gates)(row, 2 * r + k) = ng;
        (*hn)(row, k) = hw(j, 2 * r + k);
        h(j, k) = ng + zg * (h(j, k) - ng);
      }
    }
    hs.middleRows(t * s, s) = h;
  }

  return Tensor::make_result(
      {rows, r}, std::move(out), {x, p.w_input, p.b_input, p.w_hidden, p.b_hidden}, "gru",
      [=](detail::Node& self) {
        detail::Node& px = *self.parents[0];
        detail::Node& pwi = *self.parents[1];
        detail::Node& pbi = *self.parents[2];
        detail::Node& pwh = *self.parents[3];
        detail::Node& pbh = *self.parents[4];
        const ConstMatMap gout(self.grad.data(), rows, r);
        const ConstMatMap hsv(self.data.data(), rows, r);
        const ConstMatMap whv(pwh.data.data(), r, r3);
        Matrix dxw(rows, r3);
        Matrix dhw_all(rows, r3);
        Matrix dh = Matrix::Zero(s, r);
        for (std::size_t step = 0; step < len; ++step) {
          const std::size_t t = reverse ? step : len - 1 - step;
          const bool first = reverse ? t + 1 == len : t == 0;
          dh += gout.middleRows(t * s, s);
          for (std::size_t j = 0; j < s; ++j) {
            const std::size_t row = t * s + j;
            const std::size_t prev_row = reverse ? row + s : row - s;
            for (std::size_t k = 0; k < r; ++k) {
              const Scalar rg = (*gates)(row, k), zg = (*gates)(row, r + k), ng = (*gates)(row, 2 * r + k);
              const Scalar hprev = first ? Scalar(0) : hsv(prev_row, k);
              const Scalar g = dh(j, k);
              const Scalar dn = g * (Scalar(1) - zg) * (Scalar(1) - ng * ng);
              const Scalar dz = g * (hprev - ng) * zg * (Scalar(1) - zg);
              const Scalar dr = dn * (*hn)(row, k) * rg * (Scalar(1) - rg);
              dxw(row, k) = dr;
              dxw(row, r + k) = dz;
              dxw(row, 2 * r + k) = dn;
              dhw_all(row, k) = dr;
              dhw_all(row, r + k) = dz;
              dhw_all(row, 2 * r + k) = dn * rg;
              dh(j, k) = g * zg;
            }
          }
          if (!first) dh.noalias() += dhw_all.middleRows(t * s, s).lazyProduct(whv.transpose());
        }
        if (pbh.requires_grad) {
          pbh.ensure_grad();
          MatMap(pbh.grad.data(), 1, r3) += dhw_all.colwise().sum();
        }
        if (pwh.requires_grad) {
          // Hidden state entering each step; zero at the sequence start.
          Matrix hprev = Matrix::Zero(rows, r);
          if (len > 1) {
            if (reverse) hprev.topRows(rows - s) = hsv.bottomRows(rows - s);
            else hprev.bottomRows(rows - s) = hsv.topRows(rows - s);
          }
          pwh.ensure_grad();
          MatMap(pwh.grad.data(), r, r3).noalias() += hprev.transpose() * dhw_all;
        }
        if (pbi.requires_grad) {
          pbi.ensure_grad();
          MatMap(pbi.grad.data(), 1, r3) += dxw.colwise().sum();
        }
        if (pwi.requires_grad) {
          pwi.ensure_grad();
          MatMap(pwi.grad.data(), in, r3).noalias() += ConstMatMap(px.data.data(), rows, in).transpose() * dxw;
        }
        if (px.requires_grad) {
          px.ensure_grad();
          MatMap(px.grad.data(), rows, in).noalias() += dxw * ConstMatMap(pwi.data.data(), in, r3).transpose();
        }
      });
}

// x + Σ_i q[:, i]·heads[i], with q broadcast over each sequence's steps.
Tensor mix_experts(const Tensor& x, const std::vector<Tensor>& heads, const Tensor& q, SequenceLayout layout) {
  const std::size_t rows = layout.rows(), count = layout.count, c = x.dim(1), w = heads.size();
  Buffer out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < w; ++i) {
    const auto a = heads[i].data();
    const auto qv = q.data();
    for (std::size_t row = 0; row < rows; ++row) {
      const Scalar qi = qv[(row % count) * w + i];
      for (std::size_t k = 0; k < c; ++k) out[row * c + k] += qi * a[row * c + k];
    }
  }
  std::vector<Tensor> parents{x, q};
  parents.insert(parents.end(), heads.begin(), heads.end());
  return Tensor::make_result({rows, c}, std::move(out), std::move(parents), "mix_experts", [=](detail::Node& self) {
    const auto& g = self.grad;
    detail::Node& px = *self.parents[0];
    detail::Node& pq = *self.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (std::size_t j = 0; j < g.size(); ++j) px.grad[j] += g[j];
    }
    for (std::size_t i = 0; i < w; ++i) {
      detail::Node& pa = *self.parents[2 + i];
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (std::size_t row = 0; row < rows; ++row) {
          const Scalar qi = pq.data[(row % count) * w + i];
          for (std::size_t k = 0; k < c; ++k) pa.grad[row * c + k] += qi * g[row * c + k];
        }
      }
      if (pq.requires_grad) {
        pq.ensure_grad();
        for (std::size_t row = 0; row < rows; ++row) {
          Scalar acc = 0;
          for (std::size_t k = 0; k < c; ++k) acc += g[row * c + k] * pa.data[row * c + k];
          pq.grad[(row % count) * w + i] += acc;
        }
      }
    }
  });
}

// [rows, c] -> [count, c]: mean over the time steps of each sequence.
Tensor pool_over_time(const Tensor& g, SequenceLayout layout) {
  const std::size_t c = g.dim(1);
  const Tensor m = ops::mean(ops::reshape(g, {layout.length, layout.count * c}), 0);
  return ops::reshape(m, {layout.count, c});
}

}  // namespace

void LayerDims::validate() const {
  if (n == 0 || h == 0 || r == 0 || h_tac == 0 || max_width == 0) {
    throw Error("layer dims: n, h, r, h_tac and max width must all be >= 1");
  }
}

Linear Linear::init(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.weight = uniform({in, out}, bound, rng);
  l.bias = uniform({out}, bound, rng);
  return l;
}

Tensor Linear::operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }

void Linear::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

Linear Linear::clone() const { return {clone_param(weight), clone_param(bias)}; }

GruParams GruParams::init(std::size_t in, std::size_t hidden, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  GruParams p;
  p.w_input = uniform({in, 3 * hidden}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  p.b_input = uniform({3 * hidden}, bound, rng);
  p.w_hidden = uniform({hidden, 3 * hidden}, bound, rng);
  p.b_hidden = uniform({3 * hidden}, bound, rng);
  return p;
}

void GruParams::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + ".w_input", w_input});
  out.push_back({prefix + ".b_input", b_input});
  out.push_back({prefix + ".w_hidden", w_hidden});
  out.push_back({prefix + ".b_hidden", b_hidden});
}

GruParams GruParams::clone() const {
  return {clone_param(w_input), clone_param(b_input), clone_param(w_hidden), clone_param(b_hidden)};
}

TacParams TacParams::init(std::size_t h, std::size_t h_tac, Rng& rng) {
  TacParams t{Linear::init(h, h_tac, rng), Linear::init(h_tac, h_tac, rng), Linear::init(2 * h_tac, 1, rng)};
  // Zero logit bias: the initial reweighting starts close to uniform.
  for (auto& v : t.fc3.bias.mutable_data()) v = 0;
  return t;
}

void TacParams::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
  fc3.collect(prefix + ".fc3", out);
}

TacParams TacParams::clone() const { return {fc1.clone(), fc2.clone(), fc3.clone()}; }

DynamicLayerParams DynamicLayerParams::init(const LayerDims& dims, Rng& rng) {
  dims.validate();
  DynamicLayerParams p;
  p.dims = dims;
  for (std::size_t d = 0; d < dims.directions(); ++d) p.rnn.push_back(GruParams::init(dims.n, dims.r, rng));
  for (std::size_t i = 0; i < dims.max_width; ++i) {
    p.experts.push_back({Linear::init(dims.rnn_out(), dims.n, rng), Linear::init(dims.rnn_out(), dims.gate_dim(), rng)});
  }
  if (dims.gate == GateMode::kTac) p.tac.push_back(TacParams::init(dims.h, dims.h_tac, rng));
  return p;
}

void DynamicLayerParams::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  for (std::size_t d = 0; d < rnn.size(); ++d) rnn[d].collect(prefix + ".rnn" + std::to_string(d), out);
  for (std::size_t i = 0; i < experts.size(); ++i) {
    experts[i].a_head.collect(prefix + ".expert" + std::to_string(i) + ".a", out);
    experts[i].g_head.collect(prefix + ".expert" + std::to_string(i) + ".g", out);
  }
  for (const auto& t : tac) t.collect(prefix + ".tac", out);
}

std::vector<NamedTensor> DynamicLayerParams::parameters() const {
  std::vector<NamedTensor> out;
  collect("layer", out);
  return out;
}

DynamicLayerParams DynamicLayerParams::slice_width(std::size_t w) const {
  check_width(*this, w);
  DynamicLayerParams p;
  p.dims = dims;
  p.dims.max_width = w;
  for (const auto& g : rnn) p.rnn.push_back(g.clone());
  for (std::size_t i = 0; i < w; ++i) p.experts.push_back({experts[i].a_head.clone(), experts[i].g_head.clone()});
  for (const auto& t : tac) p.tac.push_back(t.clone());
  return p;
}

Tensor tac_reweight(std::span<const Tensor> pooled, const TacParams& tac) {
  using namespace ops;
  const std::size_t w = pooled.size();
  if (w == 0) throw Error("tac_reweight: width must be at least 1");
  const std::size_t s = pooled.front().dim(0);
  const std::size_t ht = tac.fc1.out();

  std::vector<Tensor> hidden;
  hidden.reserve(w);
  for (const auto& g : pooled) hidden.push_back(tanh(tac.fc1(g)));
  const Tensor stacked = reshape(concat(std::span<const Tensor>(hidden), 0), {w, s * ht});
  const Tensor avg = reshape(mean(stacked, 0), {s, ht});
  const Tensor shared = tanh(tac.fc2(avg));

  std::vector<Tensor> logits;
  logits.reserve(w);
  for (const auto& h : hidden) logits.push_back(tanh(tac.fc3(concat({h, shared}, 1))));
  return softmax(concat(std::span<const Tensor>(logits), 1), 1);
}

ReweightVector tac_reweight(const std::vector<std::vector<Scalar>>& g, const TacParams& tac) {
  std::vector<Tensor> pooled;
  for (const auto& v : g) pooled.push_back(Tensor::from({1, v.size()}, v));
  const Tensor q = tac_reweight(pooled, tac);
  return {std::vector<double>(q.data().begin(), q.data().end())};
}

Tensor dynamic_layer_forward(const Tensor& x, SequenceLayout layout, const DynamicLayerParams& params,
                             std::size_t w, LayerTrace* trace) {
  using namespace ops;
  check_width(params, w);
  const auto& dims = params.dims;
  if (x.ndim() != 2 || x.dim(0) != layout.rows() || x.dim(1) != dims.n) {
    throw ShapeError("dynamic layer: input " + shape_str(x.shape()) + " does not match layout [" +
                     std::to_string(layout.rows()) + ", " + std::to_string(dims.n) + "]");
  }

  Tensor hidden = run_gru(x, layout, params.rnn[0], false);
  if (params.rnn.size() == 2) hidden = concat({hidden, run_gru(x, layout, params.rnn[1], true)}, 1);

  std::vector<Tensor> heads;
  std::vector<Tensor> pooled;
  heads.reserve(w);
  pooled.reserve(w);
  for (std::size_t i = 0; i < w; ++i) {
    heads.push_back(params.experts[i].a_head(hidden));
    pooled.push_back(pool_over_time(params.experts[i].g_head(hidden), layout));
  }

  Tensor q = dims.gate == GateMode::kTac ? tac_reweight(pooled, params.tac.front())
                                         : sigmoid(concat(std::span<const Tensor>(pooled), 1));
  if (trace) trace->q = q;

  return mix_experts(x, heads, q, layout);
}

std::size_t layer_param_count(const LayerDims& dims, std::size_t w) {
  const std::size_t rnn = dims.directions() * (dims.n * 3 * dims.r + 3 * dims.r + dims.r * 3 * dims.r + 3 * dims.r);
  const std::size_t expert = dims.rnn_out() * dims.n + dims.n + dims.rnn_out() * dims.gate_dim() + dims.gate_dim();
  std::size_t tac = 0;
  if (dims.gate == GateMode::kTac) {
    tac = dims.h * dims.h_tac + dims.h_tac + dims.h_tac * dims.h_tac + dims.h_tac + 2 * dims.h_tac + 1;
  }
  return rnn + w * expert + tac;
}

std::size_t layer_macs(const LayerDims& dims, std::size_t w, std::size_t frames) {
  const std::size_t rnn_step = dims.directions() * (dims.n * 3 * dims.r + dims.r * 3 * dims.r);
  const std::size_t expert_step = w * dims.rnn_out() * (dims.n + dims.gate_dim());
  std::size_t tac = 0;
  if (dims.gate == GateMode::kTac) {
    // Once per sequence on the pooled features: fc1 per expert, fc2 once, fc3 per expert.
    tac = w * dims.h * dims.h_tac + dims.h_tac * dims.h_tac + w * 2 * dims.h_tac;
  }
  return frames * (rnn_step + expert_step) + tac;
}

}  // namespace dwdn
