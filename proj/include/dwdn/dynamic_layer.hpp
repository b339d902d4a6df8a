#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dwdn/tensor.hpp"

namespace dwdn {

using Rng = std::mt19937_64;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Fully connected map, weight [in, out], bias [out].
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear init(std::size_t in, std::size_t out, Rng& rng);
  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
  Linear clone() const;
};

/// Gated recurrent cell. Gate blocks are laid out [reset | update | candidate]
/// along the 3R axis of both weight matrices.
struct GruParams {
  Tensor w_input;   // [in, 3R]
  Tensor b_input;   // [3R]
  Tensor w_hidden;  // [R, 3R]
  Tensor b_hidden;  // [3R]

  static GruParams init(std::size_t in, std::size_t hidden, Rng& rng);
  std::size_t hidden() const { return w_hidden.dim(0); }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
  GruParams clone() const;
};

/// How the per-expert reweighting scalars are produced.
enum class GateMode {
  kTac,          // shared transform / mean over active experts / concat, then softmax
  kIndependent,  // each expert emits its own sigmoid gate, unchanged by w; ablation without TAC
};

struct LayerDims {
  std::size_t n = 16;      // input/output feature dim (residual path)
  std::size_t h = 8;       // reweighting feature dim of each G head
  std::size_t r = 16;      // RNN hidden dim per direction
  std::size_t h_tac = 16;  // TAC hidden dim
  std::size_t max_width = 4;
  bool bidirectional = false;
  GateMode gate = GateMode::kTac;

  std::size_t directions() const { return bidirectional ? 2 : 1; }
  std::size_t rnn_out() const { return directions() * r; }
  /// Width of each expert's G head: h for TAC, a single logit otherwise.
  std::size_t gate_dim() const { return gate == GateMode::kTac ? h : 1; }
  void validate() const;
};

struct ExpertParams {
  Linear a_head;  // rnn_out -> n
  Linear g_head;  // rnn_out -> gate_dim
};

struct TacParams {
  Linear fc1;  // h -> h_tac, shared by all experts
  Linear fc2;  // h_tac -> h_tac, applied to the mean over experts
  Linear fc3;  // 2·h_tac -> 1, applied to [per-expert, mean], tanh before the softmax

  static TacParams init(std::size_t h, std::size_t h_tac, Rng& rng);
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
  TacParams clone() const;
};

struct DynamicLayerParams {
  LayerDims dims;
  std::vector<GruParams> rnn;  // one per direction
  std::vector<ExpertParams> experts;
  std::vector<TacParams> tac;  // empty unless dims.gate == kTac

  static DynamicLayerParams init(const LayerDims& dims, Rng& rng);

  std::size_t max_width() const { return experts.size(); }
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
  std::vector<NamedTensor> parameters() const;
  /// Deep copy keeping only the first `w` experts.
  DynamicLayerParams slice_width(std::size_t w) const;
};

/// Rows of a sequence batch are time-major: row = step * count + sequence.
struct SequenceLayout {
  std::size_t length = 0;
  std::size_t count = 0;
  std::size_t rows() const { return length * count; }
};

struct ReweightVector {
  std::vector<double> q;
};

/// TAC reweighting. `pooled[i]` is expert i's time-pooled G feature, shape
/// [sequences, h]. Returns softmax-normalized scalars, shape [sequences, w].
Tensor tac_reweight(std::span<const Tensor> pooled, const TacParams& tac);
/// Single-sequence convenience form.
ReweightVector tac_reweight(const std::vector<std::vector<Scalar>>& g, const TacParams& tac);

struct LayerTrace {
  Tensor q;  // [sequences, w]
};

/// Dynamic-width residual RNN layer: x + Σ_{i<w} Q_i·A_i where A_i, G_i come
/// from expert i applied to the RNN output, and Q from the gate over the
/// time-pooled G_i. Only the first `w` experts are evaluated.
Tensor dynamic_layer_forward(const Tensor& x, SequenceLayout layout, const DynamicLayerParams& params,
                             std::size_t w, LayerTrace* trace = nullptr);

/// Analytic parameter count of a layer restricted to width `w`.
std::size_t layer_param_count(const LayerDims& dims, std::size_t w);
/// Multiply-accumulates for one forward over one sequence of `frames` steps.
std::size_t layer_macs(const LayerDims& dims, std::size_t w, std::size_t frames);

}  // namespace dwdn
