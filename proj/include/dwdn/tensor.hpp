#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dwdn {

#ifdef DWDN_FLOAT32
using Scalar = float;
#else
using Scalar = double;
#endif

using Shape = std::vector<std::size_t>;

/// 64-byte aligned allocation. Eigen peels unaligned heads with scalar code, so
/// a fixed alignment keeps results independent of where the heap put a buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

/// Storage of tensor values and gradients.
using Buffer = std::vector<Scalar, AlignedAllocator<Scalar>>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when operand shapes do not conform; the message names the op and the shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  Buffer data;
  Buffer grad;
  bool requires_grad = false;
  bool backward_done = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into the parents' grad buffers.
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), Scalar(0));
  }
};

}  // namespace detail

/// Dense row-major n-d array. Copies share the underlying node; the graph is
/// the set of nodes reachable through `parents` from a result tensor.
class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Scalar> data, bool requires_grad = false);
  static Tensor scalar(Scalar value);

  /// Builds a graph node. Used by the op suite and by custom differentiable ops
  /// (e.g. the inverse STFT). The node is only attached to `parents` when one
  /// of them requires grad.
  static Tensor make_result(Shape shape, Buffer data,
                            std::vector<Tensor> parents, const char* op,
                            std::function<void(detail::Node&)> backward_fn);

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const;
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const Scalar> data() const { return node_->data; }
  /// Writable view. Only valid on leaves that are not part of a live graph
  /// (parameter updates happen between steps).
  std::span<Scalar> mutable_data();
  Scalar item() const;
  Scalar at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->parents.empty(); }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Scalar> grad() const { return node_->grad; }
  std::span<Scalar> mutable_grad();
  void zero_grad() { node_->grad.clear(); }

  /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate; running
  /// backward twice on the same loss is an error.
  void backward();

  /// Same shape and values, detached from any graph.
  Tensor detach() const;
  /// Deep copy with its own storage; keeps requires_grad.
  Tensor clone() const;

  const char* op_name() const { return node_->op; }
  detail::Node& node() const { return *node_; }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

}  // namespace dwdn
