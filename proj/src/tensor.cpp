#include "dwdn/tensor.hpp"

#include <numeric>
#include <sstream>
#include <unordered_set>

namespace dwdn {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

Tensor::Tensor() : node_(std::make_shared<detail::Node>()) {
  node_->shape = {0};
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Scalar(0), requires_grad);
}

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
  auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<Scalar>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<Scalar> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " elements, got " +
                     std::to_string(data.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data.assign(data.begin(), data.end());
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(Scalar value) { return from({1}, {value}); }

Tensor Tensor::make_result(Shape shape, Buffer data,
                           std::vector<Tensor> parents, const char* op,
                           std::function<void(detail::Node&)> backward_fn) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError(std::string(op) + ": shape " + shape_str(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " elements, got " + std::to_string(data.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  Tensor out(std::move(node));
  out.node_->op = op;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any) {
    out.node_->requires_grad = true;
    out.node_->backward_fn = std::move(backward_fn);
    out.node_->parents.reserve(parents.size());
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
  }
  return out;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(node_->shape));
  }
  return node_->shape[axis];
}

std::span<Scalar> Tensor::mutable_data() {
  if (!is_leaf()) throw Error("mutable_data: tensor is an op result, not a leaf");
  return node_->data;
}

std::span<Scalar> Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

Scalar Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
  return node_->data[0];
}

Scalar Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != ndim()) throw ShapeError("at: index rank mismatch for " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= node_->shape[axis]) throw ShapeError("at: index out of range for " + shape_str(shape()));
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

void Tensor::backward() {
  if (numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(shape()));
  }
  if (node_->backward_done) throw Error("backward: already called on this loss");
  if (!node_->requires_grad) throw Error("backward: loss does not depend on any tensor requiring grad");

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (!n->parents.empty()) n->grad.assign(n->data.size(), Scalar(0));
  }
  node_->ensure_grad();
  node_->grad[0] += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
  node_->backward_done = true;
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = shape();
  node->data = node_->data;
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
  Tensor out = detach();
  out.node_->requires_grad = requires_grad() && is_leaf();
  return out;
}

}  // namespace dwdn
