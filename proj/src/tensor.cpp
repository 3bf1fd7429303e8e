#include "fusenet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace fusenet {

namespace {

std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool t_grad_enabled = true;
thread_local bool t_check_finite = false;
thread_local FlopCounter* t_flop_counter = nullptr;
thread_local std::string t_backward_fault;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> data) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  return node;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::vector<double>& detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor::Tensor(Shape shape, double fill) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
  }
  const auto n = shape_numel(shape);
  node_ = new_node(std::move(shape), std::vector<double>(n, fill));
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_string(shape) + " needs " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  node_ = new_node(std::move(shape), std::move(values));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

const Shape& Tensor::shape() const {
  if (!node_) throw UsageError("undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::ptrdiff_t axis) const {
  const auto r = static_cast<std::ptrdiff_t>(rank());
  const auto a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape()));
  }
  return node_->shape[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  if (!node_) throw UsageError("undefined tensor");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw UsageError("undefined tensor");
  if (!node_->is_leaf()) throw UsageError("in-place writes are only allowed on leaf tensors");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_string(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!node_) throw UsageError("undefined tensor");
  if (!node_->is_leaf()) throw UsageError("requires_grad can only be set on leaf tensors");
  node_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  if (!node_) throw UsageError("undefined tensor");
  if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

void Tensor::backward() const {
  if (!node_) throw UsageError("backward() on undefined tensor");
  if (numel() != 1) {
    throw UsageError("backward() needs a scalar output, got shape " + shape_string(shape()));
  }
  if (node_->consumed) throw TapeError("backward() called twice on the same tape; run a new forward pass");
  if (!node_->requires_grad) return;

  // Owning handles: clearing a node's inputs below must not free nodes that
  // are still in the list.
  std::vector<std::shared_ptr<detail::Node>> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::shared_ptr<detail::Node>> stack{node_};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    if (n->consumed) throw TapeError(std::string("tape node '") + n->op + "' was already consumed by a backward pass");
    for (auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in);
    }
    order.push_back(std::move(n));
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->seq > b->seq; });

  node_->grad_buffer()[0] += 1.0;
  for (auto& n : order) {
    if (n->is_leaf() || n->grad.empty()) continue;
    if (!t_backward_fault.empty() && t_backward_fault == n->op) {
      for (auto& g : n->grad) g *= 1.5;
    }
    n->backward(*n);
  }
  for (auto& n : order) {
    if (n->is_leaf()) continue;
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->inputs.clear();
    n->backward = nullptr;
    n->consumed = true;
  }
}

Tensor Tensor::detach() const { return Tensor(new_node(shape(), node_->data)); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

FlopCounter::FlopCounter() : previous_(t_flop_counter) { t_flop_counter = this; }
FlopCounter::~FlopCounter() { t_flop_counter = previous_; }

FiniteCheckGuard::FiniteCheckGuard(bool enable) : previous_(t_check_finite) { t_check_finite = enable; }
FiniteCheckGuard::~FiniteCheckGuard() { t_check_finite = previous_; }

namespace detail {

void add_flops(std::uint64_t flops) {
  if (t_flop_counter) t_flop_counter->add(flops);
}

Tensor make_result(Shape shape, std::vector<double> data, const char* op, std::vector<Tensor> inputs,
                   BackwardFn backward) {
  if (t_check_finite) {
    for (double v : data) {
      if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value produced by op '") + op + "'");
    }
  }
  auto node = new_node(std::move(shape), std::move(data));
  node->op = op;
  if (t_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (auto& in : inputs) node->inputs.push_back(in.node());
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

void set_backward_fault(std::string op) { t_backward_fault = std::move(op); }

}  // namespace detail

}  // namespace fusenet
