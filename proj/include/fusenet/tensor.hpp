#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fusenet/errors.hpp"

namespace fusenet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node& self)>;

// One vertex of the computation tape. `seq` is a global creation counter, so
// descending seq is a valid reverse topological order of any graph.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  bool is_leaf() const { return !backward; }
  std::vector<double>& grad_buffer();
};

}  // namespace detail

// Dense row-major tensor of doubles with reverse-mode autodiff.
//
// A Tensor is a shared handle: copies alias the same storage. Results of ops
// are immutable; only leaves (parameters, inputs) may be written in place.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor scalar(double value);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Negative axes count from the back.
  std::size_t dim(std::ptrdiff_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const;
  // Accumulated gradient; all zeros when nothing flowed into this tensor.
  std::vector<double> grad() const;
  void zero_grad();

  // Reverse pass from a scalar. Consumes the tape: a second call without a
  // fresh forward throws TapeError.
  void backward() const;

  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Counts multiply-add FLOPs (2 per MAC) of conv2d and matmul on this thread.
class FlopCounter {
 public:
  FlopCounter();
  ~FlopCounter();
  FlopCounter(const FlopCounter&) = delete;
  FlopCounter& operator=(const FlopCounter&) = delete;

  std::uint64_t flops() const { return flops_; }
  void add(std::uint64_t flops) { flops_ += flops; }

 private:
  std::uint64_t flops_ = 0;
  FlopCounter* previous_;
};

// When enabled on a thread, every op rejects non-finite outputs with
// NumericalError.
class FiniteCheckGuard {
 public:
  explicit FiniteCheckGuard(bool enable = true);
  ~FiniteCheckGuard();
  FiniteCheckGuard(const FiniteCheckGuard&) = delete;
  FiniteCheckGuard& operator=(const FiniteCheckGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

void add_flops(std::uint64_t flops);

// Builds an op result and records it on the tape when any input requires
// grad and recording is enabled.
Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   std::vector<Tensor> inputs, BackwardFn backward);

// Test hook: scales the incoming gradient of every node produced by `op`
// before its backward rule runs. Empty string disables. Thread-local.
void set_backward_fault(std::string op);

}  // namespace detail

}  // namespace fusenet
