#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace histonet {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorData {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until touched by backward; else values.size()

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

// Dense row-major double tensor. A Tensor is a cheap shared handle; values are
// treated as immutable once an op has produced them. The optimizer mutates
// parameter values through values_mut() between passes, never mid-graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const;
  int rank() const;
  std::int64_t dim(int axis) const;
  std::int64_t numel() const;

  std::span<const double> values() const;
  std::span<double> values_mut();

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const;
  std::span<const double> grad() const;  // ContractError when absent
  std::span<double> grad_mut();          // zero-initializes on first use
  void zero_grad();

  double item() const;  // scalar tensors only
  double at(std::initializer_list<std::int64_t> index) const;

  Tensor clone() const;  // deep copy, detached (no grad, requires_grad kept)
  bool all_finite() const;

  // Debug dump as JSON {"shape": [...], "data": [...]}.
  std::string to_json() const;
  static Tensor from_json(const std::string& text);

  TensorData* node() const { return data_.get(); }
  const std::shared_ptr<TensorData>& ptr() const { return data_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData> data) : data_(std::move(data)) {}
  std::shared_ptr<TensorData> data_;
};

// A FeatureMap is a rank-4 tensor laid out (batch, channels, height, width).
using FeatureMap = Tensor;

// Define-by-run recording of executed ops. Rebuilt per forward pass. A tape
// is confined to one execution context; independent tapes may run in
// parallel, a single tape must not be shared.
class Tape {
 public:
  struct Node {
    std::vector<std::shared_ptr<TensorData>> parents;
    std::shared_ptr<TensorData> output;
    std::function<void()> backward;
  };

  void record(std::vector<Tensor> parents, const Tensor& output,
              std::function<void()> backward);

  // Seeds d(root)/d(root)=1 and replays every recorded closure in reverse
  // order, accumulating into the grad of each requires_grad ancestor.
  // root must be a scalar recorded on this tape.
  void backward(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  bool contains(const Tensor& t) const;
  const std::vector<Node>& nodes() const { return nodes_; }
  void clear();

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Thread-local active tape; ops record onto it when set and an input requires
// grad. No active tape means pure value evaluation (eval mode).
Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

}  // namespace histonet
