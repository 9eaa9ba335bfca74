#include "histonet/tensor.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

#include "histonet/errors.hpp"

namespace histonet {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape_positive(const Shape& shape) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape_positive(shape);
  auto data = std::make_shared<TensorData>();
  data->values.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  data->shape = std::move(shape);
  data->requires_grad = requires_grad;
  return Tensor(std::move(data));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.data_->values) v = value;
  return t;
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape_positive(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  auto data = std::make_shared<TensorData>();
  data->shape = std::move(shape);
  data->values = std::move(values);
  data->requires_grad = requires_grad;
  return Tensor(std::move(data));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!data_) throw ContractError("shape() on undefined tensor");
  return data_->shape;
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

std::int64_t Tensor::dim(int axis) const {
  const Shape& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw ContractError("dim axis out of range");
  return s[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const {
  if (!data_) return 0;
  return static_cast<std::int64_t>(data_->values.size());
}

std::span<const double> Tensor::values() const {
  if (!data_) throw ContractError("values() on undefined tensor");
  return data_->values;
}

std::span<double> Tensor::values_mut() {
  if (!data_) throw ContractError("values_mut() on undefined tensor");
  return data_->values;
}

bool Tensor::requires_grad() const { return data_ && data_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!data_) throw ContractError("set_requires_grad() on undefined tensor");
  data_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return data_ && !data_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("grad() requested but no gradient present");
  return data_->grad;
}

std::span<double> Tensor::grad_mut() {
  if (!data_) throw ContractError("grad_mut() on undefined tensor");
  if (data_->grad.empty()) data_->grad.assign(data_->values.size(), 0.0);
  return data_->grad;
}

void Tensor::zero_grad() {
  if (data_) data_->grad.clear();
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
  return data_->values[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw ContractError("at() index rank mismatch");
  std::int64_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i < 0 || i >= s[axis]) throw ContractError("at() index out of range");
    flat = flat * s[axis] + i;
    ++axis;
  }
  return data_->values[static_cast<std::size_t>(flat)];
}

Tensor Tensor::clone() const {
  if (!data_) return Tensor();
  auto data = std::make_shared<TensorData>();
  data->shape = data_->shape;
  data->values = data_->values;
  data->requires_grad = data_->requires_grad;
  return Tensor(std::move(data));
}

bool Tensor::all_finite() const {
  if (!data_) return true;
  for (double v : data_->values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::to_json() const {
  nlohmann::json j;
  j["shape"] = shape();
  j["data"] = data_->values;
  return j.dump();
}

Tensor Tensor::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  Shape shape = j.at("shape").get<Shape>();
  std::vector<double> values = j.at("data").get<std::vector<double>>();
  return from_values(std::move(shape), std::move(values));
}

void Tape::record(std::vector<Tensor> parents, const Tensor& output,
                  std::function<void()> backward) {
  Node node;
  node.parents.reserve(parents.size());
  for (const Tensor& p : parents) node.parents.push_back(p.ptr());
  node.output = output.ptr();
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
}

bool Tape::contains(const Tensor& t) const {
  for (const Node& n : nodes_) {
    if (n.output.get() == t.node()) return true;
  }
  return false;
}

void Tape::backward(const Tensor& root) {
  if (consumed_) throw ContractError("tape backward() already replayed; rebuild the tape");
  if (!root.defined() || root.numel() != 1)
    throw ContractError("backward root must be a scalar tensor");
  if (!contains(root)) throw ContractError("backward root is not recorded on this tape");
  consumed_ = true;
  root.node()->grad.assign(1, 1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not an ancestor of the root
    if (it->backward) it->backward();
  }
}

void Tape::clear() {
  nodes_.clear();
  consumed_ = false;
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

}  // namespace histonet
