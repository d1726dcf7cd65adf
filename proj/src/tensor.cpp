#include "rttdp/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "rttdp/errors.hpp"

namespace rttdp {

namespace {

thread_local bool t_grad_enabled = true;
thread_local bool t_strict_numerics = false;

}  // namespace

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  node_->values.assign(numel_of(shape), fill);
  node_->shape = std::move(shape);
  set_requires_grad(requires_grad);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  if (values.size() != numel_of(shape)) {
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  set_requires_grad(requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{v}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("tensor: undefined handle");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t i) const {
  const auto& s = shape();
  if (i >= s.size()) {
    throw ShapeError("tensor: dim " + std::to_string(i) + " out of range for " + shape_str(s));
  }
  return s[i];
}

std::size_t Tensor::numel() const { return node_ ? node_->values.size() : 0; }

std::span<const double> Tensor::values() const {
  if (!node_) throw ContractError("tensor: undefined handle");
  return node_->values;
}

std::span<double> Tensor::values_mut() {
  if (!node_) throw ContractError("tensor: undefined handle");
  if (!node_->op.empty()) throw ContractError("tensor: values_mut on non-leaf '" + node_->op + "'");
  return node_->values;
}

std::span<const double> Tensor::grad() const {
  if (!node_) throw ContractError("tensor: undefined handle");
  return node_->grad;
}

std::vector<double> Tensor::grad_or_zeros() const {
  if (!node_) throw ContractError("tensor: undefined handle");
  if (node_->grad.empty()) return std::vector<double>(node_->values.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_) throw ContractError("tensor: undefined handle");
  if (!node_->op.empty()) throw ContractError("tensor: set_requires_grad on non-leaf");
  node_->requires_grad = on;
  if (on) {
    node_->ensure_grad();
  } else {
    node_->grad.clear();
  }
  return *this;
}

bool Tensor::is_leaf() const { return node_ && node_->op.empty(); }

const std::string& Tensor::op() const {
  if (!node_) throw ContractError("tensor: undefined handle");
  return node_->op;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("tensor: item() on shape " + shape_str(shape()));
  return node_->values[0];
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->values, false); }

Tensor Tensor::clone() const {
  Tensor t(shape(), node_->values, false);
  if (requires_grad()) t.set_requires_grad(true);
  return t;
}

Tensor Tensor::make_result(Shape shape, std::vector<double> values, std::string op,
                           std::vector<Tensor> parents,
                           std::function<void(detail::Node&)> backward_fn) {
  if (t_strict_numerics) {
    for (const auto& p : parents) {
      for (double v : p.values()) {
        if (!std::isfinite(v)) throw NumericsError("op '" + op + "': non-finite input");
      }
    }
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = std::move(op);
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool strict_numerics() { return t_strict_numerics; }

StrictNumericsGuard::StrictNumericsGuard(bool on) : previous_(t_strict_numerics) {
  t_strict_numerics = on;
}
StrictNumericsGuard::~StrictNumericsGuard() { t_strict_numerics = previous_; }

void backward(const Tensor& root) {
  if (!root.defined()) throw ContractError("backward: undefined root");
  if (root.numel() != 1) {
    throw ContractError("backward: root must be scalar, got shape " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order; each node is emitted once.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !seen.count(parent)) {
        seen.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) {
    if (!node->op.empty()) node->grad.assign(node->values.size(), 0.0);
  }
  root.node()->ensure_grad();
  root.node()->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->op.empty() || !node->backward_fn) continue;
    for (auto& p : node->parents) {
      if (p->requires_grad) p->ensure_grad();
    }
    node->backward_fn(*node);
  }
}

}  // namespace rttdp
