#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rttdp {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One vertex of the reverse-mode tape. Leaves have an empty `op` and no
// parents; interior nodes carry a closure that pushes `grad` into parents.
struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
  }
};

}  // namespace detail

/// Handle to a dense row-major array of doubles that may participate in the
/// gradient tape. Copies of a handle alias the same storage; use clone() for
/// an independent leaf.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  // Mutable access is restricted to leaves; mutating an interior node would
  // silently invalidate the tape.
  std::span<double> values_mut();

  // Empty span when no gradient has been accumulated yet.
  std::span<const double> grad() const;
  std::vector<double> grad_or_zeros() const;
  void zero_grad();

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;
  const std::string& op() const;

  double item() const;
  double at(std::size_t flat) const { return values()[flat]; }

  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  // Builds an op result. Parents and the backward closure are kept only if
  // recording is enabled and some parent requires grad.
  static Tensor make_result(Shape shape, std::vector<double> values, std::string op,
                            std::vector<Tensor> parents,
                            std::function<void(detail::Node&)> backward_fn);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Recording mode of the thread-local tape.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Strict mode rejects non-finite op inputs with NumericsError.
bool strict_numerics();

class StrictNumericsGuard {
 public:
  explicit StrictNumericsGuard(bool on = true);
  ~StrictNumericsGuard();
  StrictNumericsGuard(const StrictNumericsGuard&) = delete;
  StrictNumericsGuard& operator=(const StrictNumericsGuard&) = delete;

 private:
  bool previous_;
};

/// Reverse sweep from a scalar root. Gradients accumulate into every
/// requires-grad leaf reachable from `root`.
void backward(const Tensor& root);

}  // namespace rttdp
