#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace qcnn::ad {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& s);

class Tape;

/// Handle into a Tape node. Cheap to copy; valid as long as the tape lives.
class Var {
 public:
  Var() = default;
  bool defined() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape& tape() const { return *tape_; }
  const Shape& shape() const;
  std::int64_t size() const;
  std::span<const double> value() const;
  /// Gradient from the last backward() pass; empty if this node did not
  /// participate or does not require gradients.
  std::span<const double> grad() const;
  double scalar() const;

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Define-by-run reverse-mode tape over flat real arrays. Rebuilt every
/// forward pass; single-writer (all recording and backward for one tape
/// happen on one logical thread). Distinct tapes may run concurrently.
class Tape {
 public:
  /// Scatters the node's own gradient (grad_of(self)) into its inputs.
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Shape shape, std::span<const double> value, bool requires_grad = true);
  Var constant(Shape shape, std::span<const double> value) { return leaf(std::move(shape), value, false); }

  /// Append a primitive node: forward value already computed by the caller,
  /// `backward` scatters the node's gradient into its inputs' gradients.
  /// This is the single recording point; fused layer kernels plug in here.
  Var record(Shape shape, std::vector<double> value, std::vector<int> inputs, BackwardFn backward);

  /// Reverse accumulation from a scalar loss, in fixed reverse-topological
  /// (= reverse recording) order. Deterministic for identical tapes.
  void backward(const Var& loss);

  std::span<const double> value_of(int id) const;
  std::span<double> grad_of(int id);  // empty when not allocated
  const Shape& shape_of(int id) const;
  bool requires_grad(int id) const;
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<int> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// Elementwise primitives. Binary ops accept equal shapes or one scalar
// (numel == 1) operand, which broadcasts.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double k);   // k * a
Var offset(Var a, double k);  // a + k
Var neg(Var a);
Var square(Var a);
Var sqrt_elem(Var a);
Var relu(Var a);
Var sum(Var a);  // -> scalar

// Quaternion primitives over [..., 4] arrays (scalar-first layout).
Var hamilton(Var p, Var q);
Var qinverse(Var q);
Var magnitude(Var q);   // [...,4] -> [...]
Var real_part(Var q);   // [...,4] -> [...]

Var reshape(Var a, Shape s);
Var pick(Var a, std::int64_t index);  // one element -> scalar
Var matvec(Var w, Var x);             // [m,n] x [n] -> [m]
Var linear(Var x, Var w, Var bias);   // [B,n], [m,n], [m] -> [B,m]
Var log_softmax(Var x);               // [B,K] rows, log-sum-exp with max subtraction
Var nll_mean(Var log_probs, std::span<const int> labels);  // -> scalar

/// Compares the reverse-mode gradient of f at `point` against central
/// differences with step h; returns the max relative error with denominator
/// max(|analytic|, |numeric|, 1e-8).
double gradient_check(const std::function<Var(Tape&, Var)>& f, Shape shape,
                      std::span<const double> point, double h);

}  // namespace qcnn::ad
