#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sfm/array.hpp"

namespace sfm::ad {

// Thrown when a forward evaluation produces a NaN/Inf, naming the primitive.
struct NonFiniteError : std::runtime_error {
  std::string op_name;
  int node_id;
  NonFiniteError(std::string op, int id)
      : std::runtime_error("non-finite value produced by primitive '" + op +
                           "' (node " + std::to_string(id) + ")"),
        op_name(std::move(op)),
        node_id(id) {}
};

struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

enum class Op : uint8_t {
  kLeaf,
  kConst,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kAbs,
  kSqrt,
  kTanh,
  kSigmoid,
  kSoftplus,
  kMinConst,
  kMaxConst,
  kAcosClamped,
  kSum,
  kDiffX,
  kDiffY,
  kBilinear,
  kValidOf,
};

const char* op_name(Op op);

// Reverse-mode tape over Grid-valued nodes. Shapes are fixed at construction;
// leaves can be refreshed and the whole graph re-run, so a solver builds the
// graph once and iterates. Evaluation order is the construction order and all
// reductions run in index order, so repeated runs are bit-identical.
class Tape {
 public:
  Var leaf(const Grid& g, std::string name = {});
  Var leaf_scalar(double x, std::string name = {});
  Var constant(const Grid& g);
  Var constant_scalar(double x);

  void set_leaf(Var v, const Grid& g);
  void set_leaf_scalar(Var v, double x);

  // Elementwise binary ops; operands must share a shape or one must be 1x1.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);

  Var neg(Var a);
  Var abs(Var a);  // subgradient 0 at 0
  Var sqrt(Var a);
  Var tanh(Var a);
  Var sigmoid(Var a);
  Var softplus(Var a);
  Var min_const(Var a, double c);
  Var max_const(Var a, double c);
  Var acos_clamped(Var a);  // acos of input clamped to [-1, 1]

  Var sum(Var a);  // full reduction to a 1x1 scalar

  // Forward differences along x / y; output shrinks by one column / row.
  Var diff_x(Var a);
  Var diff_y(Var a);

  // Bilinear sampling of `src` at absolute pixel positions (xs, ys), pixel
  // centers at integer coordinates. Out-of-bounds samples produce 0 and are
  // flagged invalid; validity is recomputed on every forward pass.
  Var bilinear(Var src, Var xs, Var ys);
  const Mask& bilinear_valid(Var out) const;

  // 0/1 grid of the bilinear node's validity; constant w.r.t. all inputs.
  Var valid_of(Var bilinear_out);

  // Convenience compositions.
  Var add_const(Var a, double c) { return add(a, constant_scalar(c)); }
  Var mul_const(Var a, double c) { return mul(a, constant_scalar(c)); }
  Var mean(Var a);
  Var square(Var a) { return mul(a, a); }

  // Recomputes every node. Throws NonFiniteError when checking is enabled and
  // a primitive yields NaN/Inf.
  void forward();

  void backward(Var root);  // root must be 1x1; fills adjoints for all nodes

  const Grid& value(Var v) const;
  double value_scalar(Var v) const;
  const Grid& grad(Var v) const;

  // FNV-1a hash over the branch pattern (abs signs, clamp sides, bilinear
  // cells and validity) of the last forward pass. Only maintained while
  // record_branches is set. Two evaluations with equal hashes lie on the same
  // smooth piece of the function, which is what central differences require.
  uint64_t branch_hash() const { return branch_hash_; }
  void set_record_branches(bool on) { record_branches_ = on; }
  void set_check_finite(bool on) { check_finite_ = on; }

  // Elements clamped by min_const/max_const or sampled out of bounds during
  // the last forward pass.
  int64_t clamp_events() const { return clamp_events_; }

  int num_nodes() const { return static_cast<int>(nodes_.size()); }
  const std::string& node_name(int id) const { return nodes_[id].name; }
  Op node_op(int id) const { return nodes_[id].op; }

 private:
  struct Node {
    Op op;
    int h, w;
    Var a, b, c;
    double k0 = 0.0;
    std::string name;
    Grid val;
    Grid grad;
    // bilinear scratch: per-pixel cell origin and fractions
    std::vector<int32_t> cx, cy;
    std::vector<double> fx, fy;
    Mask valid;
  };

  Var push(Node n);
  Var binary(Op op, Var a, Var b);
  Var unary(Op op, Var a, double k0 = 0.0);
  const Node& node(Var v) const;
  void eval_node(Node& n);
  void check_finite(const Node& n);
  void hash_branch(int node_id, size_t elem, uint64_t branch);

  std::vector<Node> nodes_;
  bool check_finite_ = true;
  bool record_branches_ = true;
  uint64_t branch_hash_ = 0;
  int64_t clamp_events_ = 0;
};

// Named collection of real-valued arrays; the free variables of a problem.
// Shapes are fixed once an entry is added.
class ParamSet {
 public:
  void add(const std::string& name, const Grid& g);
  void add_scalar(const std::string& name, double x) { add(name, Grid::scalar(x)); }
  bool has(const std::string& name) const;
  const Grid& get(const std::string& name) const;
  Grid& get(const std::string& name);

  size_t count() const { return items_.size(); }
  const std::vector<std::pair<std::string, Grid>>& items() const { return items_; }
  std::vector<std::pair<std::string, Grid>>& items() { return items_; }

  size_t total_size() const;
  std::vector<double> to_flat() const;
  void from_flat(const std::vector<double>& flat);

  bool all_finite() const;
  bool congruent_with(const ParamSet& o) const;

 private:
  std::vector<std::pair<std::string, Grid>> items_;
  std::map<std::string, size_t> index_;
};

using Gradient = ParamSet;

// Builds the loss graph on the given tape; `leaves` maps each parameter name
// to its leaf Var. Must return a 1x1 scalar.
using LossBuilder = std::function<Var(Tape&, const std::map<std::string, Var>&)>;

// Scalar loss as a plain function of the parameters (for finite differences).
using LossFn = std::function<double(const ParamSet&)>;

// Exact value and reverse-mode gradient. Pure and deterministic: identical
// inputs produce bit-identical outputs.
std::pair<double, Gradient> value_and_grad(const LossBuilder& fn, const ParamSet& params);

double evaluate(const LossBuilder& fn, const ParamSet& params);

// Central differences (f(x+eps) - f(x-eps)) / (2 eps) per coordinate.
Gradient finite_diff_grad(const LossFn& fn, const ParamSet& params, double eps);

// Gradient check comparing reverse mode against central differences on one
// reused tape. Coordinates whose +/-eps evaluations land on different smooth
// pieces (branch hash mismatch) are excluded, mirroring the one-sided
// treatment of kinks. Coordinates where both gradients fall below grad_floor
// are counted as matching; below that scale central differences measure only
// rounding noise.
struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  size_t worst_index = 0;
  size_t checked = 0;
  size_t skipped = 0;
};
GradCheckResult grad_check(const LossBuilder& fn, const ParamSet& params, double eps,
                           double grad_floor = 1e-7);

}  // namespace sfm::ad
