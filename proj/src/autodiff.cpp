#include "sfm/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace sfm::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConst: return "const";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kAbs: return "abs";
    case Op::kSqrt: return "sqrt";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kSoftplus: return "softplus";
    case Op::kMinConst: return "min_const";
    case Op::kMaxConst: return "max_const";
    case Op::kAcosClamped: return "acos_clamped";
    case Op::kSum: return "sum";
    case Op::kDiffX: return "diff_x";
    case Op::kDiffY: return "diff_y";
    case Op::kBilinear: return "bilinear";
    case Op::kValidOf: return "valid_of";
  }
  return "?";
}

namespace {

inline double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

constexpr uint64_t kFnvOffset = 1469598103934665603ull;
constexpr uint64_t kFnvPrime = 1099511628211ull;

}  // namespace

Var Tape::push(Node n) {
  n.val = Grid(n.h, n.w);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || v.id >= static_cast<int32_t>(nodes_.size()))
    throw std::invalid_argument("invalid Var");
  return nodes_[v.id];
}

Var Tape::leaf(const Grid& g, std::string name) {
  Node n;
  n.op = Op::kLeaf;
  n.h = g.h;
  n.w = g.w;
  n.name = std::move(name);
  Var v = push(std::move(n));
  nodes_[v.id].val = g;
  return v;
}

Var Tape::leaf_scalar(double x, std::string name) { return leaf(Grid::scalar(x), std::move(name)); }

Var Tape::constant(const Grid& g) {
  Node n;
  n.op = Op::kConst;
  n.h = g.h;
  n.w = g.w;
  Var v = push(std::move(n));
  nodes_[v.id].val = g;
  return v;
}

Var Tape::constant_scalar(double x) { return constant(Grid::scalar(x)); }

void Tape::set_leaf(Var v, const Grid& g) {
  Node& n = nodes_[v.id];
  if (n.op != Op::kLeaf) throw std::invalid_argument("set_leaf: node is not a leaf");
  if (n.h != g.h || n.w != g.w) throw std::invalid_argument("set_leaf: shape mismatch");
  n.val = g;
}

void Tape::set_leaf_scalar(Var v, double x) { set_leaf(v, Grid::scalar(x)); }

Var Tape::binary(Op op, Var a, Var b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  const bool sa = na.h == 1 && na.w == 1;
  const bool sb = nb.h == 1 && nb.w == 1;
  if (!sa && !sb && (na.h != nb.h || na.w != nb.w))
    throw std::invalid_argument(std::string(op_name(op)) + ": shape mismatch");
  Node n;
  n.op = op;
  n.h = sa ? nb.h : na.h;
  n.w = sa ? nb.w : na.w;
  n.a = a;
  n.b = b;
  return push(std::move(n));
}

Var Tape::unary(Op op, Var a, double k0) {
  const Node& na = node(a);
  Node n;
  n.op = op;
  n.h = na.h;
  n.w = na.w;
  n.a = a;
  n.k0 = k0;
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) { return binary(Op::kAdd, a, b); }
Var Tape::sub(Var a, Var b) { return binary(Op::kSub, a, b); }
Var Tape::mul(Var a, Var b) { return binary(Op::kMul, a, b); }
Var Tape::div(Var a, Var b) { return binary(Op::kDiv, a, b); }
Var Tape::neg(Var a) { return unary(Op::kNeg, a); }
Var Tape::abs(Var a) { return unary(Op::kAbs, a); }
Var Tape::sqrt(Var a) { return unary(Op::kSqrt, a); }
Var Tape::tanh(Var a) { return unary(Op::kTanh, a); }
Var Tape::sigmoid(Var a) { return unary(Op::kSigmoid, a); }
Var Tape::softplus(Var a) { return unary(Op::kSoftplus, a); }
Var Tape::min_const(Var a, double c) { return unary(Op::kMinConst, a, c); }
Var Tape::max_const(Var a, double c) { return unary(Op::kMaxConst, a, c); }
Var Tape::acos_clamped(Var a) { return unary(Op::kAcosClamped, a); }

Var Tape::sum(Var a) {
  Node n;
  n.op = Op::kSum;
  n.h = 1;
  n.w = 1;
  n.a = a;
  return push(std::move(n));
}

Var Tape::mean(Var a) {
  const Node& na = node(a);
  const double inv = 1.0 / (static_cast<double>(na.h) * na.w);
  return mul_const(sum(a), inv);
}

Var Tape::diff_x(Var a) {
  const Node& na = node(a);
  if (na.w < 2) throw std::invalid_argument("diff_x: width < 2");
  Node n;
  n.op = Op::kDiffX;
  n.h = na.h;
  n.w = na.w - 1;
  n.a = a;
  return push(std::move(n));
}

Var Tape::diff_y(Var a) {
  const Node& na = node(a);
  if (na.h < 2) throw std::invalid_argument("diff_y: height < 2");
  Node n;
  n.op = Op::kDiffY;
  n.h = na.h - 1;
  n.w = na.w;
  n.a = a;
  return push(std::move(n));
}

Var Tape::bilinear(Var src, Var xs, Var ys) {
  const Node& ns = node(src);
  const Node& nx = node(xs);
  const Node& ny = node(ys);
  if (nx.h != ny.h || nx.w != ny.w) throw std::invalid_argument("bilinear: grid shape mismatch");
  if (ns.h < 1 || ns.w < 1) throw std::invalid_argument("bilinear: empty source");
  Node n;
  n.op = Op::kBilinear;
  n.h = nx.h;
  n.w = nx.w;
  n.a = src;
  n.b = xs;
  n.c = ys;
  const size_t m = static_cast<size_t>(nx.h) * nx.w;
  n.cx.resize(m);
  n.cy.resize(m);
  n.fx.resize(m);
  n.fy.resize(m);
  n.valid = Mask(nx.h, nx.w);
  return push(std::move(n));
}

const Mask& Tape::bilinear_valid(Var out) const {
  const Node& n = node(out);
  if (n.op != Op::kBilinear) throw std::invalid_argument("bilinear_valid: not a bilinear node");
  return n.valid;
}

Var Tape::valid_of(Var bilinear_out) {
  const Node& n = node(bilinear_out);
  if (n.op != Op::kBilinear) throw std::invalid_argument("valid_of: not a bilinear node");
  Node v;
  v.op = Op::kValidOf;
  v.h = n.h;
  v.w = n.w;
  v.a = bilinear_out;
  return push(std::move(v));
}

void Tape::hash_branch(int node_id, size_t elem, uint64_t branch) {
  uint64_t key = (static_cast<uint64_t>(node_id) << 44) ^ (static_cast<uint64_t>(elem) << 12) ^
                 branch;
  branch_hash_ ^= key;
  branch_hash_ *= kFnvPrime;
}

void Tape::check_finite(const Node& n) {
  for (double x : n.val.v) {
    if (!std::isfinite(x)) {
      throw NonFiniteError(n.name.empty() ? op_name(n.op) : n.name + " (" + op_name(n.op) + ")",
                           static_cast<int>(&n - nodes_.data()));
    }
  }
}

void Tape::eval_node(Node& n) {
  const int id = static_cast<int>(&n - nodes_.data());
  const size_t m = n.val.size();
  switch (n.op) {
    case Op::kLeaf:
    case Op::kConst:
      return;  // values held externally
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul:
    case Op::kDiv: {
      const Grid& a = nodes_[n.a.id].val;
      const Grid& b = nodes_[n.b.id].val;
      const size_t stra = a.size() == 1 ? 0 : 1;
      const size_t strb = b.size() == 1 ? 0 : 1;
      for (size_t i = 0; i < m; ++i) {
        const double x = a.v[i * stra];
        const double y = b.v[i * strb];
        switch (n.op) {
          case Op::kAdd: n.val.v[i] = x + y; break;
          case Op::kSub: n.val.v[i] = x - y; break;
          case Op::kMul: n.val.v[i] = x * y; break;
          default: n.val.v[i] = x / y; break;
        }
      }
      break;
    }
    case Op::kNeg: {
      const Grid& a = nodes_[n.a.id].val;
      for (size_t i = 0; i < m; ++i) n.val.v[i] = -a.v[i];
      break;
    }
    case Op::kAbs: {
      const Grid& a = nodes_[n.a.id].val;
      for (size_t i = 0; i < m; ++i) {
        const double x = a.v[i];
        n.val.v[i] = std::fabs(x);
        if (record_branches_) hash_branch(id, i, x < 0.0 ? 0 : (x > 0.0 ? 2 : 1));
      }
      break;
    }
    case Op::kSqrt: {
      const Grid& a = nodes_[n.a.id].val;
      for (size_t i = 0; i < m; ++i) n.val.v[i] = std::sqrt(a.v[i]);
      break;
    }
    case Op::kTanh: {
      const Grid& a = nodes_[n.a.id].val;
      for (size_t i = 0; i < m; ++i) n.val.v[i] = std::tanh(a.v[i]);
      break;
    }
    case Op::kSigmoid: {
      const Grid& a = nodes_[n.a.id].val;
      for (size_t i = 0; i < m; ++i) n.val.v[i] = stable_sigmoid(a.v[i]);
      break;
    }
    case Op::kSoftplus: {
      const Grid& a = nodes_[n.a.id].val;
      for (size_t i = 0; i < m; ++i) n.val.v[i] = stable_softplus(a.v[i]);
      break;
    }
    case Op::kMinConst: {
      const Grid& a = nodes_[n.a.id].val;
      for (size_t i = 0; i < m; ++i) {
        const bool clamped = a.v[i] > n.k0;
        n.val.v[i] = clamped ? n.k0 : a.v[i];
        if (clamped) ++clamp_events_;
        if (record_branches_) hash_branch(id, i, clamped ? 1 : 0);
      }
      break;
    }
    case Op::kMaxConst: {
      const Grid& a = nodes_[n.a.id].val;
      for (size_t i = 0; i < m; ++i) {
        const bool clamped = a.v[i] < n.k0;
        n.val.v[i] = clamped ? n.k0 : a.v[i];
        if (clamped) ++clamp_events_;
        if (record_branches_) hash_branch(id, i, clamped ? 1 : 0);
      }
      break;
    }
    case Op::kAcosClamped: {
      const Grid& a = nodes_[n.a.id].val;
      for (size_t i = 0; i < m; ++i) {
        const double x = a.v[i];
        const double t = std::min(1.0, std::max(-1.0, x));
        n.val.v[i] = std::acos(t);
        if (record_branches_) hash_branch(id, i, x <= -1.0 ? 0 : (x >= 1.0 ? 2 : 1));
      }
      break;
    }
    case Op::kSum: {
      const Grid& a = nodes_[n.a.id].val;
      double s = 0.0;
      for (double x : a.v) s += x;
      n.val.v[0] = s;
      break;
    }
    case Op::kDiffX: {
      const Grid& a = nodes_[n.a.id].val;
      for (int y = 0; y < n.h; ++y)
        for (int x = 0; x < n.w; ++x) n.val.at(y, x) = a.at(y, x + 1) - a.at(y, x);
      break;
    }
    case Op::kDiffY: {
      const Grid& a = nodes_[n.a.id].val;
      for (int y = 0; y < n.h; ++y)
        for (int x = 0; x < n.w; ++x) n.val.at(y, x) = a.at(y + 1, x) - a.at(y, x);
      break;
    }
    case Op::kBilinear: {
      const Grid& src = nodes_[n.a.id].val;
      const Grid& xs = nodes_[n.b.id].val;
      const Grid& ys = nodes_[n.c.id].val;
      const int W = src.w, H = src.h;
      for (size_t i = 0; i < m; ++i) {
        const double x = xs.v[i];
        const double y = ys.v[i];
        const bool ok = x >= 0.0 && x <= W - 1.0 && y >= 0.0 && y <= H - 1.0;
        n.valid.v[i] = ok ? 1 : 0;
        if (!ok) {
          n.val.v[i] = 0.0;
          n.cx[i] = 0;
          n.cy[i] = 0;
          n.fx[i] = 0.0;
          n.fy[i] = 0.0;
          ++clamp_events_;
          if (record_branches_) hash_branch(id, i, 0);
          continue;
        }
        int x0 = static_cast<int>(std::floor(x));
        int y0 = static_cast<int>(std::floor(y));
        x0 = std::min(std::max(x0, 0), std::max(W - 2, 0));
        y0 = std::min(std::max(y0, 0), std::max(H - 2, 0));
        const int x1 = std::min(x0 + 1, W - 1);
        const int y1 = std::min(y0 + 1, H - 1);
        const double fx = x - x0;
        const double fy = y - y0;
        const double v00 = src.at(y0, x0), v10 = src.at(y0, x1);
        const double v01 = src.at(y1, x0), v11 = src.at(y1, x1);
        n.val.v[i] = v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy) + v01 * (1 - fx) * fy +
                     v11 * fx * fy;
        n.cx[i] = x0;
        n.cy[i] = y0;
        n.fx[i] = fx;
        n.fy[i] = fy;
        if (record_branches_)
          hash_branch(id, i, 1 + (static_cast<uint64_t>(y0 + 1) << 20) +
                                 (static_cast<uint64_t>(x0 + 1) << 2));
      }
      break;
    }
    case Op::kValidOf: {
      const Node& b = nodes_[n.a.id];
      for (size_t i = 0; i < m; ++i) n.val.v[i] = b.valid.v[i] ? 1.0 : 0.0;
      break;
    }
  }
  if (check_finite_) check_finite(n);
}

void Tape::forward() {
  branch_hash_ = kFnvOffset;
  clamp_events_ = 0;
  for (Node& n : nodes_) eval_node(n);
}

void Tape::backward(Var root) {
  const Node& r = node(root);
  if (r.h != 1 || r.w != 1) throw std::invalid_argument("backward: root is not scalar");
  for (Node& n : nodes_) {
    if (n.grad.size() != n.val.size()) n.grad = Grid(n.h, n.w);
    std::fill(n.grad.v.begin(), n.grad.v.end(), 0.0);
  }
  nodes_[root.id].grad.v[0] = 1.0;

  for (int k = static_cast<int>(nodes_.size()) - 1; k >= 0; --k) {
    Node& n = nodes_[k];
    const size_t m = n.val.size();
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConst:
      case Op::kValidOf:
        break;
      case Op::kAdd:
      case Op::kSub:
      case Op::kMul:
      case Op::kDiv: {
        Node& na = nodes_[n.a.id];
        Node& nb = nodes_[n.b.id];
        const size_t stra = na.val.size() == 1 ? 0 : 1;
        const size_t strb = nb.val.size() == 1 ? 0 : 1;
        for (size_t i = 0; i < m; ++i) {
          const double g = n.grad.v[i];
          if (g == 0.0) continue;
          const double x = na.val.v[i * stra];
          const double y = nb.val.v[i * strb];
          switch (n.op) {
            case Op::kAdd:
              na.grad.v[i * stra] += g;
              nb.grad.v[i * strb] += g;
              break;
            case Op::kSub:
              na.grad.v[i * stra] += g;
              nb.grad.v[i * strb] -= g;
              break;
            case Op::kMul:
              na.grad.v[i * stra] += g * y;
              nb.grad.v[i * strb] += g * x;
              break;
            default:
              na.grad.v[i * stra] += g / y;
              nb.grad.v[i * strb] -= g * x / (y * y);
              break;
          }
        }
        break;
      }
      case Op::kNeg: {
        Node& na = nodes_[n.a.id];
        for (size_t i = 0; i < m; ++i) na.grad.v[i] -= n.grad.v[i];
        break;
      }
      case Op::kAbs: {
        Node& na = nodes_[n.a.id];
        for (size_t i = 0; i < m; ++i) {
          const double x = na.val.v[i];
          if (x > 0.0)
            na.grad.v[i] += n.grad.v[i];
          else if (x < 0.0)
            na.grad.v[i] -= n.grad.v[i];
        }
        break;
      }
      case Op::kSqrt: {
        Node& na = nodes_[n.a.id];
        for (size_t i = 0; i < m; ++i) {
          if (n.val.v[i] > 0.0) na.grad.v[i] += n.grad.v[i] * 0.5 / n.val.v[i];
        }
        break;
      }
      case Op::kTanh: {
        Node& na = nodes_[n.a.id];
        for (size_t i = 0; i < m; ++i)
          na.grad.v[i] += n.grad.v[i] * (1.0 - n.val.v[i] * n.val.v[i]);
        break;
      }
      case Op::kSigmoid: {
        Node& na = nodes_[n.a.id];
        for (size_t i = 0; i < m; ++i)
          na.grad.v[i] += n.grad.v[i] * n.val.v[i] * (1.0 - n.val.v[i]);
        break;
      }
      case Op::kSoftplus: {
        Node& na = nodes_[n.a.id];
        for (size_t i = 0; i < m; ++i)
          na.grad.v[i] += n.grad.v[i] * stable_sigmoid(na.val.v[i]);
        break;
      }
      case Op::kMinConst: {
        Node& na = nodes_[n.a.id];
        for (size_t i = 0; i < m; ++i)
          if (na.val.v[i] <= n.k0) na.grad.v[i] += n.grad.v[i];
        break;
      }
      case Op::kMaxConst: {
        Node& na = nodes_[n.a.id];
        for (size_t i = 0; i < m; ++i)
          if (na.val.v[i] >= n.k0) na.grad.v[i] += n.grad.v[i];
        break;
      }
      case Op::kAcosClamped: {
        Node& na = nodes_[n.a.id];
        for (size_t i = 0; i < m; ++i) {
          const double x = na.val.v[i];
          if (x > -1.0 && x < 1.0)
            na.grad.v[i] -= n.grad.v[i] / std::sqrt(1.0 - x * x);
        }
        break;
      }
      case Op::kSum: {
        Node& na = nodes_[n.a.id];
        const double g = n.grad.v[0];
        if (g != 0.0)
          for (double& ga : na.grad.v) ga += g;
        break;
      }
      case Op::kDiffX: {
        Node& na = nodes_[n.a.id];
        for (int y = 0; y < n.h; ++y)
          for (int x = 0; x < n.w; ++x) {
            const double g = n.grad.at(y, x);
            na.grad.at(y, x + 1) += g;
            na.grad.at(y, x) -= g;
          }
        break;
      }
      case Op::kDiffY: {
        Node& na = nodes_[n.a.id];
        for (int y = 0; y < n.h; ++y)
          for (int x = 0; x < n.w; ++x) {
            const double g = n.grad.at(y, x);
            na.grad.at(y + 1, x) += g;
            na.grad.at(y, x) -= g;
          }
        break;
      }
      case Op::kBilinear: {
        Node& nsrc = nodes_[n.a.id];
        Node& nxs = nodes_[n.b.id];
        Node& nys = nodes_[n.c.id];
        const Grid& src = nsrc.val;
        for (size_t i = 0; i < m; ++i) {
          if (!n.valid.v[i]) continue;
          const double g = n.grad.v[i];
          if (g == 0.0) continue;
          const int x0 = n.cx[i], y0 = n.cy[i];
          const int x1 = std::min(x0 + 1, src.w - 1);
          const int y1 = std::min(y0 + 1, src.h - 1);
          const double fx = n.fx[i], fy = n.fy[i];
          nsrc.grad.at(y0, x0) += g * (1 - fx) * (1 - fy);
          nsrc.grad.at(y0, x1) += g * fx * (1 - fy);
          nsrc.grad.at(y1, x0) += g * (1 - fx) * fy;
          nsrc.grad.at(y1, x1) += g * fx * fy;
          const double v00 = src.at(y0, x0), v10 = src.at(y0, x1);
          const double v01 = src.at(y1, x0), v11 = src.at(y1, x1);
          nxs.grad.v[i] += g * ((v10 - v00) * (1 - fy) + (v11 - v01) * fy);
          nys.grad.v[i] += g * ((v01 - v00) * (1 - fx) + (v11 - v10) * fx);
        }
        break;
      }
    }
  }
}

const Grid& Tape::value(Var v) const { return node(v).val; }

double Tape::value_scalar(Var v) const {
  const Node& n = node(v);
  if (n.h != 1 || n.w != 1) throw std::invalid_argument("value_scalar: not a scalar node");
  return n.val.v[0];
}

const Grid& Tape::grad(Var v) const { return node(v).grad; }

// ---------------------------------------------------------------------------
// ParamSet

void ParamSet::add(const std::string& name, const Grid& g) {
  if (index_.count(name)) throw std::invalid_argument("ParamSet: duplicate name " + name);
  index_[name] = items_.size();
  items_.emplace_back(name, g);
}

bool ParamSet::has(const std::string& name) const { return index_.count(name) > 0; }

const Grid& ParamSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("ParamSet: unknown name " + name);
  return items_[it->second].second;
}

Grid& ParamSet::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("ParamSet: unknown name " + name);
  return items_[it->second].second;
}

size_t ParamSet::total_size() const {
  size_t n = 0;
  for (const auto& [name, g] : items_) n += g.size();
  return n;
}

std::vector<double> ParamSet::to_flat() const {
  std::vector<double> out;
  out.reserve(total_size());
  for (const auto& [name, g] : items_) out.insert(out.end(), g.v.begin(), g.v.end());
  return out;
}

void ParamSet::from_flat(const std::vector<double>& flat) {
  if (flat.size() != total_size()) throw std::invalid_argument("from_flat: size mismatch");
  size_t k = 0;
  for (auto& [name, g] : items_) {
    std::copy(flat.begin() + k, flat.begin() + k + g.size(), g.v.begin());
    k += g.size();
  }
}

bool ParamSet::all_finite() const {
  for (const auto& [name, g] : items_)
    for (double x : g.v)
      if (!std::isfinite(x)) return false;
  return true;
}

bool ParamSet::congruent_with(const ParamSet& o) const {
  if (items_.size() != o.items_.size()) return false;
  for (size_t i = 0; i < items_.size(); ++i) {
    if (items_[i].first != o.items_[i].first) return false;
    if (!items_[i].second.same_shape(o.items_[i].second)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Module-level entry points

namespace {

std::map<std::string, Var> bind_leaves(Tape& tape, const ParamSet& params) {
  std::map<std::string, Var> leaves;
  for (const auto& [name, g] : params.items()) leaves[name] = tape.leaf(g, name);
  return leaves;
}

}  // namespace

std::pair<double, Gradient> value_and_grad(const LossBuilder& fn, const ParamSet& params) {
  Tape tape;
  tape.set_record_branches(false);
  auto leaves = bind_leaves(tape, params);
  Var root = fn(tape, leaves);
  tape.forward();
  const double value = tape.value_scalar(root);
  tape.backward(root);
  Gradient g;
  for (const auto& [name, grid] : params.items()) g.add(name, tape.grad(leaves.at(name)));
  return {value, g};
}

double evaluate(const LossBuilder& fn, const ParamSet& params) {
  Tape tape;
  tape.set_record_branches(false);
  auto leaves = bind_leaves(tape, params);
  Var root = fn(tape, leaves);
  tape.forward();
  return tape.value_scalar(root);
}

Gradient finite_diff_grad(const LossFn& fn, const ParamSet& params, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_grad: eps must be > 0");
  Gradient g;
  ParamSet probe = params;
  for (auto& [name, grid] : probe.items()) {
    Grid gg(grid.h, grid.w);
    for (size_t i = 0; i < grid.size(); ++i) {
      const double orig = grid.v[i];
      grid.v[i] = orig + eps;
      const double fp = fn(probe);
      grid.v[i] = orig - eps;
      const double fm = fn(probe);
      grid.v[i] = orig;
      gg.v[i] = (fp - fm) / (2.0 * eps);
    }
    g.add(name, gg);
  }
  return g;
}

GradCheckResult grad_check(const LossBuilder& fn, const ParamSet& params, double eps,
                           double grad_floor) {
  Tape tape;
  tape.set_record_branches(true);
  auto leaves = bind_leaves(tape, params);
  Var root = fn(tape, leaves);
  tape.forward();
  tape.backward(root);

  std::vector<std::pair<std::string, Grid>> analytic;
  for (const auto& [name, grid] : params.items())
    analytic.emplace_back(name, tape.grad(leaves.at(name)));

  GradCheckResult res;
  for (const auto& [name, grid] : params.items()) {
    Var lv = leaves.at(name);
    const Grid* ga = nullptr;
    for (const auto& [n2, g2] : analytic)
      if (n2 == name) ga = &g2;
    for (size_t i = 0; i < grid.size(); ++i) {
      const double orig = grid.v[i];
      Grid probe = grid;
      probe.v[i] = orig + eps;
      tape.set_leaf(lv, probe);
      tape.forward();
      const double fp = tape.value_scalar(root);
      const uint64_t hp = tape.branch_hash();
      probe.v[i] = orig - eps;
      tape.set_leaf(lv, probe);
      tape.forward();
      const double fm = tape.value_scalar(root);
      const uint64_t hm = tape.branch_hash();
      probe.v[i] = orig;
      tape.set_leaf(lv, probe);
      if (hp != hm) {
        ++res.skipped;
        continue;
      }
      const double fd = (fp - fm) / (2.0 * eps);
      const double a = ga->v[i];
      const double mag = std::max(std::fabs(a), std::fabs(fd));
      const double rel = mag < grad_floor ? 0.0 : std::fabs(a - fd) / mag;
      ++res.checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = name;
        res.worst_index = i;
      }
    }
  }
  return res;
}

}  // namespace sfm::ad
