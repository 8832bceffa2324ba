#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "space/common.hpp"

namespace space::ad {

// Reverse-mode automatic differentiation over dense matrices.
//
// Nodes are created eagerly (values computed at insertion), so the tape is
// already in topological order. Leaf values can be rebound with bind(), after
// which forward() re-evaluates the whole graph; backward() refuses to run on
// stale values. Instantiate with float for training and double when checking
// gradients against central finite differences.
template <class S>
class Graph {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  explicit Graph(bool checked = false) : checked_(checked) {}

  void set_checked(bool on) { checked_ = on; }

  // --- leaves -------------------------------------------------------------

  Var input(const std::string& name, MatX<S> value, bool requires_grad = false) {
    if (checked_) require(all_finite(value), "non-finite values bound to input '" + name + "'");
    Node n;
    n.kind = Op::kLeaf;
    n.name = name;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    const Var v = push(std::move(n));
    if (!name.empty()) by_name_[name] = v.id;
    return v;
  }

  Var constant(MatX<S> value) { return input("", std::move(value), false); }

  void bind(const std::string& name, MatX<S> value) {
    auto it = by_name_.find(name);
    require(it != by_name_.end(), "no input named '" + name + "'");
    Node& n = nodes_[static_cast<size_t>(it->second)];
    require(n.kind == Op::kLeaf, "'" + name + "' is not a leaf");
    if (checked_) require(all_finite(value), "non-finite values bound to input '" + name + "'");
    n.value = std::move(value);
    forward_valid_ = false;
  }

  // --- elementwise and linear ops ------------------------------------------

  Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    return emit(Op::kAdd, {a, b});
  }

  Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    return emit(Op::kSub, {a, b});
  }

  Var hadamard(Var a, Var b) {
    check_same_shape(a, b, "hadamard");
    return emit(Op::kHadamard, {a, b});
  }

  Var scale(Var a, S factor) {
    Var v = emit_deferred(Op::kScale, {a});
    node(v).alpha = factor;
    eval_node(v.id);
    return v;
  }

  // C = op(A) * op(B) with optional transposes.
  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
    const Eigen::Index ar = trans_a ? val(a).cols() : val(a).rows();
    const Eigen::Index ac = trans_a ? val(a).rows() : val(a).cols();
    const Eigen::Index br = trans_b ? val(b).cols() : val(b).rows();
    require(ac == br, "matmul: inner dimensions disagree at node " + describe(a) + " x " +
                          describe(b));
    (void)ar;
    Var v = emit_deferred(Op::kMatmul, {a, b});
    node(v).flag0 = trans_a;
    node(v).flag1 = trans_b;
    eval_node(v.id);
    return v;
  }

  // out.row(i) = table.row(ids[i]); backward scatter-adds.
  Var rows_select(Var table, std::vector<int> ids) {
    for (int id : ids)
      require(id >= 0 && id < val(table).rows(),
              "rows_select: index out of range at node " + describe(table));
    Var v = emit_deferred(Op::kRowsSelect, {table});
    node(v).ids = std::move(ids);
    eval_node(v.id);
    return v;
  }

  Var slice_cols(Var a, Eigen::Index start, Eigen::Index len) {
    require(start >= 0 && len > 0 && start + len <= val(a).cols(),
            "slice_cols: range out of bounds at node " + describe(a));
    Var v = emit_deferred(Op::kSliceCols, {a});
    node(v).i0 = start;
    node(v).i1 = len;
    eval_node(v.id);
    return v;
  }

  Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols: empty part list");
    for (const Var& p : parts)
      require(val(p).rows() == val(parts[0]).rows(), "concat_cols: row counts disagree");
    return emit(Op::kConcatCols, parts);
  }

  // --- nonlinearities -------------------------------------------------------

  Var relu(Var a) { return emit(Op::kRelu, {a}); }
  Var sigmoid(Var a) { return emit(Op::kSigmoid, {a}); }

  // Row-wise softmax; with causal=true entry (i,j) is masked out for j > i.
  Var row_softmax(Var a, bool causal = false) {
    if (causal)
      require(val(a).rows() == val(a).cols(), "causal softmax expects square score matrix");
    Var v = emit_deferred(Op::kRowSoftmax, {a});
    node(v).flag0 = causal;
    eval_node(v.id);
    return v;
  }

  // Row-wise x / sqrt(mean(x^2) + eps), without gain.
  Var rmsnorm(Var a, S eps) {
    Var v = emit_deferred(Op::kRmsNorm, {a});
    node(v).alpha = eps;
    eval_node(v.id);
    return v;
  }

  // y(i,j) = x(i,j) * gain(0,j); gain is a 1 x cols row vector.
  Var row_scale(Var a, Var gain) {
    require(val(gain).rows() == 1 && val(gain).cols() == val(a).cols(),
            "row_scale: gain must be 1 x cols of input");
    return emit(Op::kRowScale, {a, gain});
  }

  // --- reductions and losses -------------------------------------------------

  Var sum(Var a) { return emit(Op::kSum, {a}); }
  Var mean(Var a) { return emit(Op::kMean, {a}); }

  // (B x 1) of row dot products of two equally shaped matrices.
  Var rowwise_dot(Var a, Var b) {
    check_same_shape(a, b, "rowwise_dot");
    return emit(Op::kRowwiseDot, {a, b});
  }

  Var hadamard_const(Var a, MatX<S> mask) {
    require(mask.rows() == val(a).rows() && mask.cols() == val(a).cols(),
            "hadamard_const: mask shape mismatch");
    Var v = emit_deferred(Op::kHadamardConst, {a});
    node(v).aux = std::move(mask);
    eval_node(v.id);
    return v;
  }

  // Mean over rows of softplus(s) - y * s, the stable form of binary
  // cross-entropy on sigmoid(s). Scores and labels are B x 1.
  Var logistic_bce_mean(Var scores, MatX<S> labels) {
    require(val(scores).cols() == 1, "logistic_bce_mean: scores must be B x 1");
    require(labels.rows() == val(scores).rows() && labels.cols() == 1,
            "logistic_bce_mean: label shape mismatch");
    require(val(scores).rows() > 0, "logistic_bce_mean: empty batch");
    Var v = emit_deferred(Op::kLogisticBce, {scores});
    node(v).aux = std::move(labels);
    eval_node(v.id);
    return v;
  }

  // Mean cross-entropy of row-wise softmax(logits) against target ids.
  Var cross_entropy_mean(Var logits, std::vector<int> targets) {
    require(static_cast<Eigen::Index>(targets.size()) == val(logits).rows(),
            "cross_entropy_mean: one target per row required");
    for (int t : targets)
      require(t >= 0 && t < val(logits).cols(), "cross_entropy_mean: target id out of range");
    Var v = emit_deferred(Op::kCrossEntropy, {logits});
    node(v).ids = std::move(targets);
    eval_node(v.id);
    return v;
  }

  // --- evaluation ------------------------------------------------------------

  const MatX<S>& value(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
  const MatX<S>& gradient(Var v) const { return nodes_[static_cast<size_t>(v.id)].grad; }

  S scalar(Var v) const {
    require(value(v).size() == 1, "scalar() on non-scalar node " + describe(v));
    return value(v)(0, 0);
  }

  // Re-runs every node's forward computation from current leaf bindings.
  void forward() {
    for (size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].kind != Op::kLeaf) eval_node(static_cast<int>(i));
    forward_valid_ = true;
  }

  // Accumulates gradients of `output` into every requires_grad leaf.
  // Leaves with no path to the output keep zero gradients.
  void backward(Var output) {
    MatX<S> seed = MatX<S>::Ones(value(output).rows(), value(output).cols());
    backward(output, seed);
  }

  void backward(Var output, const MatX<S>& seed) {
    require(forward_valid_, "backward called before forward on rebound inputs");
    require(seed.rows() == value(output).rows() && seed.cols() == value(output).cols(),
            "backward: seed shape must match output");
    for (Node& n : nodes_) {
      if (n.requires_grad)
        n.grad = MatX<S>::Zero(n.value.rows(), n.value.cols());
      else
        n.grad.resize(0, 0);
    }
    Node& out = node(output);
    require(out.requires_grad, "backward: output does not depend on any trainable leaf");
    out.grad = seed;
    for (int i = output.id; i >= 0; --i) {
      const Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.requires_grad || n.kind == Op::kLeaf || n.grad.size() == 0) continue;
      backprop_node(i);
    }
  }

  void zero_grad() {
    for (Node& n : nodes_)
      if (n.grad.size() > 0) n.grad.setZero();
  }

  size_t size() const { return nodes_.size(); }

 private:
  enum class Op : uint8_t {
    kLeaf,
    kAdd,
    kSub,
    kHadamard,
    kScale,
    kMatmul,
    kRowsSelect,
    kSliceCols,
    kConcatCols,
    kRelu,
    kSigmoid,
    kRowSoftmax,
    kRmsNorm,
    kRowScale,
    kSum,
    kMean,
    kRowwiseDot,
    kHadamardConst,
    kLogisticBce,
    kCrossEntropy,
  };

  struct Node {
    Op kind = Op::kLeaf;
    std::vector<int> parents;
    MatX<S> value;
    MatX<S> grad;
    MatX<S> aux;       // op payload: masks, labels, cached softmax probabilities
    VecX<S> cache;     // cached per-row statistics (rmsnorm inverse norms)
    std::vector<int> ids;
    Eigen::Index i0 = 0, i1 = 0;
    S alpha = S(0);
    bool flag0 = false, flag1 = false;
    bool requires_grad = false;
    std::string name;
  };

  Node& node(Var v) { return nodes_[static_cast<size_t>(v.id)]; }
  const MatX<S>& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }

  std::string describe(Var v) const {
    const Node& n = nodes_[static_cast<size_t>(v.id)];
    if (!n.name.empty()) return "'" + n.name + "'";
    return "#" + std::to_string(v.id);
  }

  void check_same_shape(Var a, Var b, const char* op) const {
    require(val(a).rows() == val(b).rows() && val(a).cols() == val(b).cols(),
            std::string(op) + ": shape mismatch between " + describe(a) + " and " + describe(b));
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var emit_deferred(Op kind, const std::vector<Var>& parents) {
    Node n;
    n.kind = kind;
    for (const Var& p : parents) {
      require(p.valid(), "invalid parent node");
      n.parents.push_back(p.id);
      n.requires_grad = n.requires_grad || nodes_[static_cast<size_t>(p.id)].requires_grad;
    }
    return push(std::move(n));
  }

  Var emit(Op kind, const std::vector<Var>& parents) {
    Var v = emit_deferred(kind, parents);
    eval_node(v.id);
    return v;
  }

  void eval_node(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    const auto parent = [&](size_t k) -> const MatX<S>& {
      return nodes_[static_cast<size_t>(n.parents[k])].value;
    };
    switch (n.kind) {
      case Op::kLeaf:
        break;
      case Op::kAdd:
        n.value = parent(0) + parent(1);
        break;
      case Op::kSub:
        n.value = parent(0) - parent(1);
        break;
      case Op::kHadamard:
        n.value = parent(0).cwiseProduct(parent(1));
        break;
      case Op::kScale:
        n.value = parent(0) * n.alpha;
        break;
      case Op::kMatmul: {
        const MatX<S>& a = parent(0);
        const MatX<S>& b = parent(1);
        if (!n.flag0 && !n.flag1)
          n.value = a * b;
        else if (!n.flag0 && n.flag1)
          n.value = a * b.transpose();
        else if (n.flag0 && !n.flag1)
          n.value = a.transpose() * b;
        else
          n.value = a.transpose() * b.transpose();
        break;
      }
      case Op::kRowsSelect: {
        const MatX<S>& t = parent(0);
        n.value.resize(static_cast<Eigen::Index>(n.ids.size()), t.cols());
        for (size_t i = 0; i < n.ids.size(); ++i)
          n.value.row(static_cast<Eigen::Index>(i)) = t.row(n.ids[i]);
        break;
      }
      case Op::kSliceCols:
        n.value = parent(0).middleCols(n.i0, n.i1);
        break;
      case Op::kConcatCols: {
        Eigen::Index cols = 0;
        for (int p : n.parents) cols += nodes_[static_cast<size_t>(p)].value.cols();
        n.value.resize(parent(0).rows(), cols);
        Eigen::Index at = 0;
        for (int p : n.parents) {
          const MatX<S>& pv = nodes_[static_cast<size_t>(p)].value;
          n.value.middleCols(at, pv.cols()) = pv;
          at += pv.cols();
        }
        break;
      }
      case Op::kRelu:
        n.value = parent(0).cwiseMax(S(0));
        break;
      case Op::kSigmoid: {
        const MatX<S>& x = parent(0);
        n.value.resize(x.rows(), x.cols());
        for (Eigen::Index i = 0; i < x.size(); ++i) {
          const double z = static_cast<double>(x.data()[i]);
          n.value.data()[i] = static_cast<S>(1.0 / (1.0 + std::exp(-z)));
        }
        break;
      }
      case Op::kRowSoftmax: {
        const MatX<S>& x = parent(0);
        n.value.resize(x.rows(), x.cols());
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
          const Eigen::Index last = n.flag0 ? i : x.cols() - 1;
          double mx = -HUGE_VAL;
          for (Eigen::Index j = 0; j <= last; ++j)
            mx = std::max(mx, static_cast<double>(x(i, j)));
          double denom = 0.0;
          for (Eigen::Index j = 0; j <= last; ++j)
            denom += std::exp(static_cast<double>(x(i, j)) - mx);
          for (Eigen::Index j = 0; j < x.cols(); ++j) {
            n.value(i, j) =
                j <= last
                    ? static_cast<S>(std::exp(static_cast<double>(x(i, j)) - mx) / denom)
                    : S(0);
          }
        }
        break;
      }
      case Op::kRmsNorm: {
        const MatX<S>& x = parent(0);
        n.value.resize(x.rows(), x.cols());
        n.cache.resize(x.rows());
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
          const double ms = mean64(x.row(i).cwiseProduct(x.row(i)));
          const double inv = 1.0 / std::sqrt(ms + static_cast<double>(n.alpha));
          n.cache(i) = static_cast<S>(inv);
          n.value.row(i) = x.row(i) * static_cast<S>(inv);
        }
        break;
      }
      case Op::kRowScale: {
        const MatX<S>& x = parent(0);
        const MatX<S>& g = parent(1);
        n.value = (x.array().rowwise() * g.row(0).array()).matrix();
        break;
      }
      case Op::kSum: {
        n.value.resize(1, 1);
        n.value(0, 0) = static_cast<S>(sum64(parent(0)));
        break;
      }
      case Op::kMean: {
        n.value.resize(1, 1);
        n.value(0, 0) = static_cast<S>(mean64(parent(0)));
        break;
      }
      case Op::kRowwiseDot: {
        const MatX<S>& a = parent(0);
        const MatX<S>& b = parent(1);
        n.value.resize(a.rows(), 1);
        for (Eigen::Index i = 0; i < a.rows(); ++i)
          n.value(i, 0) = static_cast<S>(dot64(a.row(i), b.row(i)));
        break;
      }
      case Op::kHadamardConst:
        n.value = parent(0).cwiseProduct(n.aux);
        break;
      case Op::kLogisticBce: {
        const MatX<S>& s = parent(0);
        double acc = 0.0;
        for (Eigen::Index i = 0; i < s.rows(); ++i) {
          const double z = static_cast<double>(s(i, 0));
          const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
          acc += softplus - static_cast<double>(n.aux(i, 0)) * z;
        }
        n.value.resize(1, 1);
        n.value(0, 0) = static_cast<S>(acc / static_cast<double>(s.rows()));
        break;
      }
      case Op::kCrossEntropy: {
        const MatX<S>& logits = parent(0);
        n.aux.resize(logits.rows(), logits.cols());  // softmax probabilities
        double acc = 0.0;
        for (Eigen::Index i = 0; i < logits.rows(); ++i) {
          double mx = -HUGE_VAL;
          for (Eigen::Index j = 0; j < logits.cols(); ++j)
            mx = std::max(mx, static_cast<double>(logits(i, j)));
          double denom = 0.0;
          for (Eigen::Index j = 0; j < logits.cols(); ++j)
            denom += std::exp(static_cast<double>(logits(i, j)) - mx);
          const double log_denom = std::log(denom);
          for (Eigen::Index j = 0; j < logits.cols(); ++j)
            n.aux(i, j) =
                static_cast<S>(std::exp(static_cast<double>(logits(i, j)) - mx) / denom);
          const int t = n.ids[static_cast<size_t>(i)];
          acc += -(static_cast<double>(logits(i, t)) - mx - log_denom);
        }
        n.value.resize(1, 1);
        n.value(0, 0) = static_cast<S>(acc / static_cast<double>(logits.rows()));
        break;
      }
    }
    if (checked_ && n.kind != Op::kLeaf)
      require(all_finite(n.value),
              "non-finite intermediate at node #" + std::to_string(id) + " (op " +
                  std::to_string(static_cast<int>(n.kind)) + ")");
  }

  void backprop_node(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    const MatX<S>& g = n.grad;
    const auto pval = [&](size_t k) -> const MatX<S>& {
      return nodes_[static_cast<size_t>(n.parents[k])].value;
    };
    const auto pgrad = [&](size_t k) -> MatX<S>* {
      Node& p = nodes_[static_cast<size_t>(n.parents[k])];
      return p.requires_grad ? &p.grad : nullptr;
    };
    switch (n.kind) {
      case Op::kLeaf:
        break;
      case Op::kAdd:
        if (auto* d = pgrad(0)) *d += g;
        if (auto* d = pgrad(1)) *d += g;
        break;
      case Op::kSub:
        if (auto* d = pgrad(0)) *d += g;
        if (auto* d = pgrad(1)) *d -= g;
        break;
      case Op::kHadamard:
        if (auto* d = pgrad(0)) *d += g.cwiseProduct(pval(1));
        if (auto* d = pgrad(1)) *d += g.cwiseProduct(pval(0));
        break;
      case Op::kScale:
        if (auto* d = pgrad(0)) *d += g * n.alpha;
        break;
      case Op::kMatmul: {
        const MatX<S>& a = pval(0);
        const MatX<S>& b = pval(1);
        if (auto* da = pgrad(0)) {
          if (!n.flag0 && !n.flag1)
            *da += g * b.transpose();
          else if (!n.flag0 && n.flag1)
            *da += g * b;
          else if (n.flag0 && !n.flag1)
            *da += b * g.transpose();
          else
            *da += (g * b).transpose();
        }
        if (auto* db = pgrad(1)) {
          if (!n.flag0 && !n.flag1)
            *db += a.transpose() * g;
          else if (!n.flag0 && n.flag1)
            *db += g.transpose() * a;
          else if (n.flag0 && !n.flag1)
            *db += a * g;
          else
            *db += (a * g).transpose();
        }
        break;
      }
      case Op::kRowsSelect:
        if (auto* d = pgrad(0)) {
          for (size_t i = 0; i < n.ids.size(); ++i)
            d->row(n.ids[i]) += g.row(static_cast<Eigen::Index>(i));
        }
        break;
      case Op::kSliceCols:
        if (auto* d = pgrad(0)) d->middleCols(n.i0, n.i1) += g;
        break;
      case Op::kConcatCols: {
        Eigen::Index at = 0;
        for (size_t k = 0; k < n.parents.size(); ++k) {
          const Eigen::Index w = pval(k).cols();
          if (auto* d = pgrad(k)) *d += g.middleCols(at, w);
          at += w;
        }
        break;
      }
      case Op::kRelu:
        if (auto* d = pgrad(0))
          *d += g.cwiseProduct((pval(0).array() > S(0)).template cast<S>().matrix());
        break;
      case Op::kSigmoid:
        if (auto* d = pgrad(0))
          *d += g.cwiseProduct(n.value.cwiseProduct(
              (MatX<S>::Ones(n.value.rows(), n.value.cols()) - n.value)));
        break;
      case Op::kRowSoftmax:
        if (auto* d = pgrad(0)) {
          for (Eigen::Index i = 0; i < n.value.rows(); ++i) {
            const double dot = dot64(g.row(i), n.value.row(i));
            d->row(i) +=
                n.value.row(i).cwiseProduct(g.row(i) - MatX<S>::Constant(1, g.cols(),
                                                                         static_cast<S>(dot))
                                                           .row(0));
          }
        }
        break;
      case Op::kRmsNorm:
        if (auto* d = pgrad(0)) {
          const MatX<S>& x = pval(0);
          const Eigen::Index dim = x.cols();
          for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const double inv = static_cast<double>(n.cache(i));
            const double gx = dot64(g.row(i), x.row(i));
            const double coeff = gx * inv * inv * inv / static_cast<double>(dim);
            d->row(i) += g.row(i) * static_cast<S>(inv) - x.row(i) * static_cast<S>(coeff);
          }
        }
        break;
      case Op::kRowScale: {
        const MatX<S>& x = pval(0);
        const MatX<S>& gain = pval(1);
        if (auto* d = pgrad(0)) *d += (g.array().rowwise() * gain.row(0).array()).matrix();
        if (auto* d = pgrad(1)) {
          for (Eigen::Index j = 0; j < x.cols(); ++j)
            (*d)(0, j) += static_cast<S>(dot64(g.col(j), x.col(j)));
        }
        break;
      }
      case Op::kSum:
        if (auto* d = pgrad(0)) d->array() += g(0, 0);
        break;
      case Op::kMean:
        if (auto* d = pgrad(0))
          d->array() += g(0, 0) / static_cast<S>(pval(0).size());
        break;
      case Op::kRowwiseDot:
        if (auto* d = pgrad(0)) {
          for (Eigen::Index i = 0; i < pval(0).rows(); ++i)
            d->row(i) += pval(1).row(i) * g(i, 0);
        }
        if (auto* d = pgrad(1)) {
          for (Eigen::Index i = 0; i < pval(0).rows(); ++i)
            d->row(i) += pval(0).row(i) * g(i, 0);
        }
        break;
      case Op::kHadamardConst:
        if (auto* d = pgrad(0)) *d += g.cwiseProduct(n.aux);
        break;
      case Op::kLogisticBce:
        if (auto* d = pgrad(0)) {
          const MatX<S>& s = pval(0);
          const S w = g(0, 0) / static_cast<S>(s.rows());
          for (Eigen::Index i = 0; i < s.rows(); ++i) {
            const double z = static_cast<double>(s(i, 0));
            const double p = 1.0 / (1.0 + std::exp(-z));
            (*d)(i, 0) += w * static_cast<S>(p - static_cast<double>(n.aux(i, 0)));
          }
        }
        break;
      case Op::kCrossEntropy:
        if (auto* d = pgrad(0)) {
          const S w = g(0, 0) / static_cast<S>(n.aux.rows());
          *d += n.aux * w;
          for (Eigen::Index i = 0; i < n.aux.rows(); ++i)
            (*d)(i, n.ids[static_cast<size_t>(i)]) -= w;
        }
        break;
    }
  }

  std::vector<Node> nodes_;
  std::map<std::string, int> by_name_;
  bool forward_valid_ = true;
  bool checked_ = false;
};

// Evaluates a graph after rebinding the named inputs; returns nothing — read
// outputs through Graph::value on the vars of interest.
template <class S>
void eval_graph(Graph<S>& g, const std::map<std::string, MatX<S>>& inputs) {
  for (const auto& [name, value] : inputs) g.bind(name, value);
  g.forward();
}

}  // namespace space::ad
