#pragma once

// Reverse-mode differentiation over Matrix values.
//
// A Var is a handle to a graph node. Nodes created while grad mode is on and
// at least one input requires a gradient record their parents and a backward
// closure; everything else is a plain value holder. The graph is rebuilt per
// loss evaluation and freed when the last handle goes away.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pte/numerics/matrix.hpp"

namespace pte::ad {

struct Node {
    Matrix value;
    Matrix grad;  // empty until something flows in
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Matrix&)> backward;
    std::string name;

    void accumulate(const Matrix& g);
    bool is_leaf() const noexcept { return parents.empty(); }
};

class Var {
public:
    Var() = default;
    /// Constant (never receives a gradient).
    explicit Var(Matrix value);

    static Var parameter(Matrix value, std::string name = {});

    const Matrix& value() const { return node_->value; }
    /// Gradient accumulated by backward(); empty matrix if none reached this node.
    const Matrix& grad() const { return node_->grad; }
    bool has_grad() const { return node_ && !node_->grad.empty(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const std::string& name() const { return node_->name; }

    std::size_t rows() const { return node_->value.rows(); }
    std::size_t cols() const { return node_->value.cols(); }
    bool valid() const noexcept { return static_cast<bool>(node_); }

    /// Same value, cut from the graph.
    Var detach() const { return Var(node_->value); }
    void zero_grad() const { node_->grad = Matrix(); }

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    friend Var record(Matrix value, std::initializer_list<const Var*> inputs,
                      std::function<void(const Matrix&)> backward);

    std::shared_ptr<Node> node_;
};

bool grad_enabled() noexcept;

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Creates a result node; the closure receives the output gradient and must
/// push contributions into the inputs that require them.
Var record(Matrix value, std::initializer_list<const Var*> inputs,
           std::function<void(const Matrix&)> backward);

/// Seeds d(root)/d(root) = 1 (root must be 1x1) and propagates to every
/// reachable node, each visited once in reverse topological order. Interior
/// gradients are released afterwards; leaf gradients accumulate across calls.
void backward(const Var& root);

// ---- elementwise / structural ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_constant(const Var& a, const Matrix& c);
Var hadamard(const Var& a, const Var& b);
Var exp(const Var& a);
Var gelu(const Var& a);
Var sum(const Var& a);
/// sum_ij a_ij * w_ij as a 1x1 value
Var weighted_sum(const Var& a, const Matrix& w);

Var matmul(const Var& a, const Var& b);
/// a * b^T
Var matmul_nt(const Var& a, const Var& b);

Var gather_rows(const Var& table, std::span<const int> ids);
Var select_rows(const Var& a, std::span<const std::size_t> rows);
Var concat_rows(const Var& a, const Var& b);
/// Column j of row i for each i, as an n x 1 column.
Var pick(const Var& a, std::span<const int> cols);

// ---- normalization ----
/// x_i * gain / sqrt(mean(x_i^2) + eps) per row; gain is 1 x cols.
Var rms_norm(const Var& x, const Var& gain, double eps);
/// Each row scaled to unit RMS; all-zero rows stay zero.
Var row_rms_normalize(const Var& x);
Var log_softmax_rows(const Var& x);

// ---- attention ----
/// Rotates consecutive column pairs inside each head by position-dependent
/// angles (rotary embedding). positions.size() == x.rows().
Var rotary(const Var& x, std::span<const std::size_t> positions, std::size_t d_head, double base);

/// Multi-head softmax attention. q is T x d; k and v are (n_prefix + T) x d.
/// Query j sees key rows [0, n_prefix + j]. Scores scaled by 1/sqrt(d_head).
Var causal_attention(const Var& q, const Var& k, const Var& v, std::size_t n_heads,
                     std::size_t n_prefix);

}  // namespace pte::ad
