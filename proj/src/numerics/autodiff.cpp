#include "pte/numerics/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <unordered_set>

#include "pte/errors.hpp"

namespace pte::ad {

namespace {

thread_local bool g_grad_enabled = true;

void require(bool ok, const char* what) {
    if (!ok) {
        throw ContractError(what);
    }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a.value().same_shape(b.value())) {
        throw ContractError(std::string(op) + ": shape mismatch");
    }
}

}  // namespace

void Node::accumulate(const Matrix& g) {
    if (grad.empty()) {
        grad = g;
    } else {
        axpy(grad, g);
    }
}

Var::Var(Matrix value) : node_(std::make_shared<Node>()) { node_->value = std::move(value); }

Var Var::parameter(Matrix value, std::string name) {
    Var v(std::move(value));
    v.node_->requires_grad = true;
    v.node_->name = std::move(name);
    return v;
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var record(Matrix value, std::initializer_list<const Var*> inputs,
           std::function<void(const Matrix&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (g_grad_enabled) {
        for (const Var* in : inputs) {
            if (in->requires_grad()) {
                node->requires_grad = true;
                break;
            }
        }
    }
    if (node->requires_grad) {
        for (const Var* in : inputs) {
            if (in->requires_grad()) {
                node->parents.push_back(in->node());
            }
        }
        node->backward = std::move(backward_fn);
    }
    return Var(std::move(node));
}

void backward(const Var& root) {
    require(root.valid() && root.rows() == 1 && root.cols() == 1, "backward: root must be 1x1");
    if (!root.requires_grad()) {
        return;
    }
    // Iterative post-order DFS gives a topological order (parents first).
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root.node()->accumulate(Matrix(1, 1, 1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->is_leaf() || node->grad.empty()) {
            continue;
        }
        node->backward(node->grad);
        node->grad = Matrix();
    }
}

// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    auto na = a.node(), nb = b.node();
    return record(a.value() + b.value(), {&a, &b}, [na, nb](const Matrix& g) {
        if (na->requires_grad) na->accumulate(g);
        if (nb->requires_grad) nb->accumulate(g);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    auto na = a.node(), nb = b.node();
    return record(a.value() - b.value(), {&a, &b}, [na, nb](const Matrix& g) {
        if (na->requires_grad) na->accumulate(g);
        if (nb->requires_grad) nb->accumulate(-1.0 * g);
    });
}

Var scale(const Var& a, double s) {
    auto na = a.node();
    return record(s * a.value(), {&a}, [na, s](const Matrix& g) { na->accumulate(s * g); });
}

Var add_constant(const Var& a, const Matrix& c) {
    auto na = a.node();
    return record(a.value() + c, {&a}, [na](const Matrix& g) { na->accumulate(g); });
}

Var hadamard(const Var& a, const Var& b) {
    require_same_shape(a, b, "hadamard");
    Matrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] *= b.value().data()[i];
    }
    auto na = a.node(), nb = b.node();
    return record(std::move(out), {&a, &b}, [na, nb](const Matrix& g) {
        if (na->requires_grad) {
            Matrix ga = g;
            for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] *= nb->value.data()[i];
            na->accumulate(ga);
        }
        if (nb->requires_grad) {
            Matrix gb = g;
            for (std::size_t i = 0; i < gb.size(); ++i) gb.data()[i] *= na->value.data()[i];
            nb->accumulate(gb);
        }
    });
}

Var exp(const Var& a) {
    Matrix out = a.value();
    for (double& x : out.data()) {
        x = std::exp(x);
    }
    auto na = a.node();
    Matrix saved = out;
    return record(std::move(out), {&a}, [na, saved = std::move(saved)](const Matrix& g) {
        Matrix ga = g;
        for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] *= saved.data()[i];
        na->accumulate(ga);
    });
}

Var gelu(const Var& a) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double k = 0.044715;
    Matrix out = a.value();
    for (double& x : out.data()) {
        x = 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x)));
    }
    auto na = a.node();
    return record(std::move(out), {&a}, [na](const Matrix& g) {
        Matrix ga = g;
        const auto x = na->value.data();
        for (std::size_t i = 0; i < ga.size(); ++i) {
            const double xi = x[i];
            const double u = c * (xi + k * xi * xi * xi);
            const double t = std::tanh(u);
            const double du = c * (1.0 + 3.0 * k * xi * xi);
            ga.data()[i] *= 0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du;
        }
        na->accumulate(ga);
    });
}

Var sum(const Var& a) {
    double acc = 0.0;
    for (double x : a.value().data()) acc += x;
    auto na = a.node();
    return record(Matrix(1, 1, acc), {&a}, [na](const Matrix& g) {
        na->accumulate(Matrix(na->value.rows(), na->value.cols(), g(0, 0)));
    });
}

Var weighted_sum(const Var& a, const Matrix& w) {
    require(a.value().same_shape(w), "weighted_sum: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) acc += a.value().data()[i] * w.data()[i];
    auto na = a.node();
    return record(Matrix(1, 1, acc), {&a}, [na, w](const Matrix& g) { na->accumulate(g(0, 0) * w); });
}

Var matmul(const Var& a, const Var& b) {
    auto na = a.node(), nb = b.node();
    return record(pte::matmul(a.value(), b.value()), {&a, &b}, [na, nb](const Matrix& g) {
        if (na->requires_grad) na->accumulate(pte::matmul_nt(g, nb->value));
        if (nb->requires_grad) nb->accumulate(pte::matmul_tn(na->value, g));
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    auto na = a.node(), nb = b.node();
    return record(pte::matmul_nt(a.value(), b.value()), {&a, &b}, [na, nb](const Matrix& g) {
        // c = a b^T: da = g b, db = g^T a
        if (na->requires_grad) na->accumulate(pte::matmul(g, nb->value));
        if (nb->requires_grad) nb->accumulate(pte::matmul_tn(g, na->value));
    });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
    const Matrix& t = table.value();
    Matrix out(ids.size(), t.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < t.rows(), "gather_rows: id out of range");
        auto src = t.row(static_cast<std::size_t>(ids[i]));
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    auto nt = table.node();
    std::vector<int> idx(ids.begin(), ids.end());
    return record(std::move(out), {&table}, [nt, idx = std::move(idx)](const Matrix& g) {
        Matrix gt(nt->value.rows(), nt->value.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            auto dst = gt.row(static_cast<std::size_t>(idx[i]));
            auto src = g.row(i);
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
        nt->accumulate(gt);
    });
}

Var select_rows(const Var& a, std::span<const std::size_t> rows) {
    const Matrix& m = a.value();
    Matrix out(rows.size(), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require(rows[i] < m.rows(), "select_rows: row out of range");
        auto src = m.row(rows[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    auto na = a.node();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return record(std::move(out), {&a}, [na, idx = std::move(idx)](const Matrix& g) {
        Matrix ga(na->value.rows(), na->value.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            auto dst = ga.row(idx[i]);
            auto src = g.row(i);
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
        na->accumulate(ga);
    });
}

Var concat_rows(const Var& a, const Var& b) {
    if (a.rows() == 0) return b;
    if (b.rows() == 0) return a;
    require(a.cols() == b.cols(), "concat_rows: column mismatch");
    Matrix out(a.rows() + b.rows(), a.cols());
    std::copy(a.value().data().begin(), a.value().data().end(), out.data().begin());
    std::copy(b.value().data().begin(), b.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.value().size()));
    auto na = a.node(), nb = b.node();
    return record(std::move(out), {&a, &b}, [na, nb](const Matrix& g) {
        const std::size_t split = na->value.size();
        if (na->requires_grad) {
            Matrix ga(na->value.rows(), na->value.cols());
            std::copy(g.data().begin(), g.data().begin() + static_cast<std::ptrdiff_t>(split), ga.data().begin());
            na->accumulate(ga);
        }
        if (nb->requires_grad) {
            Matrix gb(nb->value.rows(), nb->value.cols());
            std::copy(g.data().begin() + static_cast<std::ptrdiff_t>(split), g.data().end(), gb.data().begin());
            nb->accumulate(gb);
        }
    });
}

Var pick(const Var& a, std::span<const int> cols) {
    require(cols.size() == a.rows(), "pick: one column per row required");
    Matrix out(cols.size(), 1);
    for (std::size_t i = 0; i < cols.size(); ++i) {
        require(cols[i] >= 0 && static_cast<std::size_t>(cols[i]) < a.cols(), "pick: column out of range");
        out(i, 0) = a.value()(i, static_cast<std::size_t>(cols[i]));
    }
    auto na = a.node();
    std::vector<int> idx(cols.begin(), cols.end());
    return record(std::move(out), {&a}, [na, idx = std::move(idx)](const Matrix& g) {
        Matrix ga(na->value.rows(), na->value.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) ga(i, static_cast<std::size_t>(idx[i])) = g(i, 0);
        na->accumulate(ga);
    });
}

Var rms_norm(const Var& x, const Var& gain, double eps) {
    require(gain.rows() == 1 && gain.cols() == x.cols(), "rms_norm: gain must be 1 x cols");
    const Matrix& xv = x.value();
    const std::size_t n = xv.cols();
    Matrix out(xv.rows(), n);
    std::vector<double> inv(xv.rows());
    for (std::size_t i = 0; i < xv.rows(); ++i) {
        double ms = 0.0;
        for (double v : xv.row(i)) ms += v * v;
        inv[i] = 1.0 / std::sqrt(ms / static_cast<double>(n) + eps);
        for (std::size_t j = 0; j < n; ++j) out(i, j) = xv(i, j) * inv[i] * gain.value()(0, j);
    }
    auto nx = x.node(), ng = gain.node();
    return record(std::move(out), {&x, &gain}, [nx, ng, inv = std::move(inv)](const Matrix& g) {
        const Matrix& xv = nx->value;
        const Matrix& gv = ng->value;
        const std::size_t n = xv.cols();
        if (ng->requires_grad) {
            Matrix gg(1, n);
            for (std::size_t i = 0; i < xv.rows(); ++i)
                for (std::size_t j = 0; j < n; ++j) gg(0, j) += g(i, j) * xv(i, j) * inv[i];
            ng->accumulate(gg);
        }
        if (nx->requires_grad) {
            Matrix gx(xv.rows(), n);
            for (std::size_t i = 0; i < xv.rows(); ++i) {
                // y_j = x_j * r * w_j, r = (mean x^2 + eps)^-1/2
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g(i, j) * gv(0, j) * xv(i, j);
                const double r = inv[i];
                const double coeff = r * r * r * dot / static_cast<double>(n);
                for (std::size_t j = 0; j < n; ++j) gx(i, j) = g(i, j) * gv(0, j) * r - coeff * xv(i, j);
            }
            nx->accumulate(gx);
        }
    });
}

Var row_rms_normalize(const Var& x) {
    const Matrix& xv = x.value();
    const std::size_t n = xv.cols();
    Matrix out(xv.rows(), n);
    std::vector<double> inv(xv.rows(), 0.0);
    for (std::size_t i = 0; i < xv.rows(); ++i) {
        double ms = 0.0;
        for (double v : xv.row(i)) ms += v * v;
        if (ms == 0.0) continue;
        inv[i] = 1.0 / std::sqrt(ms / static_cast<double>(n));
        for (std::size_t j = 0; j < n; ++j) out(i, j) = xv(i, j) * inv[i];
    }
    auto nx = x.node();
    return record(std::move(out), {&x}, [nx, inv = std::move(inv)](const Matrix& g) {
        const Matrix& xv = nx->value;
        const std::size_t n = xv.cols();
        Matrix gx(xv.rows(), n);
        for (std::size_t i = 0; i < xv.rows(); ++i) {
            const double r = inv[i];
            if (r == 0.0) continue;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g(i, j) * xv(i, j);
            const double coeff = r * r * r * dot / static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) gx(i, j) = g(i, j) * r - coeff * xv(i, j);
        }
        nx->accumulate(gx);
    });
}

Var log_softmax_rows(const Var& x) {
    const Matrix& xv = x.value();
    Matrix out(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < xv.rows(); ++i) {
        auto row = log_softmax_row(xv.row(i));
        std::copy(row.begin(), row.end(), out.row(i).begin());
    }
    auto nx = x.node();
    Matrix saved = out;
    return record(std::move(out), {&x}, [nx, saved = std::move(saved)](const Matrix& g) {
        Matrix gx(saved.rows(), saved.cols());
        for (std::size_t i = 0; i < saved.rows(); ++i) {
            double gsum = 0.0;
            for (double v : g.row(i)) gsum += v;
            for (std::size_t j = 0; j < saved.cols(); ++j) gx(i, j) = g(i, j) - std::exp(saved(i, j)) * gsum;
        }
        nx->accumulate(gx);
    });
}

namespace {

// Rotates pairs in place; sign = -1 applies the inverse rotation.
void apply_rotary(Matrix& m, std::span<const std::size_t> positions, std::size_t d_head, double base,
                  double sign) {
    const std::size_t heads = m.cols() / d_head;
    const std::size_t half = d_head / 2;
    std::vector<double> freq(half);
    for (std::size_t i = 0; i < half; ++i) {
        freq[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
    }
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const double pos = static_cast<double>(positions[r]);
        for (std::size_t i = 0; i < half; ++i) {
            const double angle = pos * freq[i];
            const double c = std::cos(angle);
            const double s = sign * std::sin(angle);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t j = h * d_head + 2 * i;
                const double x0 = m(r, j);
                const double x1 = m(r, j + 1);
                m(r, j) = x0 * c - x1 * s;
                m(r, j + 1) = x0 * s + x1 * c;
            }
        }
    }
}

}  // namespace

Var rotary(const Var& x, std::span<const std::size_t> positions, std::size_t d_head, double base) {
    require(positions.size() == x.rows(), "rotary: one position per row required");
    require(d_head % 2 == 0 && d_head > 0 && x.cols() % d_head == 0, "rotary: bad head width");
    Matrix out = x.value();
    apply_rotary(out, positions, d_head, base, 1.0);
    auto nx = x.node();
    std::vector<std::size_t> pos(positions.begin(), positions.end());
    return record(std::move(out), {&x}, [nx, pos = std::move(pos), d_head, base](const Matrix& g) {
        Matrix gx = g;
        apply_rotary(gx, pos, d_head, base, -1.0);
        nx->accumulate(gx);
    });
}

Var causal_attention(const Var& q, const Var& k, const Var& v, std::size_t n_heads, std::size_t n_prefix) {
    const Matrix& qv = q.value();
    const Matrix& kv = k.value();
    const Matrix& vv = v.value();
    const std::size_t T = qv.rows();
    const std::size_t d = qv.cols();
    require(n_heads > 0 && d % n_heads == 0, "causal_attention: d not divisible by heads");
    require(kv.rows() == n_prefix + T && vv.rows() == kv.rows(), "causal_attention: key/value rows != n_prefix + T");
    require(kv.cols() == d && vv.cols() == d, "causal_attention: width mismatch");
    require(kv.rows() >= 1, "causal_attention: empty cache");
    const std::size_t dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t L = kv.rows();

    // probs[(j * n_heads + h) * L + i]
    auto probs = std::make_shared<std::vector<double>>(T * n_heads * L, 0.0);
    Matrix out(T, d);
    std::vector<double> scores(L);
    for (std::size_t j = 0; j < T; ++j) {
        const std::size_t visible = n_prefix + j + 1;
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t off = h * dh;
            double mx = -INFINITY;
            for (std::size_t i = 0; i < visible; ++i) {
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) acc += qv(j, off + c) * kv(i, off + c);
                scores[i] = acc * scale;
                mx = std::max(mx, scores[i]);
            }
            double total = 0.0;
            for (std::size_t i = 0; i < visible; ++i) {
                scores[i] = std::exp(scores[i] - mx);
                total += scores[i];
            }
            double* p = probs->data() + (j * n_heads + h) * L;
            for (std::size_t i = 0; i < visible; ++i) {
                p[i] = scores[i] / total;
                for (std::size_t c = 0; c < dh; ++c) out(j, off + c) += p[i] * vv(i, off + c);
            }
        }
    }

    auto nq = q.node(), nk = k.node(), nv = v.node();
    return record(std::move(out), {&q, &k, &v}, [nq, nk, nv, probs, n_heads, n_prefix, scale](const Matrix& g) {
        const Matrix& qv = nq->value;
        const Matrix& kv = nk->value;
        const Matrix& vv = nv->value;
        const std::size_t T = qv.rows();
        const std::size_t d = qv.cols();
        const std::size_t dh = d / n_heads;
        const std::size_t L = kv.rows();
        Matrix gq(T, d), gk(L, d), gv(L, d);
        std::vector<double> dp(L);
        for (std::size_t j = 0; j < T; ++j) {
            const std::size_t visible = n_prefix + j + 1;
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t off = h * dh;
                const double* p = probs->data() + (j * n_heads + h) * L;
                double pdp = 0.0;
                for (std::size_t i = 0; i < visible; ++i) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) {
                        acc += g(j, off + c) * vv(i, off + c);
                        gv(i, off + c) += p[i] * g(j, off + c);
                    }
                    dp[i] = acc;
                    pdp += p[i] * acc;
                }
                for (std::size_t i = 0; i < visible; ++i) {
                    const double ds = p[i] * (dp[i] - pdp) * scale;
                    for (std::size_t c = 0; c < dh; ++c) {
                        gq(j, off + c) += ds * kv(i, off + c);
                        gk(i, off + c) += ds * qv(j, off + c);
                    }
                }
            }
        }
        if (nq->requires_grad) nq->accumulate(gq);
        if (nk->requires_grad) nk->accumulate(gk);
        if (nv->requires_grad) nv->accumulate(gv);
    });
}

}  // namespace pte::ad
