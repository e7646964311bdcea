#include "sigstyle/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_set>

#include "sigstyle/errors.hpp"

namespace sigstyle::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using StridedConst = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using StridedMut = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

ConstMap as_mat(const Tensor& t, std::int64_t rows, std::int64_t cols) { return {t.data(), rows, cols}; }
MutMap as_mat(Tensor& t, std::int64_t rows, std::int64_t cols) { return {t.data(), rows, cols}; }

Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool req = false;
    for (const auto& p : parents) req = req || (p && p->requires_grad);
    if (req) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(fn);
    }
    return n;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a->value.shape() != b->value.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a->value.shape()) + " vs " +
                             shape_str(b->value.shape()));
    }
}

void require_rank(const Var& a, std::size_t r, const char* op) {
    if (a->value.rank() != r) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                             shape_str(a->value.shape()));
    }
}

bool wants(const Var& v) { return v && v->requires_grad; }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

void Node::accumulate(const Tensor& g) {
    if (grad.empty()) {
        grad = g;
        grad.reshape(value.shape());
        return;
    }
    if (g.numel() != grad.numel()) throw DimensionError("gradient size mismatch");
    double* dst = grad.data();
    const double* src = g.data();
    for (std::int64_t i = 0; i < grad.numel(); ++i) dst[i] += src[i];
}

void Node::accumulate_at(std::int64_t i, double g) { grad_buffer()[i] += g; }

Tensor& Node::grad_buffer() {
    if (grad.empty()) grad = Tensor::zeros_like(value);
    return grad;
}

Var constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return n;
}

Var parameter(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return n;
}

void backward(const Var& root) {
    if (!root) return;
    if (root->value.numel() != 1) throw DimensionError("backward: root must be a single element");
    if (!root->requires_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p && p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad = Tensor(root->value.shape(), 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    return make(std::move(out), {a, b}, [](Node& self) {
        if (wants(self.parents[0])) self.parents[0]->accumulate(self.grad);
        if (wants(self.parents[1])) self.parents[1]->accumulate(self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
    return make(std::move(out), {a, b}, [](Node& self) {
        if (wants(self.parents[0])) self.parents[0]->accumulate(self.grad);
        if (wants(self.parents[1])) {
            Tensor g = self.grad;
            for (auto& v : g.values()) v = -v;
            self.parents[1]->accumulate(g);
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    return make(std::move(out), {a, b}, [](Node& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (wants(self.parents[0])) {
            Tensor g = self.grad;
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= bv[i];
            self.parents[0]->accumulate(g);
        }
        if (wants(self.parents[1])) {
            Tensor g = self.grad;
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= av[i];
            self.parents[1]->accumulate(g);
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a->value;
    for (auto& v : out.values()) v *= s;
    return make(std::move(out), {a}, [s](Node& self) {
        Tensor g = self.grad;
        for (auto& v : g.values()) v *= s;
        self.parents[0]->accumulate(g);
    });
}

Var scale_by(const Var& s, const Var& a) {
    if (s->value.numel() != 1) throw DimensionError("scale_by: factor must hold one element");
    const double f = s->value[0];
    Tensor out = a->value;
    for (auto& v : out.values()) v *= f;
    return make(std::move(out), {s, a}, [](Node& self) {
        const double f = self.parents[0]->value[0];
        const auto& av = self.parents[1]->value;
        if (wants(self.parents[0])) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < av.numel(); ++i) acc += self.grad[i] * av[i];
            self.parents[0]->accumulate_at(0, acc);
        }
        if (wants(self.parents[1])) {
            Tensor g = self.grad;
            for (auto& v : g.values()) v *= f;
            self.parents[1]->accumulate(g);
        }
    });
}

namespace {

template <typename F, typename D>
Var unary(const Var& a, F f, D df) {
    Tensor out = a->value;
    for (auto& v : out.values()) v = f(v);
    return make(std::move(out), {a}, [df](Node& self) {
        const auto& x = self.parents[0]->value;
        Tensor g = self.grad;
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= df(x[i]);
        self.parents[0]->accumulate(g);
    });
}

}  // namespace

Var silu(const Var& a) {
    return unary(
        a, [](double x) { return x * sigmoid(x); },
        [](double x) {
            const double s = sigmoid(x);
            return s + x * s * (1.0 - s);
        });
}

Var gelu(const Var& a) {
    return unary(
        a, [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); },
        [](double x) {
            const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
            return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) + x * pdf;
        });
}

Var quick_gelu(const Var& a) {
    return unary(
        a, [](double x) { return x * sigmoid(1.702 * x); },
        [](double x) {
            const double s = sigmoid(1.702 * x);
            return s + 1.702 * x * s * (1.0 - s);
        });
}

Var reshape(const Var& a, Shape shape) {
    Tensor out = a->value.reshaped(std::move(shape));
    return make(std::move(out), {a}, [](Node& self) { self.parents[0]->accumulate(self.grad); });
}

// ------------------------------------------------------------- linear algebra

Var matmul(const Var& a, const Var& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const auto m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
    if (b->value.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions differ " + shape_str(a->value.shape()) + " x " +
                             shape_str(b->value.shape()));
    }
    Tensor out({m, n});
    as_mat(out, m, n).noalias() = as_mat(a->value, m, k) * as_mat(b->value, k, n);
    return make(std::move(out), {a, b}, [m, k, n](Node& self) {
        const auto g = as_mat(self.grad, m, n);
        if (wants(self.parents[0])) {
            Tensor ga({m, k});
            as_mat(ga, m, k).noalias() = g * as_mat(self.parents[1]->value, k, n).transpose();
            self.parents[0]->accumulate(ga);
        }
        if (wants(self.parents[1])) {
            Tensor gb({k, n});
            as_mat(gb, k, n).noalias() = as_mat(self.parents[0]->value, m, k).transpose() * g;
            self.parents[1]->accumulate(gb);
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
    require_rank(x, 2, "linear");
    require_rank(w, 2, "linear");
    const auto n = x->value.dim(0), in = x->value.dim(1), out_dim = w->value.dim(0);
    if (w->value.dim(1) != in) {
        throw DimensionError("linear: input width " + std::to_string(in) + " vs weight " +
                             shape_str(w->value.shape()));
    }
    if (bias && bias->value.numel() != out_dim) throw DimensionError("linear: bias length mismatch");
    Tensor out({n, out_dim});
    auto om = as_mat(out, n, out_dim);
    om.noalias() = as_mat(x->value, n, in) * as_mat(w->value, out_dim, in).transpose();
    if (bias) {
        for (std::int64_t r = 0; r < n; ++r) {
            for (std::int64_t c = 0; c < out_dim; ++c) om(r, c) += bias->value[c];
        }
    }
    std::vector<Var> parents{x, w};
    if (bias) parents.push_back(bias);
    return make(std::move(out), std::move(parents), [n, in, out_dim](Node& self) {
        const auto g = as_mat(self.grad, n, out_dim);
        if (wants(self.parents[0])) {
            Tensor gx({n, in});
            as_mat(gx, n, in).noalias() = g * as_mat(self.parents[1]->value, out_dim, in);
            self.parents[0]->accumulate(gx);
        }
        if (wants(self.parents[1])) {
            Tensor gw({out_dim, in});
            as_mat(gw, out_dim, in).noalias() = g.transpose() * as_mat(self.parents[0]->value, n, in);
            self.parents[1]->accumulate(gw);
        }
        if (self.parents.size() > 2 && wants(self.parents[2])) {
            Tensor gb({out_dim});
            for (std::int64_t r = 0; r < n; ++r) {
                for (std::int64_t c = 0; c < out_dim; ++c) gb[c] += g(r, c);
            }
            self.parents[2]->accumulate(gb);
        }
    });
}

Var outer(const Var& a, const Var& b) {
    const auto r = a->value.numel(), c = b->value.numel();
    Tensor out({r, c});
    for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < c; ++j) out.at(i, j) = a->value[i] * b->value[j];
    }
    return make(std::move(out), {a, b}, [r, c](Node& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (wants(self.parents[0])) {
            Tensor ga(av.shape());
            for (std::int64_t i = 0; i < r; ++i) {
                double s = 0.0;
                for (std::int64_t j = 0; j < c; ++j) s += self.grad.at(i, j) * bv[j];
                ga[i] = s;
            }
            self.parents[0]->accumulate(ga);
        }
        if (wants(self.parents[1])) {
            Tensor gb(bv.shape());
            for (std::int64_t i = 0; i < r; ++i) {
                for (std::int64_t j = 0; j < c; ++j) gb[j] += self.grad.at(i, j) * av[i];
            }
            self.parents[1]->accumulate(gb);
        }
    });
}

namespace {

// Shared implementation for per-row / per-column affine pieces.
Var broadcast_op(const Var& m, const Var& f, bool along_rows, bool multiply) {
    require_rank(m, 2, "broadcast");
    const auto r = m->value.dim(0), c = m->value.dim(1);
    const auto expected = along_rows ? r : c;
    if (f->value.numel() != expected) {
        throw DimensionError("broadcast: factor length " + std::to_string(f->value.numel()) + " vs " +
                             std::to_string(expected));
    }
    Tensor out = m->value;
    for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < c; ++j) {
            const double fv = f->value[along_rows ? i : j];
            out.at(i, j) = multiply ? out.at(i, j) * fv : out.at(i, j) + fv;
        }
    }
    return make(std::move(out), {m, f}, [r, c, along_rows, multiply](Node& self) {
        const auto& mv = self.parents[0]->value;
        const auto& fv = self.parents[1]->value;
        if (wants(self.parents[0])) {
            Tensor gm = self.grad;
            if (multiply) {
                for (std::int64_t i = 0; i < r; ++i) {
                    for (std::int64_t j = 0; j < c; ++j) gm.at(i, j) *= fv[along_rows ? i : j];
                }
            }
            self.parents[0]->accumulate(gm);
        }
        if (wants(self.parents[1])) {
            Tensor gf(fv.shape());
            for (std::int64_t i = 0; i < r; ++i) {
                for (std::int64_t j = 0; j < c; ++j) {
                    const double g = self.grad.at(i, j);
                    gf[along_rows ? i : j] += multiply ? g * mv.at(i, j) : g;
                }
            }
            self.parents[1]->accumulate(gf);
        }
    });
}

}  // namespace

Var mul_rows(const Var& m, const Var& s) { return broadcast_op(m, s, true, true); }
Var add_rows(const Var& m, const Var& h) { return broadcast_op(m, h, true, false); }
Var mul_cols(const Var& m, const Var& s) { return broadcast_op(m, s, false, true); }
Var add_cols(const Var& m, const Var& h) { return broadcast_op(m, h, false, false); }

// ------------------------------------------------------------------ image ops

Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, Padding pad) {
    require_rank(x, 3, "conv2d");
    require_rank(w, 4, "conv2d");
    const auto C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
    const auto O = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
    if (w->value.dim(1) != C) {
        throw DimensionError("conv2d: input channels " + std::to_string(C) + " vs weight " +
                             shape_str(w->value.shape()));
    }
    if (bias && bias->value.numel() != O) throw DimensionError("conv2d: bias length mismatch");
    const auto Ho = (H + pad.top + pad.bottom - kh) / stride + 1;
    const auto Wo = (W + pad.left + pad.right - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw DimensionError("conv2d: kernel larger than padded input");
    const auto K = C * kh * kw, P = Ho * Wo;

    const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad.top == 0 && pad.left == 0 &&
                           pad.bottom == 0 && pad.right == 0;
    Tensor cols;
    if (pointwise) {
        cols = x->value.reshaped({C, H * W});
    } else {
        cols = Tensor({K, P});
        for (std::int64_t c = 0; c < C; ++c) {
            for (std::int64_t ky = 0; ky < kh; ++ky) {
                for (std::int64_t kx = 0; kx < kw; ++kx) {
                    double* row = cols.data() + ((c * kh + ky) * kw + kx) * P;
                    for (std::int64_t oy = 0; oy < Ho; ++oy) {
                        const auto iy = oy * stride + ky - pad.top;
                        for (std::int64_t ox = 0; ox < Wo; ++ox) {
                            const auto ix = ox * stride + kx - pad.left;
                            row[oy * Wo + ox] = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                                    ? x->value[(c * H + iy) * W + ix]
                                                    : 0.0;
                        }
                    }
                }
            }
        }
    }

    Tensor out({O, Ho, Wo});
    auto om = as_mat(out, O, P);
    om.noalias() = as_mat(w->value, O, K) * as_mat(cols, K, P);
    if (bias) {
        for (std::int64_t o = 0; o < O; ++o) om.row(o).array() += bias->value[o];
    }

    std::vector<Var> parents{x, w};
    if (bias) parents.push_back(bias);
    const bool need_cols = wants(w);
    return make(std::move(out), std::move(parents),
                [C, H, W, O, kh, kw, Ho, Wo, K, P, stride, pad, pointwise,
                 cols = need_cols ? std::move(cols) : Tensor()](Node& self) {
                    const auto g = as_mat(self.grad, O, P);
                    if (wants(self.parents[1])) {
                        Tensor gw({O, C, kh, kw});
                        as_mat(gw, O, K).noalias() = g * as_mat(cols, K, P).transpose();
                        self.parents[1]->accumulate(gw);
                    }
                    if (self.parents.size() > 2 && wants(self.parents[2])) {
                        Tensor gb({O});
                        for (std::int64_t o = 0; o < O; ++o) gb[o] = g.row(o).sum();
                        self.parents[2]->accumulate(gb);
                    }
                    if (wants(self.parents[0])) {
                        Tensor gcols({K, P});
                        as_mat(gcols, K, P).noalias() = as_mat(self.parents[1]->value, O, K).transpose() * g;
                        if (pointwise) {
                            self.parents[0]->accumulate(gcols);
                            return;
                        }
                        Tensor gx({C, H, W});
                        for (std::int64_t c = 0; c < C; ++c) {
                            for (std::int64_t ky = 0; ky < kh; ++ky) {
                                for (std::int64_t kx = 0; kx < kw; ++kx) {
                                    const double* row = gcols.data() + ((c * kh + ky) * kw + kx) * P;
                                    for (std::int64_t oy = 0; oy < Ho; ++oy) {
                                        const auto iy = oy * stride + ky - pad.top;
                                        if (iy < 0 || iy >= H) continue;
                                        for (std::int64_t ox = 0; ox < Wo; ++ox) {
                                            const auto ix = ox * stride + kx - pad.left;
                                            if (ix < 0 || ix >= W) continue;
                                            gx[(c * H + iy) * W + ix] += row[oy * Wo + ox];
                                        }
                                    }
                                }
                            }
                        }
                        self.parents[0]->accumulate(gx);
                    }
                });
}

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps) {
    require_rank(x, 3, "group_norm");
    const auto C = x->value.dim(0), HW = x->value.dim(1) * x->value.dim(2);
    if (groups <= 0 || C % groups != 0) {
        throw DimensionError("group_norm: " + std::to_string(C) + " channels not divisible into " +
                             std::to_string(groups) + " groups");
    }
    if (gamma->value.numel() != C || beta->value.numel() != C) throw DimensionError("group_norm: affine length");
    const auto cpg = C / groups, n = cpg * HW;
    Tensor xhat(x->value.shape());
    std::vector<double> rstd(static_cast<std::size_t>(groups));
    Tensor out(x->value.shape());
    for (int g = 0; g < groups; ++g) {
        const double* src = x->value.data() + g * n;
        double mean = 0.0;
        for (std::int64_t i = 0; i < n; ++i) mean += src[i];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::int64_t i = 0; i < n; ++i) var += (src[i] - mean) * (src[i] - mean);
        var /= static_cast<double>(n);
        const double rs = 1.0 / std::sqrt(var + eps);
        rstd[static_cast<std::size_t>(g)] = rs;
        for (std::int64_t i = 0; i < n; ++i) {
            const auto c = g * cpg + i / HW;
            const double xh = (src[i] - mean) * rs;
            xhat[g * n + i] = xh;
            out[g * n + i] = xh * gamma->value[c] + beta->value[c];
        }
    }
    return make(std::move(out), {x, gamma, beta},
                [groups, C, HW, cpg, n, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                    const auto& gam = self.parents[1]->value;
                    if (wants(self.parents[1]) || wants(self.parents[2])) {
                        Tensor gg({C}), gbeta({C});
                        for (std::int64_t c = 0; c < C; ++c) {
                            for (std::int64_t p = 0; p < HW; ++p) {
                                const double g = self.grad[c * HW + p];
                                gg[c] += g * xhat[c * HW + p];
                                gbeta[c] += g;
                            }
                        }
                        if (wants(self.parents[1])) self.parents[1]->accumulate(gg);
                        if (wants(self.parents[2])) self.parents[2]->accumulate(gbeta);
                    }
                    if (wants(self.parents[0])) {
                        Tensor gx({C, HW});
                        for (int g = 0; g < groups; ++g) {
                            double sum_d = 0.0, sum_dx = 0.0;
                            for (std::int64_t i = 0; i < n; ++i) {
                                const auto c = g * cpg + i / HW;
                                const double d = self.grad[g * n + i] * gam[c];
                                sum_d += d;
                                sum_dx += d * xhat[g * n + i];
                            }
                            const double rs = rstd[static_cast<std::size_t>(g)];
                            const auto nd = static_cast<double>(n);
                            for (std::int64_t i = 0; i < n; ++i) {
                                const auto c = g * cpg + i / HW;
                                const double d = self.grad[g * n + i] * gam[c];
                                gx[g * n + i] = rs * (d - sum_d / nd - xhat[g * n + i] * sum_dx / nd);
                            }
                        }
                        self.parents[0]->accumulate(gx);
                    }
                });
}

Var add_channel(const Var& x, const Var& v) {
    require_rank(x, 3, "add_channel");
    const auto C = x->value.dim(0), HW = x->value.dim(1) * x->value.dim(2);
    if (v->value.numel() != C) throw DimensionError("add_channel: vector length mismatch");
    Tensor out = x->value;
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t p = 0; p < HW; ++p) out[c * HW + p] += v->value[c];
    }
    return make(std::move(out), {x, v}, [C, HW](Node& self) {
        if (wants(self.parents[0])) self.parents[0]->accumulate(self.grad);
        if (wants(self.parents[1])) {
            Tensor gv({C});
            for (std::int64_t c = 0; c < C; ++c) {
                for (std::int64_t p = 0; p < HW; ++p) gv[c] += self.grad[c * HW + p];
            }
            self.parents[1]->accumulate(gv);
        }
    });
}

Var upsample_nearest2x(const Var& x) {
    require_rank(x, 3, "upsample");
    const auto C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
    Tensor out({C, 2 * H, 2 * W});
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t y = 0; y < 2 * H; ++y) {
            for (std::int64_t xx = 0; xx < 2 * W; ++xx) {
                out[(c * 2 * H + y) * 2 * W + xx] = x->value[(c * H + y / 2) * W + xx / 2];
            }
        }
    }
    return make(std::move(out), {x}, [C, H, W](Node& self) {
        Tensor gx({C, H, W});
        for (std::int64_t c = 0; c < C; ++c) {
            for (std::int64_t y = 0; y < 2 * H; ++y) {
                for (std::int64_t xx = 0; xx < 2 * W; ++xx) {
                    gx[(c * H + y / 2) * W + xx / 2] += self.grad[(c * 2 * H + y) * 2 * W + xx];
                }
            }
        }
        self.parents[0]->accumulate(gx);
    });
}

Var concat_channels(const Var& a, const Var& b) {
    require_rank(a, 3, "concat_channels");
    require_rank(b, 3, "concat_channels");
    if (a->value.dim(1) != b->value.dim(1) || a->value.dim(2) != b->value.dim(2)) {
        throw DimensionError("concat_channels: spatial mismatch " + shape_str(a->value.shape()) + " vs " +
                             shape_str(b->value.shape()));
    }
    const auto Ca = a->value.dim(0), Cb = b->value.dim(0), H = a->value.dim(1), W = a->value.dim(2);
    Tensor out({Ca + Cb, H, W});
    std::copy(a->value.values().begin(), a->value.values().end(), out.data());
    std::copy(b->value.values().begin(), b->value.values().end(), out.data() + a->value.numel());
    return make(std::move(out), {a, b}, [Ca, Cb, H, W](Node& self) {
        const auto na = Ca * H * W;
        if (wants(self.parents[0])) {
            Tensor ga({Ca, H, W});
            std::copy(self.grad.data(), self.grad.data() + na, ga.data());
            self.parents[0]->accumulate(ga);
        }
        if (wants(self.parents[1])) {
            Tensor gb({Cb, H, W});
            std::copy(self.grad.data() + na, self.grad.data() + na + Cb * H * W, gb.data());
            self.parents[1]->accumulate(gb);
        }
    });
}

Var chw_to_tokens(const Var& x) {
    require_rank(x, 3, "chw_to_tokens");
    const auto C = x->value.dim(0), P = x->value.dim(1) * x->value.dim(2);
    Tensor out({P, C});
    as_mat(out, P, C) = as_mat(x->value, C, P).transpose();
    const Shape in_shape = x->value.shape();
    return make(std::move(out), {x}, [C, P, in_shape](Node& self) {
        Tensor gx(in_shape);
        as_mat(gx, C, P) = as_mat(self.grad, P, C).transpose();
        self.parents[0]->accumulate(gx);
    });
}

Var tokens_to_chw(const Var& x, std::int64_t h, std::int64_t w) {
    require_rank(x, 2, "tokens_to_chw");
    const auto P = x->value.dim(0), C = x->value.dim(1);
    if (P != h * w) throw DimensionError("tokens_to_chw: token count does not match spatial size");
    Tensor out({C, h, w});
    as_mat(out, C, P) = as_mat(x->value, P, C).transpose();
    return make(std::move(out), {x}, [C, P](Node& self) {
        Tensor gx({P, C});
        as_mat(gx, P, C) = as_mat(self.grad, C, P).transpose();
        self.parents[0]->accumulate(gx);
    });
}

// ---------------------------------------------------------------- sequence ops

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    require_rank(x, 2, "layer_norm");
    const auto N = x->value.dim(0), C = x->value.dim(1);
    if (gamma->value.numel() != C || beta->value.numel() != C) throw DimensionError("layer_norm: affine length");
    Tensor xhat({N, C}), out({N, C});
    std::vector<double> rstd(static_cast<std::size_t>(N));
    for (std::int64_t r = 0; r < N; ++r) {
        const double* src = x->value.data() + r * C;
        double mean = 0.0;
        for (std::int64_t c = 0; c < C; ++c) mean += src[c];
        mean /= static_cast<double>(C);
        double var = 0.0;
        for (std::int64_t c = 0; c < C; ++c) var += (src[c] - mean) * (src[c] - mean);
        var /= static_cast<double>(C);
        const double rs = 1.0 / std::sqrt(var + eps);
        rstd[static_cast<std::size_t>(r)] = rs;
        for (std::int64_t c = 0; c < C; ++c) {
            const double xh = (src[c] - mean) * rs;
            xhat[r * C + c] = xh;
            out[r * C + c] = xh * gamma->value[c] + beta->value[c];
        }
    }
    return make(std::move(out), {x, gamma, beta},
                [N, C, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                    const auto& gam = self.parents[1]->value;
                    if (wants(self.parents[1]) || wants(self.parents[2])) {
                        Tensor gg({C}), gb({C});
                        for (std::int64_t r = 0; r < N; ++r) {
                            for (std::int64_t c = 0; c < C; ++c) {
                                gg[c] += self.grad[r * C + c] * xhat[r * C + c];
                                gb[c] += self.grad[r * C + c];
                            }
                        }
                        if (wants(self.parents[1])) self.parents[1]->accumulate(gg);
                        if (wants(self.parents[2])) self.parents[2]->accumulate(gb);
                    }
                    if (wants(self.parents[0])) {
                        Tensor gx({N, C});
                        const auto nd = static_cast<double>(C);
                        for (std::int64_t r = 0; r < N; ++r) {
                            double sum_d = 0.0, sum_dx = 0.0;
                            for (std::int64_t c = 0; c < C; ++c) {
                                const double d = self.grad[r * C + c] * gam[c];
                                sum_d += d;
                                sum_dx += d * xhat[r * C + c];
                            }
                            const double rs = rstd[static_cast<std::size_t>(r)];
                            for (std::int64_t c = 0; c < C; ++c) {
                                const double d = self.grad[r * C + c] * gam[c];
                                gx[r * C + c] = rs * (d - sum_d / nd - xhat[r * C + c] * sum_dx / nd);
                            }
                        }
                        self.parents[0]->accumulate(gx);
                    }
                });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const auto C = parts.front()->value.rank() == 2 ? parts.front()->value.dim(1) : parts.front()->value.numel();
    std::int64_t rows = 0;
    std::vector<std::int64_t> offsets;
    for (const auto& p : parts) {
        const auto pc = p->value.rank() == 2 ? p->value.dim(1) : p->value.numel();
        if (pc != C) throw DimensionError("concat_rows: width mismatch");
        offsets.push_back(rows);
        rows += p->value.numel() / C;
    }
    Tensor out({rows, C});
    for (std::size_t i = 0; i < parts.size(); ++i) {
        std::copy(parts[i]->value.values().begin(), parts[i]->value.values().end(), out.data() + offsets[i] * C);
    }
    return make(std::move(out), parts, [C, offsets](Node& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            auto& p = self.parents[i];
            if (!wants(p)) continue;
            Tensor g(p->value.shape());
            std::copy(self.grad.data() + offsets[i] * C, self.grad.data() + offsets[i] * C + g.numel(), g.data());
            p->accumulate(g);
        }
    });
}

Var slice_cols(const Var& x, std::int64_t start, std::int64_t len) {
    require_rank(x, 2, "slice_cols");
    const auto N = x->value.dim(0), C = x->value.dim(1);
    if (start < 0 || len < 0 || start + len > C) throw DimensionError("slice_cols: range out of bounds");
    Tensor out({N, len});
    for (std::int64_t r = 0; r < N; ++r) {
        for (std::int64_t c = 0; c < len; ++c) out[r * len + c] = x->value[r * C + start + c];
    }
    return make(std::move(out), {x}, [N, C, start, len](Node& self) {
        Tensor gx({N, C});
        for (std::int64_t r = 0; r < N; ++r) {
            for (std::int64_t c = 0; c < len; ++c) gx[r * C + start + c] = self.grad[r * len + c];
        }
        self.parents[0]->accumulate(gx);
    });
}

Var gather_rows(const Var& table, const std::vector<std::int64_t>& ids) {
    require_rank(table, 2, "gather_rows");
    const auto V = table->value.dim(0), D = table->value.dim(1);
    Tensor out({static_cast<std::int64_t>(ids.size()), D});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= V) throw DimensionError("gather_rows: id out of range");
        std::copy(table->value.data() + ids[i] * D, table->value.data() + (ids[i] + 1) * D,
                  out.data() + static_cast<std::int64_t>(i) * D);
    }
    return make(std::move(out), {table}, [ids, D](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            for (std::int64_t c = 0; c < D; ++c) g[ids[i] * D + c] += self.grad[static_cast<std::int64_t>(i) * D + c];
        }
    });
}

// ------------------------------------------------------------------ attention

Tensor attention_probs(const Tensor& q, const Tensor& k, int heads, bool causal) {
    const auto Nq = q.dim(0), Nk = k.dim(0), width = q.dim(1);
    if (k.dim(1) != width || width % heads != 0) throw DimensionError("attention: q/k width mismatch");
    const auto d = width / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(d));
    Tensor probs({heads * Nq, Nk});
    for (int h = 0; h < heads; ++h) {
        StridedConst qh(q.data() + h * d, Nq, d, Eigen::OuterStride<>(width));
        StridedConst kh(k.data() + h * d, Nk, d, Eigen::OuterStride<>(width));
        MutMap ph(probs.data() + h * Nq * Nk, Nq, Nk);
        ph.noalias() = (qh * kh.transpose()) * inv;
        for (std::int64_t i = 0; i < Nq; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t j = 0; j < Nk; ++j) {
                if (causal && j > i) continue;
                mx = std::max(mx, ph(i, j));
            }
            double s = 0.0;
            for (std::int64_t j = 0; j < Nk; ++j) {
                const double e = (causal && j > i) ? 0.0 : std::exp(ph(i, j) - mx);
                ph(i, j) = e;
                s += e;
            }
            for (std::int64_t j = 0; j < Nk; ++j) ph(i, j) /= s;
        }
    }
    return probs;
}

Var attention(const Var& q, const Var& k, const Var& v, int heads, bool causal, const ProbsHook* hook) {
    require_rank(q, 2, "attention");
    require_rank(k, 2, "attention");
    require_rank(v, 2, "attention");
    const auto Nq = q->value.dim(0), Nk = k->value.dim(0), width = q->value.dim(1), vwidth = v->value.dim(1);
    if (v->value.dim(0) != Nk) throw DimensionError("attention: key/value length mismatch");
    if (heads <= 0 || width % heads != 0 || vwidth % heads != 0) throw DimensionError("attention: bad head count");
    const auto d = width / heads, dv = vwidth / heads;

    Tensor probs = attention_probs(q->value, k->value, heads, causal);
    bool replaced = false;
    if (hook && *hook) {
        if (auto r = (*hook)(probs)) {
            if (r->shape() != probs.shape()) {
                throw DimensionError("attention: replacement map " + shape_str(r->shape()) + " vs expected " +
                                     shape_str(probs.shape()));
            }
            probs = std::move(*r);
            replaced = true;
        }
    }

    Tensor out({Nq, vwidth});
    for (int h = 0; h < heads; ++h) {
        ConstMap ph(probs.data() + h * Nq * Nk, Nq, Nk);
        StridedConst vh(v->value.data() + h * dv, Nk, dv, Eigen::OuterStride<>(vwidth));
        StridedMut oh(out.data() + h * dv, Nq, dv, Eigen::OuterStride<>(vwidth));
        oh.noalias() = ph * vh;
    }

    return make(std::move(out), {q, k, v},
                [heads, Nq, Nk, width, vwidth, d, dv, replaced, probs = std::move(probs)](Node& self) {
                    const double inv = 1.0 / std::sqrt(static_cast<double>(d));
                    const auto& qv = self.parents[0]->value;
                    const auto& kv = self.parents[1]->value;
                    const auto& vv = self.parents[2]->value;
                    const bool want_qk = !replaced && (wants(self.parents[0]) || wants(self.parents[1]));
                    Tensor gq({Nq, width}), gk({Nk, width}), gv({Nk, vwidth});
                    for (int h = 0; h < heads; ++h) {
                        ConstMap ph(probs.data() + h * Nq * Nk, Nq, Nk);
                        StridedConst goh(self.grad.data() + h * dv, Nq, dv, Eigen::OuterStride<>(vwidth));
                        if (wants(self.parents[2])) {
                            StridedMut gvh(gv.data() + h * dv, Nk, dv, Eigen::OuterStride<>(vwidth));
                            gvh.noalias() = ph.transpose() * goh;
                        }
                        if (!want_qk) continue;
                        StridedConst vh(vv.data() + h * dv, Nk, dv, Eigen::OuterStride<>(vwidth));
                        RowMat dp = goh * vh.transpose();
                        for (std::int64_t i = 0; i < Nq; ++i) {
                            const double dot = (dp.row(i).array() * ph.row(i).array()).sum();
                            dp.row(i) = (ph.row(i).array() * (dp.row(i).array() - dot)).matrix();
                        }
                        dp *= inv;
                        StridedConst qh(qv.data() + h * d, Nq, d, Eigen::OuterStride<>(width));
                        StridedConst kh(kv.data() + h * d, Nk, d, Eigen::OuterStride<>(width));
                        StridedMut gqh(gq.data() + h * d, Nq, d, Eigen::OuterStride<>(width));
                        StridedMut gkh(gk.data() + h * d, Nk, d, Eigen::OuterStride<>(width));
                        gqh.noalias() = dp * kh;
                        gkh.noalias() = dp.transpose() * qh;
                    }
                    if (want_qk && wants(self.parents[0])) self.parents[0]->accumulate(gq);
                    if (want_qk && wants(self.parents[1])) self.parents[1]->accumulate(gk);
                    if (wants(self.parents[2])) self.parents[2]->accumulate(gv);
                });
}

// ----------------------------------------------------------------- reductions

Var mean(const Var& a) {
    const auto n = a->value.numel();
    Tensor out = Tensor::scalar(a->value.sum() / static_cast<double>(n));
    return make(std::move(out), {a}, [n](Node& self) {
        Tensor g(self.parents[0]->value.shape(), self.grad[0] / static_cast<double>(n));
        self.parents[0]->accumulate(g);
    });
}

Var mse(const Var& a, const Tensor& target) {
    if (a->value.numel() != target.numel()) throw DimensionError("mse: size mismatch");
    const auto n = a->value.numel();
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = a->value[i] - target[i];
        s += d * d;
    }
    return make(Tensor::scalar(s / static_cast<double>(n)), {a}, [n, target](Node& self) {
        const auto& av = self.parents[0]->value;
        Tensor g(av.shape());
        const double f = 2.0 * self.grad[0] / static_cast<double>(n);
        for (std::int64_t i = 0; i < n; ++i) g[i] = f * (av[i] - target[i]);
        self.parents[0]->accumulate(g);
    });
}

}  // namespace sigstyle::ag
