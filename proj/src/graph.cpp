#include "af/graph.hpp"

#include <cmath>
#include <memory>
#include <utility>

namespace af {

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

const DenseMatrix& Var::value() const { return g->value(*this); }
int Var::rows() const { return value().rows(); }
int Var::cols() const { return value().cols(); }

double Var::scalar() const {
    const DenseMatrix& v = value();
    check(v.rows() == 1 && v.cols() == 1, "Var::scalar: node is " + shape_str(v) + ", not 1x1");
    return v(0, 0);
}

Var Graph::push(DenseMatrix value, std::vector<std::uint32_t> parents, bool needs_grad,
                std::function<void(Graph&, std::uint32_t)> back) {
    Node n;
    n.value = std::move(value);
    if (record_) {
        n.parents = std::move(parents);
        n.back = std::move(back);
        n.needs_grad = needs_grad;
    }
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

bool Graph::any_needs_grad(std::span<const Var> vs) const {
    if (!record_) {
        return false;
    }
    for (const Var& v : vs) {
        if (nodes_[v.id].needs_grad) {
            return true;
        }
    }
    return false;
}

DenseMatrix* Graph::grad_target(std::uint32_t id) {
    Node& n = nodes_[id];
    return n.active ? &n.grad : nullptr;
}

Var Graph::constant(DenseMatrix v) { return push(std::move(v), {}, false, nullptr); }

Var Graph::leaf(DenseMatrix v) { return push(std::move(v), {}, record_, nullptr); }

Var Graph::param(const DenseMatrix& value, DenseMatrix* grad_sink) {
    Var v = push(value, {}, record_, nullptr);
    if (record_) {
        nodes_[v.id].sink = grad_sink;
    }
    return v;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var Graph::add(Var a, Var b) {
    check(a.value().same_shape(b.value()),
          "add: shape mismatch (" + shape_str(a.value()) + " vs " + shape_str(b.value()) + ")");
    DenseMatrix out = a.value();
    const DenseMatrix& vb = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] += vb.data()[i];
    }
    const Var vs[] = {a, b};
    return push(std::move(out), {a.id, b.id}, any_needs_grad(vs),
                [pa = a.id, pb = b.id](Graph& g, std::uint32_t self) {
                    const DenseMatrix& gc = g.node(self).grad;
                    for (std::uint32_t p : {pa, pb}) {
                        if (DenseMatrix* gp = g.grad_target(p)) {
                            for (std::size_t i = 0; i < gc.size(); ++i) {
                                gp->data()[i] += gc.data()[i];
                            }
                        }
                    }
                });
}

Var Graph::sub(Var a, Var b) {
    check(a.value().same_shape(b.value()),
          "sub: shape mismatch (" + shape_str(a.value()) + " vs " + shape_str(b.value()) + ")");
    DenseMatrix out = a.value();
    const DenseMatrix& vb = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] -= vb.data()[i];
    }
    const Var vs[] = {a, b};
    return push(std::move(out), {a.id, b.id}, any_needs_grad(vs),
                [pa = a.id, pb = b.id](Graph& g, std::uint32_t self) {
                    const DenseMatrix& gc = g.node(self).grad;
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        for (std::size_t i = 0; i < gc.size(); ++i) {
                            gp->data()[i] += gc.data()[i];
                        }
                    }
                    if (DenseMatrix* gp = g.grad_target(pb)) {
                        for (std::size_t i = 0; i < gc.size(); ++i) {
                            gp->data()[i] -= gc.data()[i];
                        }
                    }
                });
}

Var Graph::hadamard(Var a, Var b) {
    check(a.value().same_shape(b.value()), "hadamard: shape mismatch (" + shape_str(a.value()) +
                                               " vs " + shape_str(b.value()) + ")");
    DenseMatrix out = a.value();
    const DenseMatrix& vb = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] *= vb.data()[i];
    }
    const Var vs[] = {a, b};
    return push(std::move(out), {a.id, b.id}, any_needs_grad(vs),
                [pa = a.id, pb = b.id](Graph& g, std::uint32_t self) {
                    const DenseMatrix& gc = g.node(self).grad;
                    const DenseMatrix& va = g.node(pa).value;
                    const DenseMatrix& vb2 = g.node(pb).value;
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        for (std::size_t i = 0; i < gc.size(); ++i) {
                            gp->data()[i] += gc.data()[i] * vb2.data()[i];
                        }
                    }
                    if (DenseMatrix* gp = g.grad_target(pb)) {
                        for (std::size_t i = 0; i < gc.size(); ++i) {
                            gp->data()[i] += gc.data()[i] * va.data()[i];
                        }
                    }
                });
}

Var Graph::hadamard_div(Var a, Var b) {
    check(a.value().same_shape(b.value()), "hadamard_div: shape mismatch (" +
                                               shape_str(a.value()) + " vs " +
                                               shape_str(b.value()) + ")");
    DenseMatrix out = a.value();
    const DenseMatrix& vb = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] /= vb.data()[i];
    }
    const Var vs[] = {a, b};
    return push(std::move(out), {a.id, b.id}, any_needs_grad(vs),
                [pa = a.id, pb = b.id](Graph& g, std::uint32_t self) {
                    const DenseMatrix& gc = g.node(self).grad;
                    const DenseMatrix& vc = g.node(self).value;
                    const DenseMatrix& vb2 = g.node(pb).value;
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        for (std::size_t i = 0; i < gc.size(); ++i) {
                            gp->data()[i] += gc.data()[i] / vb2.data()[i];
                        }
                    }
                    if (DenseMatrix* gp = g.grad_target(pb)) {
                        for (std::size_t i = 0; i < gc.size(); ++i) {
                            gp->data()[i] -= gc.data()[i] * vc.data()[i] / vb2.data()[i];
                        }
                    }
                });
}

Var Graph::scale(Var a, double k) {
    DenseMatrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] *= k;
    }
    const Var vs[] = {a};
    return push(std::move(out), {a.id}, any_needs_grad(vs),
                [pa = a.id, k](Graph& g, std::uint32_t self) {
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        const DenseMatrix& gc = g.node(self).grad;
                        for (std::size_t i = 0; i < gc.size(); ++i) {
                            gp->data()[i] += k * gc.data()[i];
                        }
                    }
                });
}

Var Graph::add_scalar(Var a, double k) {
    DenseMatrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] += k;
    }
    const Var vs[] = {a};
    return push(std::move(out), {a.id}, any_needs_grad(vs),
                [pa = a.id](Graph& g, std::uint32_t self) {
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        const DenseMatrix& gc = g.node(self).grad;
                        for (std::size_t i = 0; i < gc.size(); ++i) {
                            gp->data()[i] += gc.data()[i];
                        }
                    }
                });
}

Var Graph::exp(Var a) {
    DenseMatrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] = std::exp(out.data()[i]);
    }
    const Var vs[] = {a};
    return push(std::move(out), {a.id}, any_needs_grad(vs),
                [pa = a.id](Graph& g, std::uint32_t self) {
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        const DenseMatrix& gc = g.node(self).grad;
                        const DenseMatrix& vc = g.node(self).value;
                        for (std::size_t i = 0; i < gc.size(); ++i) {
                            gp->data()[i] += gc.data()[i] * vc.data()[i];
                        }
                    }
                });
}

Var Graph::log(Var a) {
    DenseMatrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] = std::log(out.data()[i]);
    }
    const Var vs[] = {a};
    return push(std::move(out), {a.id}, any_needs_grad(vs),
                [pa = a.id](Graph& g, std::uint32_t self) {
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        const DenseMatrix& gc = g.node(self).grad;
                        const DenseMatrix& va = g.node(pa).value;
                        for (std::size_t i = 0; i < gc.size(); ++i) {
                            gp->data()[i] += gc.data()[i] / va.data()[i];
                        }
                    }
                });
}

Var Graph::sqrt(Var a) {
    DenseMatrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] = std::sqrt(out.data()[i]);
    }
    const Var vs[] = {a};
    return push(std::move(out), {a.id}, any_needs_grad(vs),
                [pa = a.id](Graph& g, std::uint32_t self) {
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        const DenseMatrix& gc = g.node(self).grad;
                        const DenseMatrix& vc = g.node(self).value;
                        for (std::size_t i = 0; i < gc.size(); ++i) {
                            gp->data()[i] += 0.5 * gc.data()[i] / vc.data()[i];
                        }
                    }
                });
}

Var Graph::gelu(Var a) {
    // Exact erf form: 0.5 x (1 + erf(x / sqrt(2))).
    DenseMatrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = out.data()[i];
        out.data()[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    const Var vs[] = {a};
    return push(std::move(out), {a.id}, any_needs_grad(vs),
                [pa = a.id](Graph& g, std::uint32_t self) {
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        const DenseMatrix& gc = g.node(self).grad;
                        const DenseMatrix& va = g.node(pa).value;
                        for (std::size_t i = 0; i < gc.size(); ++i) {
                            const double x = va.data()[i];
                            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                            gp->data()[i] += gc.data()[i] * (cdf + x * pdf);
                        }
                    }
                });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Var Graph::matmul(Var a, Var b) {
    DenseMatrix out = mat::matmul(a.value(), b.value());
    const Var vs[] = {a, b};
    return push(std::move(out), {a.id, b.id}, any_needs_grad(vs),
                [pa = a.id, pb = b.id](Graph& g, std::uint32_t self) {
                    const DenseMatrix& gc = g.node(self).grad;
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        mat::matmul_nt_accum(gc, g.node(pb).value, *gp);  // gA += gC B^T
                    }
                    if (DenseMatrix* gp = g.grad_target(pb)) {
                        mat::matmul_tn_accum(g.node(pa).value, gc, *gp);  // gB += A^T gC
                    }
                });
}

Var Graph::transpose(Var a) {
    DenseMatrix out = mat::transpose(a.value());
    const Var vs[] = {a};
    return push(std::move(out), {a.id}, any_needs_grad(vs),
                [pa = a.id](Graph& g, std::uint32_t self) {
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        const DenseMatrix& gc = g.node(self).grad;
                        for (int i = 0; i < gc.rows(); ++i) {
                            for (int j = 0; j < gc.cols(); ++j) {
                                (*gp)(j, i) += gc(i, j);
                            }
                        }
                    }
                });
}

// ---------------------------------------------------------------------------
// reductions / broadcasts
// ---------------------------------------------------------------------------

Var Graph::rows_sum(Var a) {
    const DenseMatrix& v = a.value();
    DenseMatrix out(v.rows(), 1);
    for (int i = 0; i < v.rows(); ++i) {
        double s = 0.0;
        for (int j = 0; j < v.cols(); ++j) {
            s += v(i, j);
        }
        out(i, 0) = s;
    }
    const Var vs[] = {a};
    return push(std::move(out), {a.id}, any_needs_grad(vs),
                [pa = a.id](Graph& g, std::uint32_t self) {
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        const DenseMatrix& gc = g.node(self).grad;
                        for (int i = 0; i < gp->rows(); ++i) {
                            const double gi = gc(i, 0);
                            double* row = gp->row(i);
                            for (int j = 0; j < gp->cols(); ++j) {
                                row[j] += gi;
                            }
                        }
                    }
                });
}

Var Graph::cols_sum(Var a) {
    const DenseMatrix& v = a.value();
    DenseMatrix out(1, v.cols());
    for (int i = 0; i < v.rows(); ++i) {
        const double* row = v.row(i);
        for (int j = 0; j < v.cols(); ++j) {
            out(0, j) += row[j];
        }
    }
    const Var vs[] = {a};
    return push(std::move(out), {a.id}, any_needs_grad(vs),
                [pa = a.id](Graph& g, std::uint32_t self) {
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        const DenseMatrix& gc = g.node(self).grad;
                        for (int i = 0; i < gp->rows(); ++i) {
                            double* row = gp->row(i);
                            for (int j = 0; j < gp->cols(); ++j) {
                                row[j] += gc(0, j);
                            }
                        }
                    }
                });
}

Var Graph::broadcast_col(Var a, int cols) {
    const DenseMatrix& v = a.value();
    check(v.cols() == 1, "broadcast_col: input must be n x 1, got " + shape_str(v));
    DenseMatrix out(v.rows(), cols);
    for (int i = 0; i < v.rows(); ++i) {
        double* row = out.row(i);
        for (int j = 0; j < cols; ++j) {
            row[j] = v(i, 0);
        }
    }
    const Var vs[] = {a};
    return push(std::move(out), {a.id}, any_needs_grad(vs),
                [pa = a.id](Graph& g, std::uint32_t self) {
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        const DenseMatrix& gc = g.node(self).grad;
                        for (int i = 0; i < gc.rows(); ++i) {
                            const double* row = gc.row(i);
                            double s = 0.0;
                            for (int j = 0; j < gc.cols(); ++j) {
                                s += row[j];
                            }
                            (*gp)(i, 0) += s;
                        }
                    }
                });
}

Var Graph::broadcast_row(Var a, int rows) {
    const DenseMatrix& v = a.value();
    check(v.rows() == 1, "broadcast_row: input must be 1 x m, got " + shape_str(v));
    DenseMatrix out(rows, v.cols());
    for (int i = 0; i < rows; ++i) {
        double* row = out.row(i);
        for (int j = 0; j < v.cols(); ++j) {
            row[j] = v(0, j);
        }
    }
    const Var vs[] = {a};
    return push(std::move(out), {a.id}, any_needs_grad(vs),
                [pa = a.id](Graph& g, std::uint32_t self) {
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        const DenseMatrix& gc = g.node(self).grad;
                        for (int i = 0; i < gc.rows(); ++i) {
                            const double* row = gc.row(i);
                            for (int j = 0; j < gc.cols(); ++j) {
                                (*gp)(0, j) += row[j];
                            }
                        }
                    }
                });
}

Var Graph::sum_all(Var a) {
    const DenseMatrix& v = a.value();
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        s += v.data()[i];
    }
    DenseMatrix out(1, 1);
    out(0, 0) = s;
    const Var vs[] = {a};
    return push(std::move(out), {a.id}, any_needs_grad(vs),
                [pa = a.id](Graph& g, std::uint32_t self) {
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        const double gs = g.node(self).grad(0, 0);
                        for (std::size_t i = 0; i < gp->size(); ++i) {
                            gp->data()[i] += gs;
                        }
                    }
                });
}

Var Graph::mean_all(Var a) {
    const std::size_t n = a.value().size();
    return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// structured ops
// ---------------------------------------------------------------------------

Var Graph::softmax_rows(Var a) {
    DenseMatrix out = mat::softmax_rows(a.value());
    const Var vs[] = {a};
    return push(std::move(out), {a.id}, any_needs_grad(vs),
                [pa = a.id](Graph& g, std::uint32_t self) {
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        const DenseMatrix& gc = g.node(self).grad;
                        const DenseMatrix& y = g.node(self).value;
                        for (int i = 0; i < y.rows(); ++i) {
                            const double* yr = y.row(i);
                            const double* gr = gc.row(i);
                            double dot = 0.0;
                            for (int j = 0; j < y.cols(); ++j) {
                                dot += yr[j] * gr[j];
                            }
                            double* pr = gp->row(i);
                            for (int j = 0; j < y.cols(); ++j) {
                                pr[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                });
}

Var Graph::logsumexp_rows(Var a) {
    const DenseMatrix& v = a.value();
    DenseMatrix out(v.rows(), 1);
    for (int i = 0; i < v.rows(); ++i) {
        const double* x = v.row(i);
        double mx = x[0];
        for (int j = 1; j < v.cols(); ++j) {
            mx = std::max(mx, x[j]);
        }
        double s = 0.0;
        for (int j = 0; j < v.cols(); ++j) {
            s += std::exp(x[j] - mx);
        }
        out(i, 0) = mx + std::log(s);
    }
    const Var vs[] = {a};
    return push(std::move(out), {a.id}, any_needs_grad(vs),
                [pa = a.id](Graph& g, std::uint32_t self) {
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        const DenseMatrix& gc = g.node(self).grad;
                        const DenseMatrix& lse = g.node(self).value;
                        const DenseMatrix& x = g.node(pa).value;
                        for (int i = 0; i < x.rows(); ++i) {
                            const double gi = gc(i, 0);
                            const double li = lse(i, 0);
                            const double* xr = x.row(i);
                            double* pr = gp->row(i);
                            for (int j = 0; j < x.cols(); ++j) {
                                pr[j] += gi * std::exp(xr[j] - li);
                            }
                        }
                    }
                });
}

Var Graph::layernorm(Var x, Var gain, Var bias, double eps) {
    const DenseMatrix& v = x.value();
    DenseMatrix out = mat::layernorm_rows(v, gain.value(), bias.value(), eps);

    const Var vs[] = {x, gain, bias};
    if (!any_needs_grad(vs)) {
        return push(std::move(out), {x.id, gain.id, bias.id}, false, nullptr);
    }

    // Cache the standardized rows and per-row 1/sigma for the backward rule.
    auto ctx = std::make_shared<std::pair<DenseMatrix, std::vector<double>>>();
    ctx->first = DenseMatrix(v.rows(), v.cols());
    ctx->second.resize(v.rows());
    const int m = v.cols();
    for (int i = 0; i < v.rows(); ++i) {
        const double* xr = v.row(i);
        double mean = 0.0;
        for (int j = 0; j < m; ++j) {
            mean += xr[j];
        }
        mean /= m;
        double var = 0.0;
        for (int j = 0; j < m; ++j) {
            const double d = xr[j] - mean;
            var += d * d;
        }
        var /= m;
        const double inv = 1.0 / std::sqrt(var + eps);
        ctx->second[i] = inv;
        for (int j = 0; j < m; ++j) {
            ctx->first(i, j) = (xr[j] - mean) * inv;
        }
    }

    return push(std::move(out), {x.id, gain.id, bias.id}, true,
                [px = x.id, pg = gain.id, pb = bias.id, ctx](Graph& g, std::uint32_t self) {
                    const DenseMatrix& gc = g.node(self).grad;
                    const DenseMatrix& xhat = ctx->first;
                    const std::vector<double>& inv_sigma = ctx->second;
                    const DenseMatrix& gainv = g.node(pg).value;
                    const int m2 = xhat.cols();

                    if (DenseMatrix* gp = g.grad_target(pb)) {
                        for (int i = 0; i < gc.rows(); ++i) {
                            const double* gr = gc.row(i);
                            for (int j = 0; j < m2; ++j) {
                                (*gp)(0, j) += gr[j];
                            }
                        }
                    }
                    if (DenseMatrix* gp = g.grad_target(pg)) {
                        for (int i = 0; i < gc.rows(); ++i) {
                            const double* gr = gc.row(i);
                            const double* hr = xhat.row(i);
                            for (int j = 0; j < m2; ++j) {
                                (*gp)(0, j) += gr[j] * hr[j];
                            }
                        }
                    }
                    if (DenseMatrix* gp = g.grad_target(px)) {
                        for (int i = 0; i < gc.rows(); ++i) {
                            const double* gr = gc.row(i);
                            const double* hr = xhat.row(i);
                            double mean_g = 0.0;
                            double mean_gh = 0.0;
                            for (int j = 0; j < m2; ++j) {
                                const double gj = gr[j] * gainv(0, j);
                                mean_g += gj;
                                mean_gh += gj * hr[j];
                            }
                            mean_g /= m2;
                            mean_gh /= m2;
                            double* pr = gp->row(i);
                            const double inv = inv_sigma[i];
                            for (int j = 0; j < m2; ++j) {
                                const double gj = gr[j] * gainv(0, j);
                                pr[j] += inv * (gj - mean_g - hr[j] * mean_gh);
                            }
                        }
                    }
                });
}

Var Graph::gather_rows(Var a, std::vector<int> idx) {
    const DenseMatrix& v = a.value();
    DenseMatrix out(static_cast<int>(idx.size()), v.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        check(idx[i] >= 0 && idx[i] < v.rows(),
              "gather_rows: index " + std::to_string(idx[i]) + " out of range for " + shape_str(v));
        const double* src = v.row(idx[i]);
        double* dst = out.row(static_cast<int>(i));
        for (int j = 0; j < v.cols(); ++j) {
            dst[j] = src[j];
        }
    }
    const Var vs[] = {a};
    return push(std::move(out), {a.id}, any_needs_grad(vs),
                [pa = a.id, idx = std::move(idx)](Graph& g, std::uint32_t self) {
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        const DenseMatrix& gc = g.node(self).grad;
                        for (std::size_t i = 0; i < idx.size(); ++i) {
                            const double* src = gc.row(static_cast<int>(i));
                            double* dst = gp->row(idx[i]);
                            for (int j = 0; j < gc.cols(); ++j) {
                                dst[j] += src[j];
                            }
                        }
                    }
                });
}

Var Graph::gather_cols(Var a, std::vector<int> idx) {
    const DenseMatrix& v = a.value();
    DenseMatrix out(v.rows(), static_cast<int>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) {
        check(idx[j] >= 0 && idx[j] < v.cols(),
              "gather_cols: index " + std::to_string(idx[j]) + " out of range for " + shape_str(v));
        for (int i = 0; i < v.rows(); ++i) {
            out(i, static_cast<int>(j)) = v(i, idx[j]);
        }
    }
    const Var vs[] = {a};
    return push(std::move(out), {a.id}, any_needs_grad(vs),
                [pa = a.id, idx = std::move(idx)](Graph& g, std::uint32_t self) {
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        const DenseMatrix& gc = g.node(self).grad;
                        for (std::size_t j = 0; j < idx.size(); ++j) {
                            for (int i = 0; i < gc.rows(); ++i) {
                                (*gp)(i, idx[j]) += gc(i, static_cast<int>(j));
                            }
                        }
                    }
                });
}

Var Graph::concat_rows(std::span<const Var> parts) {
    check(!parts.empty(), "concat_rows: empty input");
    const int cols = parts[0].cols();
    int rows = 0;
    for (const Var& p : parts) {
        check(p.cols() == cols, "concat_rows: column mismatch");
        rows += p.rows();
    }
    DenseMatrix out(rows, cols);
    std::vector<std::uint32_t> ids;
    std::vector<int> offsets;
    int at = 0;
    for (const Var& p : parts) {
        const DenseMatrix& v = p.value();
        for (int i = 0; i < v.rows(); ++i) {
            const double* src = v.row(i);
            double* dst = out.row(at + i);
            for (int j = 0; j < cols; ++j) {
                dst[j] = src[j];
            }
        }
        ids.push_back(p.id);
        offsets.push_back(at);
        at += v.rows();
    }
    return push(std::move(out), std::move(ids), any_needs_grad(parts),
                [offsets = std::move(offsets)](Graph& g, std::uint32_t self) {
                    const DenseMatrix& gc = g.node(self).grad;
                    const auto& parents = g.node(self).parents;
                    for (std::size_t k = 0; k < parents.size(); ++k) {
                        if (DenseMatrix* gp = g.grad_target(parents[k])) {
                            for (int i = 0; i < gp->rows(); ++i) {
                                const double* src = gc.row(offsets[k] + i);
                                double* dst = gp->row(i);
                                for (int j = 0; j < gc.cols(); ++j) {
                                    dst[j] += src[j];
                                }
                            }
                        }
                    }
                });
}

Var Graph::concat_cols(std::span<const Var> parts) {
    check(!parts.empty(), "concat_cols: empty input");
    const int rows = parts[0].rows();
    int cols = 0;
    for (const Var& p : parts) {
        check(p.rows() == rows, "concat_cols: row mismatch");
        cols += p.cols();
    }
    DenseMatrix out(rows, cols);
    std::vector<std::uint32_t> ids;
    std::vector<int> offsets;
    int at = 0;
    for (const Var& p : parts) {
        const DenseMatrix& v = p.value();
        for (int i = 0; i < rows; ++i) {
            const double* src = v.row(i);
            double* dst = out.row(i) + at;
            for (int j = 0; j < v.cols(); ++j) {
                dst[j] = src[j];
            }
        }
        ids.push_back(p.id);
        offsets.push_back(at);
        at += v.cols();
    }
    return push(std::move(out), std::move(ids), any_needs_grad(parts),
                [offsets = std::move(offsets)](Graph& g, std::uint32_t self) {
                    const DenseMatrix& gc = g.node(self).grad;
                    const auto& parents = g.node(self).parents;
                    for (std::size_t k = 0; k < parents.size(); ++k) {
                        if (DenseMatrix* gp = g.grad_target(parents[k])) {
                            for (int i = 0; i < gp->rows(); ++i) {
                                const double* src = gc.row(i) + offsets[k];
                                double* dst = gp->row(i);
                                for (int j = 0; j < gp->cols(); ++j) {
                                    dst[j] += src[j];
                                }
                            }
                        }
                    }
                });
}

Var Graph::diag(Var a) {
    const DenseMatrix& v = a.value();
    check(v.rows() == v.cols(), "diag: matrix must be square, got " + shape_str(v));
    DenseMatrix out(v.rows(), 1);
    for (int i = 0; i < v.rows(); ++i) {
        out(i, 0) = v(i, i);
    }
    const Var vs[] = {a};
    return push(std::move(out), {a.id}, any_needs_grad(vs),
                [pa = a.id](Graph& g, std::uint32_t self) {
                    if (DenseMatrix* gp = g.grad_target(pa)) {
                        const DenseMatrix& gc = g.node(self).grad;
                        for (int i = 0; i < gc.rows(); ++i) {
                            (*gp)(i, i) += gc(i, 0);
                        }
                    }
                });
}

Var Graph::stop_gradient(Var a) {
    if (stop_mode_ == StopMode::replay) {
        check_runtime(stop_cache_ != nullptr && stop_cursor_ < stop_cache_->size(),
                      "stop_gradient: replay cache exhausted");
        return constant((*stop_cache_)[stop_cursor_++]);
    }
    if (stop_mode_ == StopMode::record && stop_cache_ != nullptr) {
        stop_cache_->push_back(a.value());
    }
    return constant(a.value());
}

void Graph::set_stop_cache(StopMode mode, std::vector<DenseMatrix>* cache) {
    stop_mode_ = mode;
    stop_cache_ = cache;
    stop_cursor_ = 0;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void Graph::backward(Var root) {
    check(record_, "backward: graph was built in values-only mode");
    const DenseMatrix& rv = value(root);
    check(rv.rows() == 1 && rv.cols() == 1,
          "backward: root must be scalar (1x1), got " + shape_str(rv));

    // Reachability from the root, restricted to nodes that require grad.
    for (Node& n : nodes_) {
        n.active = false;
    }
    nodes_[root.id].active = true;  // root always seeds, even if no leaf needs grad
    for (std::uint32_t id = root.id + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.active) {
            continue;
        }
        for (std::uint32_t p : n.parents) {
            if (nodes_[p].needs_grad) {
                nodes_[p].active = true;
            }
        }
    }

    for (std::uint32_t id = 0; id <= root.id; ++id) {
        Node& n = nodes_[id];
        if (n.active) {
            if (n.grad.same_shape(n.value)) {
                n.grad.zero();
            } else {
                n.grad = DenseMatrix(n.value.rows(), n.value.cols());
            }
        }
    }
    nodes_[root.id].grad(0, 0) = 1.0;

    // Reverse creation order is a valid topological order: each node is
    // visited exactly once, after everything that consumes it.
    for (std::uint32_t id = root.id + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (n.active && n.back) {
            n.back(*this, id);
        }
    }

    for (std::uint32_t id = 0; id <= root.id; ++id) {
        Node& n = nodes_[id];
        if (n.active && n.sink != nullptr) {
            check_runtime(n.sink->same_shape(n.grad), "backward: parameter sink shape mismatch");
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                n.sink->data()[i] += n.grad.data()[i];
            }
        }
    }
}

const DenseMatrix& Graph::grad(Var v) const {
    const Node& n = nodes_[v.id];
    return n.active ? n.grad : empty_;
}

}  // namespace af
