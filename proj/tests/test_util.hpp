#pragma once

#include <cmath>
#include <functional>

#include "af/graph.hpp"
#include "af/params.hpp"
#include "af/random.hpp"

namespace aft {

using BuildFn = std::function<af::Var(af::Graph&, af::ParamStore&)>;

inline double eval_loss(const BuildFn& f, af::ParamStore& store) {
    af::Graph g(/*record=*/false);
    return f(g, store).value()(0, 0);
}

// Central finite differences over every entry of one tensor. Works on a
// private copy of the store so the caller's parameters stay put.
inline af::DenseMatrix fd_grad(const BuildFn& f, const af::ParamStore& store, int id,
                               double step = 1e-5) {
    af::ParamStore s = store;
    af::DenseMatrix g(s.at(id).value.rows(), s.at(id).value.cols());
    for (std::size_t i = 0; i < g.size(); ++i) {
        double& x = s.at(id).value.data()[i];
        const double orig = x;
        x = orig + step;
        const double up = eval_loss(f, s);
        x = orig - step;
        const double down = eval_loss(f, s);
        x = orig;
        g.data()[i] = (up - down) / (2.0 * step);
    }
    return g;
}

inline af::DenseMatrix analytic_grad(const BuildFn& f, af::ParamStore& store, int id) {
    store.zero_grads();
    af::Graph g;
    af::Var root = f(g, store);
    g.backward(root);
    return store.at(id).grad;
}

inline double rel_err(double a, double b, double floor = 1e-6) {
    const double denom = std::max({std::fabs(a), std::fabs(b), floor});
    return std::fabs(a - b) / denom;
}

inline double max_rel_err(const af::DenseMatrix& a, const af::DenseMatrix& b,
                          double floor = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, rel_err(a.data()[i], b.data()[i], floor));
    }
    return worst;
}

inline af::DenseMatrix random_matrix(int rows, int cols, af::RandomSource& rng,
                                     double scale = 1.0) {
    af::DenseMatrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) {
        m.data()[i] = scale * rng.gauss();
    }
    return m;
}

// Checks analytic-vs-FD agreement for one tensor under the given loss.
inline double grad_check(const BuildFn& f, af::ParamStore& store, int id, double step = 1e-5) {
    const af::DenseMatrix ana = analytic_grad(f, store, id);
    const af::DenseMatrix fd = fd_grad(f, store, id, step);
    return max_rel_err(ana, fd);
}

}  // namespace aft
