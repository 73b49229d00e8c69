#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "af/matrix.hpp"

namespace af {

class Graph;

// Handle to a node owned by a Graph. Cheap to copy; valid for the graph's
// lifetime.
struct Var {
    Graph* g = nullptr;
    std::uint32_t id = 0;

    const DenseMatrix& value() const;
    int rows() const;
    int cols() const;
    double scalar() const;  // value()(0,0); contract-checked to be 1x1
};

// Tape-style reverse-mode autodiff over DenseMatrix values. Nodes are stored
// in creation order, which is a topological order, so backward() is a single
// reverse sweep that visits each reachable node exactly once. Values are
// immutable once created; a graph instance is single-threaded by contract.
class Graph {
public:
    // record=false builds values only (no parents, no backward closures);
    // used by finite-difference harnesses and evaluation loops.
    explicit Graph(bool record = true) : record_(record) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // ---- leaves ----
    Var constant(DenseMatrix v);
    Var leaf(DenseMatrix v);  // input that wants a gradient
    // Leaf whose gradient is additionally accumulated into *grad_sink by
    // backward(); the binding used for model parameters.
    Var param(const DenseMatrix& value, DenseMatrix* grad_sink);

    // ---- elementwise / shape ----
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var hadamard(Var a, Var b);
    Var hadamard_div(Var a, Var b);
    Var scale(Var a, double k);
    Var add_scalar(Var a, double k);
    Var exp(Var a);
    Var log(Var a);
    Var sqrt(Var a);
    Var gelu(Var a);

    // ---- linear algebra ----
    Var matmul(Var a, Var b);
    Var transpose(Var a);

    // ---- rows/cols reductions and broadcasts ----
    Var rows_sum(Var a);                 // n x m -> n x 1
    Var cols_sum(Var a);                 // n x m -> 1 x m
    Var broadcast_col(Var a, int cols);  // n x 1 -> n x cols
    Var broadcast_row(Var a, int rows);  // 1 x m -> rows x m
    Var sum_all(Var a);                  // -> 1 x 1
    Var mean_all(Var a);                 // -> 1 x 1

    // ---- structured ----
    Var softmax_rows(Var a);
    Var logsumexp_rows(Var a);  // n x m -> n x 1, max-subtracted
    Var layernorm(Var x, Var gain, Var bias, double eps);
    Var gather_rows(Var a, std::vector<int> idx);
    Var gather_cols(Var a, std::vector<int> idx);
    Var concat_rows(std::span<const Var> parts);
    Var concat_cols(std::span<const Var> parts);
    Var diag(Var a);  // n x n -> n x 1

    // Forward identity whose backward propagates exactly zero upstream: the
    // output node has no parents and never requires a gradient.
    Var stop_gradient(Var a);

    // ---- execution ----
    // root must be 1x1. Seeds d(root)/d(root) = 1, sweeps the tape in
    // reverse creation order, and flushes parameter gradients into their
    // bound sinks. May be called repeatedly (per-node grads reset each call).
    void backward(Var root);

    const DenseMatrix& value(Var v) const { return nodes_[v.id].value; }
    // Gradient of the last backward() root w.r.t. v. Zero-shaped if v was
    // not reached.
    const DenseMatrix& grad(Var v) const;

    std::size_t size() const { return nodes_.size(); }
    bool recording() const { return record_; }

    // Stop-gradient value cache. In Record mode every stop_gradient()
    // output is appended to *cache; in Replay mode the i-th stop_gradient()
    // call returns cache[i] instead of its input. Replay holds the stopped
    // branches constant, which is what a finite-difference probe of a loss
    // with stop-gradient semantics has to do to match the analytic gradient.
    enum class StopMode { off, record, replay };
    void set_stop_cache(StopMode mode, std::vector<DenseMatrix>* cache);

private:
    friend struct Var;

    struct Node {
        DenseMatrix value;
        DenseMatrix grad;
        std::vector<std::uint32_t> parents;
        std::function<void(Graph&, std::uint32_t)> back;
        DenseMatrix* sink = nullptr;
        bool needs_grad = false;
        bool active = false;  // scratch used by backward()
    };

    Var push(DenseMatrix value, std::vector<std::uint32_t> parents, bool needs_grad,
             std::function<void(Graph&, std::uint32_t)> back);
    bool any_needs_grad(std::span<const Var> vs) const;

    Node& node(std::uint32_t id) { return nodes_[id]; }
    const Node& node(std::uint32_t id) const { return nodes_[id]; }
    // Accumulation target for a parent's gradient, or nullptr when the
    // parent does not participate in the current backward pass.
    DenseMatrix* grad_target(std::uint32_t id);

    std::vector<Node> nodes_;
    bool record_ = true;
    StopMode stop_mode_ = StopMode::off;
    std::vector<DenseMatrix>* stop_cache_ = nullptr;
    std::size_t stop_cursor_ = 0;
    DenseMatrix empty_;
};

}  // namespace af
