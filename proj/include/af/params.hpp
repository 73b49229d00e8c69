#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "af/graph.hpp"
#include "af/matrix.hpp"
#include "af/random.hpp"

namespace af {

struct Tensor {
    std::string name;
    DenseMatrix value;
    DenseMatrix grad;
    bool trainable = true;
};

// Owns every learnable tensor of a model, in registration order. Tensor ids
// are stable and remain valid across store copies, which is what the
// finite-difference harness relies on (it perturbs thread-local copies).
//
// Each tensor is initialized from its own RNG stream derived from
// (seed, name), so adding or removing one module never changes the draws
// any other tensor sees.
class ParamStore {
public:
    enum class Init { zeros, ones, trunc_normal, normal_unit_rows };

    ParamStore() = default;
    explicit ParamStore(std::uint64_t seed) : seed_(seed) {}

    int add(const std::string& name, int rows, int cols, Init init, double scale = 0.0);

    Tensor& at(int id) { return tensors_[id]; }
    const Tensor& at(int id) const { return tensors_[id]; }
    int find(const std::string& name) const;  // -1 when absent

    std::size_t count() const { return tensors_.size(); }
    std::vector<Tensor>& tensors() { return tensors_; }
    const std::vector<Tensor>& tensors() const { return tensors_; }

    std::size_t scalar_count() const;

    void zero_grads();
    // value -= lr * grad for trainable tensors; returns false if any update
    // produced a non-finite value.
    bool sgd_step(double lr);

private:
    std::uint64_t seed_ = 0;
    std::vector<Tensor> tensors_;
};

// Binds a stored tensor into a graph: the leaf carries the tensor's current
// value and backward() accumulates into its grad buffer.
inline Var use_param(Graph& g, ParamStore& store, int id) {
    Tensor& t = store.at(id);
    return g.param(t.value, &t.grad);
}

// Flat binary checkpoint. Layout, all little-endian:
//   magic "AFCK", version u32, tensor count u32, then per tensor:
//   name length u16, name bytes, rows u32, cols u32, f64 values.
void save_checkpoint(const ParamStore& store, const std::string& path);
// Loads into an existing store; every tensor must match by name and shape.
void load_checkpoint(ParamStore& store, const std::string& path);

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace af
