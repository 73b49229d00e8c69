#include "af/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace af {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

int ParamStore::add(const std::string& name, int rows, int cols, Init init, double scale) {
    check(find(name) < 0, "ParamStore::add: duplicate tensor name '" + name + "'");
    Tensor t;
    t.name = name;
    t.value = DenseMatrix(rows, cols);
    t.grad = DenseMatrix(rows, cols);
    RandomSource rng(derive_seed(seed_, "init", hash_str(name)));
    switch (init) {
        case Init::zeros:
            break;
        case Init::ones:
            t.value.fill(1.0);
            break;
        case Init::trunc_normal:
            for (std::size_t i = 0; i < t.value.size(); ++i) {
                t.value.data()[i] = rng.trunc_normal(scale);
            }
            break;
        case Init::normal_unit_rows:
            for (int r = 0; r < rows; ++r) {
                double norm2 = 0.0;
                for (int c = 0; c < cols; ++c) {
                    const double v = rng.gauss();
                    t.value(r, c) = v;
                    norm2 += v * v;
                }
                const double inv = 1.0 / std::sqrt(norm2);
                for (int c = 0; c < cols; ++c) {
                    t.value(r, c) *= inv;
                }
            }
            break;
    }
    tensors_.push_back(std::move(t));
    return static_cast<int>(tensors_.size()) - 1;
}

int ParamStore::find(const std::string& name) const {
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
        if (tensors_[i].name == name) {
            return static_cast<int>(i);
        }
    }
    return -1;
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const Tensor& t : tensors_) {
        n += t.value.size();
    }
    return n;
}

void ParamStore::zero_grads() {
    for (Tensor& t : tensors_) {
        t.grad.zero();
    }
}

bool ParamStore::sgd_step(double lr) {
    bool ok = true;
    for (Tensor& t : tensors_) {
        if (!t.trainable) {
            continue;
        }
        for (std::size_t i = 0; i < t.value.size(); ++i) {
            t.value.data()[i] -= lr * t.grad.data()[i];
            if (!std::isfinite(t.value.data()[i])) {
                ok = false;
            }
        }
    }
    return ok;
}

// ---------------------------------------------------------------------------
// checkpoint IO
// ---------------------------------------------------------------------------

namespace {

template <class T>
void write_pod(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

}  // namespace

void save_checkpoint(const ParamStore& store, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    check_runtime(out.good(), "save_checkpoint: cannot open '" + path + "'");
    out.write("AFCK", 4);
    write_pod<std::uint32_t>(out, kCheckpointVersion);
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(store.count()));
    for (const Tensor& t : store.tensors()) {
        write_pod<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
        out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rows()));
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.cols()));
        out.write(reinterpret_cast<const char*>(t.value.data()),
                  static_cast<std::streamsize>(t.value.size() * sizeof(double)));
    }
    check_runtime(out.good(), "save_checkpoint: write failed for '" + path + "'");
}

void load_checkpoint(ParamStore& store, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check_runtime(in.good(), "load_checkpoint: cannot open '" + path + "'");
    char magic[4] = {};
    in.read(magic, 4);
    check_runtime(std::memcmp(magic, "AFCK", 4) == 0,
                  "load_checkpoint: bad magic in '" + path + "'");
    const auto version = read_pod<std::uint32_t>(in);
    check_runtime(version == kCheckpointVersion,
                  "load_checkpoint: unsupported version " + std::to_string(version));
    const auto count = read_pod<std::uint32_t>(in);
    check_runtime(count == store.count(), "load_checkpoint: tensor count mismatch (file has " +
                                              std::to_string(count) + ", model has " +
                                              std::to_string(store.count()) + ")");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = read_pod<std::uint16_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto rows = read_pod<std::uint32_t>(in);
        const auto cols = read_pod<std::uint32_t>(in);
        const int id = store.find(name);
        check_runtime(id >= 0, "load_checkpoint: unknown tensor '" + name + "'");
        Tensor& t = store.at(id);
        check_runtime(t.value.rows() == static_cast<int>(rows) &&
                          t.value.cols() == static_cast<int>(cols),
                      "load_checkpoint: shape mismatch for '" + name + "' (file " +
                          std::to_string(rows) + "x" + std::to_string(cols) + ", model " +
                          shape_str(t.value) + ")");
        in.read(reinterpret_cast<char*>(t.value.data()),
                static_cast<std::streamsize>(t.value.size() * sizeof(double)));
    }
    check_runtime(in.good(), "load_checkpoint: truncated file '" + path + "'");
}

}  // namespace af
