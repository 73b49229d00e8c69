#include "af/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "af/jsonutil.hpp"

namespace af {

int SynthSpec::grid_side() const {
    const int gs = static_cast<int>(std::lround(std::sqrt(static_cast<double>(grid_patches))));
    return gs;
}

void SynthSpec::validate() const {
    check(num_known >= 1 && num_known < num_classes,
          "SynthSpec: need 1 <= known classes < total classes");
    const int gs = grid_side();
    check(gs * gs == grid_patches, "SynthSpec: grid_patches " + std::to_string(grid_patches) +
                                       " is not a perfect square");
    check(object_patch_count >= 1 && object_patch_count < grid_patches,
          "SynthSpec: object_patch_count must be in [1, N)");
    check(samples_per_class >= 2, "SynthSpec: need at least 2 samples per class");
    check(labeled_fraction > 0.0 && labeled_fraction <= 1.0,
          "SynthSpec: labeled_fraction must be in (0,1]");
    check(background_correlation >= 0.0 && background_correlation <= 1.0,
          "SynthSpec: background_correlation must be in [0,1]");
    check(unlabeled_bg_jitter < labeled_bg_jitter,
          "SynthSpec: unlabeled_bg_jitter must be strictly below labeled_bg_jitter");
    check(patch_side >= 1 && channels >= 1, "SynthSpec: bad patch geometry");
    check(clutter_dim >= 1 && clutter_dim <= patch_dim(),
          "SynthSpec: clutter_dim must be in [1, patch_dim]");
}

nlohmann::json synth_spec_to_json(const SynthSpec& s) {
    nlohmann::json j;
    j["num_classes"] = s.num_classes;
    j["num_known"] = s.num_known;
    j["grid_patches"] = s.grid_patches;
    j["object_patch_count"] = s.object_patch_count;
    j["samples_per_class"] = s.samples_per_class;
    j["labeled_fraction"] = s.labeled_fraction;
    j["background_correlation"] = s.background_correlation;
    j["labeled_bg_jitter"] = s.labeled_bg_jitter;
    j["unlabeled_bg_jitter"] = s.unlabeled_bg_jitter;
    j["object_jitter"] = s.object_jitter;
    j["object_amp"] = s.object_amp;
    j["background_amp"] = s.background_amp;
    j["clutter_amp"] = s.clutter_amp;
    j["clutter_dim"] = s.clutter_dim;
    j["object_noise"] = s.object_noise;
    j["background_noise"] = s.background_noise;
    j["patch_side"] = s.patch_side;
    j["channels"] = s.channels;
    j["seed"] = s.seed;
    return j;
}

SynthSpec synth_spec_from_json(const nlohmann::json& j, const std::string& path) {
    SynthSpec s;
    StrictJson sj(j, path);
    sj.get("num_classes", s.num_classes);
    sj.get("num_known", s.num_known);
    sj.get("grid_patches", s.grid_patches);
    sj.get("object_patch_count", s.object_patch_count);
    sj.get("samples_per_class", s.samples_per_class);
    sj.get("labeled_fraction", s.labeled_fraction);
    sj.get("background_correlation", s.background_correlation);
    sj.get("labeled_bg_jitter", s.labeled_bg_jitter);
    sj.get("unlabeled_bg_jitter", s.unlabeled_bg_jitter);
    sj.get("object_jitter", s.object_jitter);
    sj.get("object_amp", s.object_amp);
    sj.get("background_amp", s.background_amp);
    sj.get("clutter_amp", s.clutter_amp);
    sj.get("clutter_dim", s.clutter_dim);
    sj.get("object_noise", s.object_noise);
    sj.get("background_noise", s.background_noise);
    sj.get("patch_side", s.patch_side);
    sj.get("channels", s.channels);
    sj.get("seed", s.seed);
    sj.finish();
    return s;
}

bool SynthSample::is_object_patch(int grid_index) const {
    return std::binary_search(object_mask.begin(), object_mask.end(), grid_index);
}

std::vector<int> SynthDataset::old_class_ids() const {
    std::vector<int> ids(spec.num_known);
    std::iota(ids.begin(), ids.end(), 0);
    return ids;
}

std::vector<int> SynthDataset::unlabeled_indices() const {
    std::vector<int> idx;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!samples[i].labeled) {
            idx.push_back(static_cast<int>(i));
        }
    }
    return idx;
}

namespace {

std::vector<std::vector<double>> draw_templates(const SynthSpec& spec, const char* stream) {
    std::vector<std::vector<double>> tpl(spec.num_classes);
    for (int k = 0; k < spec.num_classes; ++k) {
        RandomSource rng(derive_seed(spec.seed, stream, static_cast<std::uint64_t>(k)));
        std::vector<double>& t = tpl[k];
        t.resize(spec.patch_dim());
        double norm2 = 0.0;
        for (double& v : t) {
            v = rng.gauss();
            norm2 += v * v;
        }
        const double inv = 1.0 / std::sqrt(norm2);
        for (double& v : t) {
            v *= inv;
        }
    }
    return tpl;
}

void fill_patch(Image& img, int grid_index, int grid_side, int patch_side,
                const std::vector<double>& tpl, double amp, double noise, RandomSource& rng) {
    const int r0 = (grid_index / grid_side) * patch_side;
    const int c0 = (grid_index % grid_side) * patch_side;
    int at = 0;
    for (int r = 0; r < patch_side; ++r) {
        for (int c = 0; c < patch_side; ++c) {
            for (int ch = 0; ch < img.channels; ++ch) {
                img.at(r0 + r, c0 + c, ch) = amp * tpl[at++] + noise * rng.gauss();
            }
        }
    }
}

}  // namespace

SynthDataset generate(const SynthSpec& spec) {
    spec.validate();
    SynthDataset ds;
    ds.spec = spec;

    const auto object_tpl = draw_templates(spec, "object_template");
    const auto scene_tpl = draw_templates(spec, "scene_template");

    // Fixed clutter basis for the whole dataset.
    std::vector<std::vector<double>> clutter_basis(spec.clutter_dim);
    for (int j = 0; j < spec.clutter_dim; ++j) {
        RandomSource rng(derive_seed(spec.seed, "clutter_basis", static_cast<std::uint64_t>(j)));
        std::vector<double>& b = clutter_basis[j];
        b.resize(spec.patch_dim());
        double n2 = 0.0;
        for (double& v : b) {
            v = rng.gauss();
            n2 += v * v;
        }
        const double inv = 1.0 / std::sqrt(n2);
        for (double& v : b) {
            v *= inv;
        }
    }

    const int gs = spec.grid_side();
    const int n = spec.grid_patches;
    const int labeled_per_class =
        static_cast<int>(std::lround(spec.labeled_fraction * spec.samples_per_class));

    ds.samples.reserve(spec.total_samples());
    for (int k = 0; k < spec.num_classes; ++k) {
        const bool old_class = k < spec.num_known;
        for (int i = 0; i < spec.samples_per_class; ++i) {
            const std::uint64_t gidx =
                static_cast<std::uint64_t>(k) * spec.samples_per_class + i;
            RandomSource rng(derive_seed(spec.seed, "sample", gidx));

            SynthSample s;
            s.label = k;
            s.is_old = old_class;
            s.labeled = old_class && i < labeled_per_class;

            std::vector<int> positions(n);
            std::iota(positions.begin(), positions.end(), 0);
            rng.shuffle(positions);
            s.object_mask.assign(positions.begin(), positions.begin() + spec.object_patch_count);
            std::sort(s.object_mask.begin(), s.object_mask.end());

            // With probability rho the scene matches the class, otherwise it
            // is uniform over all scenes, so rho = 0 carries zero class
            // information by construction.
            s.scene = (rng.uniform01() < spec.background_correlation)
                          ? k
                          : rng.uniform_int(spec.num_classes);

            // Per-sample clutter: a random point of the fixed subspace,
            // shared by all background patches of this sample.
            std::vector<double> coeff(spec.clutter_dim);
            double cn2 = 0.0;
            for (double& v : coeff) {
                v = rng.gauss();
                cn2 += v * v;
            }
            const double cinv = spec.clutter_amp / std::sqrt(cn2);
            std::vector<double> clutter(spec.patch_dim(), 0.0);
            for (int j = 0; j < spec.clutter_dim; ++j) {
                const double a = coeff[j] * cinv;
                for (int d = 0; d < spec.patch_dim(); ++d) {
                    clutter[d] += a * clutter_basis[j][d];
                }
            }

            s.image.side = spec.image_side();
            s.image.channels = spec.channels;
            s.image.pixels.assign(
                static_cast<std::size_t>(s.image.side) * s.image.side * spec.channels, 0.0);
            for (int p = 0; p < n; ++p) {
                if (s.is_object_patch(p)) {
                    fill_patch(s.image, p, gs, spec.patch_side, object_tpl[k], spec.object_amp,
                               spec.object_noise, rng);
                } else {
                    fill_patch(s.image, p, gs, spec.patch_side, scene_tpl[s.scene],
                               spec.background_amp, spec.background_noise, rng);
                    const int r0 = (p / gs) * spec.patch_side;
                    const int c0 = (p % gs) * spec.patch_side;
                    int at = 0;
                    for (int r = 0; r < spec.patch_side; ++r) {
                        for (int c = 0; c < spec.patch_side; ++c) {
                            for (int ch = 0; ch < spec.channels; ++ch) {
                                s.image.at(r0 + r, c0 + c, ch) += clutter[at++];
                            }
                        }
                    }
                }
            }
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

Image augment(const SynthSample& sample, int view_index, const SynthSpec& spec,
              RandomSource& rng) {
    (void)view_index;  // the caller derives a per-view stream
    Image img = sample.image;
    const int gs = spec.grid_side();
    const int ps = spec.patch_side;
    for (int p = 0; p < spec.grid_patches; ++p) {
        const double jitter = sample.is_object_patch(p)
                                  ? spec.object_jitter
                                  : (sample.labeled ? spec.labeled_bg_jitter
                                                    : spec.unlabeled_bg_jitter);
        const int r0 = (p / gs) * ps;
        const int c0 = (p % gs) * ps;
        for (int r = 0; r < ps; ++r) {
            for (int c = 0; c < ps; ++c) {
                for (int ch = 0; ch < img.channels; ++ch) {
                    img.at(r0 + r, c0 + c, ch) += jitter * rng.gauss();
                }
            }
        }
    }
    return img;
}

double pruning_precision(const PruneOutcome& outcome, const std::vector<int>& object_mask) {
    if (outcome.pruned.empty()) {
        return 1.0;  // vacuous: nothing pruned means nothing pruned wrongly
    }
    int background = 0;
    for (int idx : outcome.pruned) {
        if (!std::binary_search(object_mask.begin(), object_mask.end(), idx)) {
            ++background;
        }
    }
    return static_cast<double>(background) / static_cast<double>(outcome.pruned.size());
}

// ---------------------------------------------------------------------------
// binary dump + sidecar
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

constexpr std::uint32_t kDatasetVersion = 1;

}  // namespace

void save_dataset(const SynthDataset& ds, const std::string& bin_path,
                  const std::string& sidecar_path) {
    {
        std::ofstream side(sidecar_path);
        check_runtime(side.good(), "save_dataset: cannot open '" + sidecar_path + "'");
        side << synth_spec_to_json(ds.spec).dump(2) << "\n";
    }
    std::ofstream out(bin_path, std::ios::binary);
    check_runtime(out.good(), "save_dataset: cannot open '" + bin_path + "'");
    out.write("AFDS", 4);
    write_pod<std::uint32_t>(out, kDatasetVersion);
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(ds.samples.size()));
    for (const SynthSample& s : ds.samples) {
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.label));
        write_pod<std::uint8_t>(out, s.labeled ? 1 : 0);
        write_pod<std::uint8_t>(out, s.is_old ? 1 : 0);
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.scene));
        write_pod<std::uint16_t>(out, static_cast<std::uint16_t>(s.object_mask.size()));
        for (int idx : s.object_mask) {
            write_pod<std::uint16_t>(out, static_cast<std::uint16_t>(idx));
        }
        write_pod<std::uint16_t>(out, static_cast<std::uint16_t>(s.image.side));
        write_pod<std::uint16_t>(out, static_cast<std::uint16_t>(s.image.channels));
        out.write(reinterpret_cast<const char*>(s.image.pixels.data()),
                  static_cast<std::streamsize>(s.image.pixels.size() * sizeof(double)));
    }
    check_runtime(out.good(), "save_dataset: write failed for '" + bin_path + "'");
}

SynthDataset load_dataset(const std::string& bin_path, const std::string& sidecar_path) {
    SynthDataset ds;
    {
        std::ifstream side(sidecar_path);
        check_runtime(side.good(), "load_dataset: cannot open '" + sidecar_path + "'");
        nlohmann::json j;
        side >> j;
        ds.spec = synth_spec_from_json(j, "sidecar");
    }
    std::ifstream in(bin_path, std::ios::binary);
    check_runtime(in.good(), "load_dataset: cannot open '" + bin_path + "'");
    char magic[4] = {};
    in.read(magic, 4);
    check_runtime(std::string(magic, 4) == "AFDS", "load_dataset: bad magic");
    const auto version = read_pod<std::uint32_t>(in);
    check_runtime(version == kDatasetVersion, "load_dataset: unsupported version");
    const auto count = read_pod<std::uint32_t>(in);
    ds.samples.resize(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        SynthSample& s = ds.samples[i];
        s.label = static_cast<int>(read_pod<std::uint32_t>(in));
        s.labeled = read_pod<std::uint8_t>(in) != 0;
        s.is_old = read_pod<std::uint8_t>(in) != 0;
        s.scene = static_cast<int>(read_pod<std::uint32_t>(in));
        const auto mask_count = read_pod<std::uint16_t>(in);
        s.object_mask.resize(mask_count);
        for (auto& idx : s.object_mask) {
            idx = read_pod<std::uint16_t>(in);
        }
        s.image.side = read_pod<std::uint16_t>(in);
        s.image.channels = read_pod<std::uint16_t>(in);
        s.image.pixels.resize(static_cast<std::size_t>(s.image.side) * s.image.side *
                              s.image.channels);
        in.read(reinterpret_cast<char*>(s.image.pixels.data()),
                static_cast<std::streamsize>(s.image.pixels.size() * sizeof(double)));
    }
    check_runtime(in.good(), "load_dataset: truncated file '" + bin_path + "'");
    return ds;
}

}  // namespace af
