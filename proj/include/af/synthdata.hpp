#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "af/backbone.hpp"
#include "af/random.hpp"
#include "af/tap.hpp"

namespace af {

// Generator for the "distracted attention" benchmark: every image is a
// patch-aligned grid where a few object patches carry the class signal and
// the rest carry a background scene correlated with the class at strength
// rho. Augmentation jitters backgrounds hard for labeled samples and barely
// for unlabeled ones, which is exactly the shortcut the pruning mechanism
// is supposed to remove.
struct SynthSpec {
    int num_classes = 8;        // K
    int num_known = 4;          // |Y_l|
    int grid_patches = 16;      // N, must be a perfect square
    int object_patch_count = 4;
    int samples_per_class = 100;
    double labeled_fraction = 0.5;  // of each Old class
    double background_correlation = 0.9;  // rho

    // Augmentation strengths. The strict ordering unlabeled < labeled is the
    // hypothesis this generator operationalizes.
    double labeled_bg_jitter = 1.0;
    double unlabeled_bg_jitter = 0.05;
    double object_jitter = 0.05;

    // Signal amplitudes and generation noise. Every background patch of a
    // sample shares one per-sample clutter vector drawn from a fixed
    // low-dimensional subspace; clutter is the stable instance signature an
    // unsupervised matching shortcut latches onto, while a supervised probe
    // can project the subspace out.
    double object_amp = 1.0;
    double background_amp = 1.2;
    double clutter_amp = 8.0;
    int clutter_dim = 8;
    double object_noise = 0.1;
    double background_noise = 0.1;

    int patch_side = 8;
    int channels = 1;
    std::uint64_t seed = 1234;

    int grid_side() const;
    int image_side() const { return grid_side() * patch_side; }
    int patch_dim() const { return patch_side * patch_side * channels; }
    int total_samples() const { return num_classes * samples_per_class; }

    void validate() const;
};

nlohmann::json synth_spec_to_json(const SynthSpec& s);
SynthSpec synth_spec_from_json(const nlohmann::json& j, const std::string& path);

struct SynthSample {
    Image image;
    int label = 0;
    bool labeled = false;
    bool is_old = false;
    std::vector<int> object_mask;  // ascending grid indices, exactly object_patch_count
    int scene = 0;                 // background scene index actually drawn

    bool is_object_patch(int grid_index) const;
};

struct SynthDataset {
    SynthSpec spec;
    std::vector<SynthSample> samples;

    std::vector<int> old_class_ids() const;
    std::vector<int> unlabeled_indices() const;
};

// Pure function of the spec: identical specs give bitwise-identical datasets.
// Each sample draws from its own (seed, index)-derived stream, so per-sample
// generation order never matters.
SynthDataset generate(const SynthSpec& spec);

// One augmented view. Object patches get small noise; background patches get
// labeled_bg_jitter or unlabeled_bg_jitter depending on the sample.
Image augment(const SynthSample& sample, int view_index, const SynthSpec& spec,
              RandomSource& rng);

// Fraction of pruned tokens that are background under the ground truth.
// Pruning nothing counts as 1.0.
double pruning_precision(const PruneOutcome& outcome, const std::vector<int>& object_mask);

// Flat binary dump plus JSON sidecar carrying the spec; the sidecar alone is
// enough to regenerate the dataset bit-for-bit.
void save_dataset(const SynthDataset& ds, const std::string& bin_path,
                  const std::string& sidecar_path);
SynthDataset load_dataset(const std::string& bin_path, const std::string& sidecar_path);

}  // namespace af
