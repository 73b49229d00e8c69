#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "af/synthdata.hpp"

using af::DenseMatrix;
using af::Image;
using af::PruneOutcome;
using af::RandomSource;
using af::SynthDataset;
using af::SynthSample;
using af::SynthSpec;

namespace {

SynthSpec small_spec() {
    SynthSpec s;
    s.num_classes = 4;
    s.num_known = 2;
    s.grid_patches = 16;
    s.object_patch_count = 4;
    s.samples_per_class = 30;
    s.seed = 77;
    return s;
}

// Ridge least-squares probe on mean-pooled background patches. Returns
// held-out accuracy. Solves (X^T X + lam I) W = X^T Y by Gaussian
// elimination; everything here is test-only oracle code.
double background_probe_accuracy(const SynthDataset& ds) {
    const SynthSpec& spec = ds.spec;
    const int dim = spec.patch_dim() + 1;  // mean background patch + bias
    const int k = spec.num_classes;
    const int gs = spec.grid_side();

    auto features = [&](const SynthSample& s) {
        std::vector<double> f(dim, 0.0);
        int count = 0;
        for (int p = 0; p < spec.grid_patches; ++p) {
            if (s.is_object_patch(p)) continue;
            const int r0 = (p / gs) * spec.patch_side;
            const int c0 = (p % gs) * spec.patch_side;
            int at = 0;
            for (int r = 0; r < spec.patch_side; ++r) {
                for (int c = 0; c < spec.patch_side; ++c) {
                    f[at++] += s.image.at(r0 + r, c0 + c);
                }
            }
            ++count;
        }
        for (int j = 0; j + 1 < dim; ++j) f[j] /= count;
        f[dim - 1] = 1.0;
        return f;
    };

    // Even/odd split into probe-train and probe-test.
    std::vector<int> train_idx, test_idx;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        (i % 2 == 0 ? train_idx : test_idx).push_back(static_cast<int>(i));
    }

    std::vector<std::vector<double>> xtx(dim, std::vector<double>(dim, 0.0));
    std::vector<std::vector<double>> xty(dim, std::vector<double>(k, 0.0));
    for (int i : train_idx) {
        const std::vector<double> f = features(ds.samples[i]);
        for (int a = 0; a < dim; ++a) {
            for (int b = 0; b < dim; ++b) {
                xtx[a][b] += f[a] * f[b];
            }
            xty[a][ds.samples[i].label] += f[a];
        }
    }
    for (int a = 0; a < dim; ++a) xtx[a][a] += 1e-3;

    // Gaussian elimination with partial pivoting, k right-hand sides.
    for (int col = 0; col < dim; ++col) {
        int piv = col;
        for (int r = col + 1; r < dim; ++r) {
            if (std::fabs(xtx[r][col]) > std::fabs(xtx[piv][col])) piv = r;
        }
        std::swap(xtx[col], xtx[piv]);
        std::swap(xty[col], xty[piv]);
        const double d = xtx[col][col];
        for (int r = 0; r < dim; ++r) {
            if (r == col) continue;
            const double factor = xtx[r][col] / d;
            for (int c2 = col; c2 < dim; ++c2) xtx[r][c2] -= factor * xtx[col][c2];
            for (int c2 = 0; c2 < k; ++c2) xty[r][c2] -= factor * xty[col][c2];
        }
    }
    std::vector<std::vector<double>> w(dim, std::vector<double>(k));
    for (int a = 0; a < dim; ++a) {
        for (int c2 = 0; c2 < k; ++c2) {
            w[a][c2] = xty[a][c2] / xtx[a][a];
        }
    }

    int hits = 0;
    for (int i : test_idx) {
        const std::vector<double> f = features(ds.samples[i]);
        int best = 0;
        double best_v = -1e30;
        for (int c2 = 0; c2 < k; ++c2) {
            double v = 0;
            for (int a = 0; a < dim; ++a) v += f[a] * w[a][c2];
            if (v > best_v) {
                best_v = v;
                best = c2;
            }
        }
        hits += best == ds.samples[i].label;
    }
    return static_cast<double>(hits) / test_idx.size();
}

}  // namespace

TEST_CASE("generation is a pure function of the spec") {
    SynthSpec spec = small_spec();
    SynthDataset a = af::generate(spec);
    SynthDataset b = af::generate(spec);
    REQUIRE(a.samples.size() == b.samples.size());
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        CHECK(a.samples[i].label == b.samples[i].label);
        CHECK(a.samples[i].scene == b.samples[i].scene);
        CHECK(a.samples[i].object_mask == b.samples[i].object_mask);
        REQUIRE(a.samples[i].image.pixels.size() == b.samples[i].image.pixels.size());
        for (std::size_t p = 0; p < a.samples[i].image.pixels.size(); ++p) {
            CHECK(a.samples[i].image.pixels[p] == b.samples[i].image.pixels[p]);
        }
    }
}

TEST_CASE("class balance and the 50/50 split protocol are exact") {
    SynthSpec spec = small_spec();
    SynthDataset ds = af::generate(spec);
    CHECK(static_cast<int>(ds.samples.size()) == spec.total_samples());

    std::vector<int> per_class(spec.num_classes, 0);
    std::vector<int> labeled_per_class(spec.num_classes, 0);
    for (const SynthSample& s : ds.samples) {
        ++per_class[s.label];
        labeled_per_class[s.label] += s.labeled;
        CHECK(s.is_old == (s.label < spec.num_known));
        CHECK(static_cast<int>(s.object_mask.size()) == spec.object_patch_count);
    }
    for (int k = 0; k < spec.num_classes; ++k) {
        CHECK(per_class[k] == spec.samples_per_class);
        // Half of each Old class is labeled; New classes are fully unlabeled.
        CHECK(labeled_per_class[k] == (k < spec.num_known ? spec.samples_per_class / 2 : 0));
    }
    CHECK(ds.old_class_ids() == std::vector<int>{0, 1});
    CHECK(static_cast<int>(ds.unlabeled_indices().size()) ==
          spec.total_samples() - spec.num_known * spec.samples_per_class / 2);
}

TEST_CASE("rho = 0 makes the scene independent of the class") {
    SynthSpec spec = small_spec();
    spec.background_correlation = 0.0;
    spec.samples_per_class = 300;
    SynthDataset ds = af::generate(spec);
    // The scene draw never reads the label at rho = 0: scene == label occurs
    // at the base rate 1/K.
    int match = 0;
    for (const SynthSample& s : ds.samples) {
        match += s.scene == s.label;
    }
    const double rate = static_cast<double>(match) / ds.samples.size();
    CHECK(rate > 0.25 - 0.08);
    CHECK(rate < 0.25 + 0.08);
}

TEST_CASE("rho = 1 with no object signal: background probe reaches 95%") {
    SynthSpec spec = small_spec();
    spec.background_correlation = 1.0;
    spec.object_amp = 0.0;  // object patches carry pure noise
    spec.samples_per_class = 100;
    SynthDataset ds = af::generate(spec);
    CHECK(background_probe_accuracy(ds) >= 0.95);
}

TEST_CASE("augment: zero jitters reproduce the original view of unlabeled samples") {
    SynthSpec spec = small_spec();
    spec.object_jitter = 0.0;
    spec.unlabeled_bg_jitter = 0.0;
    spec.labeled_bg_jitter = 1.0;
    SynthDataset ds = af::generate(spec);
    const SynthSample* unlabeled = nullptr;
    for (const SynthSample& s : ds.samples) {
        if (!s.labeled) {
            unlabeled = &s;
            break;
        }
    }
    REQUIRE(unlabeled != nullptr);
    RandomSource rng(5);
    Image view = af::augment(*unlabeled, 0, spec, rng);
    for (std::size_t i = 0; i < view.pixels.size(); ++i) {
        CHECK(view.pixels[i] == unlabeled->image.pixels[i]);
    }
}

TEST_CASE("labeled views vary more in the background than unlabeled views") {
    SynthSpec spec = small_spec();
    SynthDataset ds = af::generate(spec);
    const SynthSample* lab = nullptr;
    const SynthSample* unl = nullptr;
    for (const SynthSample& s : ds.samples) {
        if (s.labeled && lab == nullptr) lab = &s;
        if (!s.labeled && unl == nullptr) unl = &s;
    }
    REQUIRE(lab != nullptr);
    REQUIRE(unl != nullptr);

    auto bg_l2 = [&](const SynthSample& s, const Image& a, const Image& b) {
        const int gs = spec.grid_side();
        double acc = 0;
        for (int p = 0; p < spec.grid_patches; ++p) {
            if (s.is_object_patch(p)) continue;
            const int r0 = (p / gs) * spec.patch_side;
            const int c0 = (p % gs) * spec.patch_side;
            for (int r = 0; r < spec.patch_side; ++r) {
                for (int c = 0; c < spec.patch_side; ++c) {
                    const double d = a.at(r0 + r, c0 + c) - b.at(r0 + r, c0 + c);
                    acc += d * d;
                }
            }
        }
        return acc;
    };
    auto obj_l2 = [&](const SynthSample& s, const Image& a, const Image& b) {
        const int gs = spec.grid_side();
        double acc = 0;
        for (int p : s.object_mask) {
            const int r0 = (p / gs) * spec.patch_side;
            const int c0 = (p % gs) * spec.patch_side;
            for (int r = 0; r < spec.patch_side; ++r) {
                for (int c = 0; c < spec.patch_side; ++c) {
                    const double d = a.at(r0 + r, c0 + c) - b.at(r0 + r, c0 + c);
                    acc += d * d;
                }
            }
        }
        return acc;
    };

    double lab_bg = 0, unl_bg = 0, lab_obj = 0;
    for (int draw = 0; draw < 100; ++draw) {
        RandomSource r1(1000 + draw), r2(5000 + draw), r3(9000 + draw), r4(13000 + draw);
        Image lv1 = af::augment(*lab, 0, spec, r1);
        Image lv2 = af::augment(*lab, 1, spec, r2);
        Image uv1 = af::augment(*unl, 0, spec, r3);
        Image uv2 = af::augment(*unl, 1, spec, r4);
        lab_bg += bg_l2(*lab, lv1, lv2);
        unl_bg += bg_l2(*unl, uv1, uv2);
        lab_obj += obj_l2(*lab, lv1, lv2);
    }
    CHECK(lab_bg > unl_bg);       // the hypothesis the generator encodes
    CHECK(lab_obj < lab_bg);      // object patches move less than background
}

TEST_CASE("pruning precision: background-only, vacuous, and Monte Carlo base rate") {
    std::vector<int> object_mask = {1, 5, 9, 13};

    PruneOutcome bg_only;
    bg_only.pruned = {0, 2, 3};
    CHECK(af::pruning_precision(bg_only, object_mask) == 1.0);

    PruneOutcome nothing;
    CHECK(af::pruning_precision(nothing, object_mask) == 1.0);

    PruneOutcome mixed;
    mixed.pruned = {0, 1, 2};  // one object patch of three
    CHECK(af::pruning_precision(mixed, object_mask) == doctest::Approx(2.0 / 3).epsilon(1e-15));

    // Random pruning of half the tokens approaches the background fraction.
    RandomSource rng(11);
    double acc = 0;
    const int trials = 1000;
    for (int t = 0; t < trials; ++t) {
        std::vector<int> all(16);
        for (int i = 0; i < 16; ++i) all[i] = i;
        rng.shuffle(all);
        PruneOutcome o;
        o.pruned.assign(all.begin(), all.begin() + 8);
        acc += af::pruning_precision(o, object_mask);
    }
    acc /= trials;
    CHECK(acc > 0.75 - 0.03);  // background fraction is 12/16
    CHECK(acc < 0.75 + 0.03);
}

TEST_CASE("dataset dump + sidecar round-trips and regenerates identically") {
    SynthSpec spec = small_spec();
    spec.samples_per_class = 6;
    SynthDataset ds = af::generate(spec);
    const auto dir = std::filesystem::temp_directory_path();
    const std::string bin = (dir / "af_ds_test.bin").string();
    const std::string side = (dir / "af_ds_test.spec.json").string();
    af::save_dataset(ds, bin, side);

    SynthDataset back = af::load_dataset(bin, side);
    REQUIRE(back.samples.size() == ds.samples.size());
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        CHECK(back.samples[i].label == ds.samples[i].label);
        CHECK(back.samples[i].labeled == ds.samples[i].labeled);
        CHECK(back.samples[i].object_mask == ds.samples[i].object_mask);
        for (std::size_t p = 0; p < ds.samples[i].image.pixels.size(); ++p) {
            CHECK(back.samples[i].image.pixels[p] == ds.samples[i].image.pixels[p]);
        }
    }

    // The sidecar alone regenerates the dataset bit-for-bit.
    SynthDataset regen = af::generate(back.spec);
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        for (std::size_t p = 0; p < ds.samples[i].image.pixels.size(); ++p) {
            CHECK(regen.samples[i].image.pixels[p] == ds.samples[i].image.pixels[p]);
        }
    }
    std::filesystem::remove(bin);
    std::filesystem::remove(side);
}

TEST_CASE("spec validation rejects inconsistent settings") {
    SynthSpec bad = small_spec();
    bad.num_known = 4;  // must be < num_classes
    CHECK_THROWS_AS(af::generate(bad), std::invalid_argument);

    bad = small_spec();
    bad.grid_patches = 15;  // not a perfect square
    CHECK_THROWS_AS(af::generate(bad), std::invalid_argument);

    bad = small_spec();
    bad.unlabeled_bg_jitter = bad.labeled_bg_jitter;  // hypothesis ordering violated
    CHECK_THROWS_AS(af::generate(bad), std::invalid_argument);

    bad = small_spec();
    bad.object_patch_count = 16;
    CHECK_THROWS_AS(af::generate(bad), std::invalid_argument);
}
