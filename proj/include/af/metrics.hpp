#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "af/backbone.hpp"
#include "af/matrix.hpp"

namespace af {

// Clustering accuracy after an optimal one-to-one relabeling of the
// predicted cluster ids. Old/New are computed under the same single
// permutation as All.
struct AccReport {
    double all = 0.0;
    double old_acc = 0.0;
    double new_acc = 0.0;
    std::vector<int> permutation;  // predicted cluster -> true class
    int n_all = 0;
    int n_old = 0;
    int n_new = 0;
};

// Exact O(K^3) max-weight assignment on a square weight matrix; returns the
// column assigned to each row.
std::vector<int> max_weight_assignment(const DenseMatrix& weight);

AccReport hungarian_accuracy(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                             int num_classes, const std::vector<int>& old_class_ids);

std::string acc_csv_header();
std::string acc_csv_row(const std::string& run_id, const AccReport& r, std::uint64_t seed,
                        const std::string& strategy, double tau);

// Boolean patch mask obtained by greedily keeping the highest-attention
// patches until the requested mass is covered.
struct MaskGrid {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> bits;  // row-major, 1 = retained
    double retained_mass = 0.0;
    double threshold = 0.0;

    bool at(int r, int c) const { return bits[static_cast<std::size_t>(r) * w + c] != 0; }
};

// cls_attention holds the CLS-row attention over the present patches;
// original_indices maps each entry to its grid position (pruned positions
// simply stay unset). threshold must be in (0, 1].
MaskGrid attention_mask(const std::vector<double>& cls_attention,
                        const std::vector<int>& original_indices, int grid_h, int grid_w,
                        double threshold);

MaskGrid mask_from_retained(const std::vector<int>& retained, int grid_h, int grid_w);

// PGM "P2": magic line, "W H", max value 1, one row of 0/1 per grid row.
std::string mask_to_pgm(const MaskGrid& m);
void write_pgm(const MaskGrid& m, const std::string& path);

// Analytic cost model for the ViT geometry. flops_per_mac is the counting
// convention constant; 1.0 matches the published 16.87G figure for
// ViT-B/16 at 224 pixels so it is the calibrated default.
struct CostModel {
    double flops_per_mac = 1.0;

    double estimate_flops(const VitConfig& cfg, int seq_len, bool with_af) const;

    struct ParamCounts {
        std::int64_t backbone = 0;
        std::int64_t time = 0;
        std::int64_t head = 0;
        std::int64_t total() const { return backbone + time + head; }
    };
    enum class Mode { train, test };
    // time_hidden_ratio is the refine-MLP width multiple; include_head adds
    // the projection MLP and prototypes.
    ParamCounts count_params(const VitConfig& cfg, Mode mode, bool with_af,
                             int time_hidden_ratio = 4, bool include_head = false) const;
};

}  // namespace af
