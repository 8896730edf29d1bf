#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "minmax/network.hpp"

namespace mm {

// Min-norm subgradient of max / supergradient of min: uniform weight on the
// active set (exact equality), zero elsewhere.
VectorXd grad_max(const VectorXd& x);
VectorXd grad_min(const VectorXd& x);

enum class LossKind { cross_entropy, mse };

struct Target {
    std::vector<int> classes;        // cross-entropy: one class id per step
    MatrixXd values;                 // mse: d_out x T
    std::vector<std::uint8_t> mask;  // empty means every step
};

struct TapeCounts {
    std::uint64_t u = 0, R = 0, s = 0, z = 0, x = 0, y = 0, loss = 1;
    std::uint64_t total() const { return u + R + s + z + x + y + loss; }
};

// Reverse-mode record of one sequence. Node values live in the forward trace;
// min/max active sets are recomputed from those values by exact equality.
struct Tape {
    const CascadeWeights* w = nullptr;
    CascadeTrace trace;
    LossKind kind = LossKind::cross_entropy;
    Target target;
    double scale = 1.0;  // loss = scale * sum over masked steps
    double loss = 0.0;
    MatrixXd dY;         // d loss / d output, filled at build time
    std::uint64_t masked = 0;

    TapeCounts counts() const;
};

// scale <= 0 selects the mean over masked steps
Tape build_loss_tape(const CascadeWeights& w, const MatrixXd& U, const Target& target, LossKind kind,
                     double scale = -1.0);

// loss of an already evaluated output; fills dY when non-null
double loss_value(const MatrixXd& Y, const Target& target, LossKind kind, double scale, MatrixXd* dY = nullptr,
                  std::uint64_t* masked = nullptr);

struct GradResult {
    CascadeWeights grad;       // same layout as the weights
    MatrixXd dU;               // d / d input
    double grad_norm = 0.0;    // max |component|
    std::uint64_t tie_count = 0;
    std::uint64_t minmax_nodes = 0;
    VectorXd flat() const { return flatten(grad); }
};

GradResult backward(const Tape& tape);

// Derivative of one state component x_t (t in 1..T) instead of the loss.
struct StateSeed {
    int layer = 0, unit = 0, comp = 0;
    Eigen::Index t = 1;
};
GradResult backward_from_state(const Tape& tape, const StateSeed& seed);

// Active-set signature of every min/max node, for detecting tie crossings.
std::vector<std::uint32_t> active_signature(const CascadeTrace& trace);

struct FDEntry {
    std::uint64_t index = 0;
    std::string name;
    double fd = 0, bw = 0, rel = 0;
};

struct FDReport {
    double max_rel_error = 0.0;
    std::vector<FDEntry> checked;
    std::vector<std::uint64_t> tie_excluded;
    std::uint64_t below_floor = 0;  // both values under the magnitude floor
    std::string to_text() const;
};

FDReport finite_diff_check(const CascadeWeights& w, const MatrixXd& U, const Target& target, LossKind kind,
                           double epsilon, std::size_t subset_size, std::uint64_t seed,
                           double magnitude_floor = 1e-8);

// Measured constants of the bounded-derivative argument on one trace, using
// row infinity norms (l1 of each derivative row).
struct GradBound {
    double B_R = 0, B_s = 0, B_h = 0, B_loss = 0;
    double bound = 0;
    double grad_l1 = 0;       // row infinity norm of the parameter gradient
    double grad_max_abs = 0;
    bool ok() const { return grad_l1 <= bound; }
};

GradBound gradient_bound_check(const CascadeWeights& w, const MatrixXd& U, const Target& target, LossKind kind);

}  // namespace mm
