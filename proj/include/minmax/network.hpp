#pragma once
#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "minmax/algebra.hpp"

namespace mm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct Linear {
    MatrixXd W;
    VectorXd b;
};

struct LayerNormParams {
    VectorXd gamma;
    VectorXd beta;
};

inline constexpr double kLayerNormEps = 1e-5;

// affine[0] is the input map, affine.back() the output map; tanh sits between
// consecutive maps, so a single map is a plain affine function.
struct MLPWeights {
    std::vector<Linear> affine;
    bool prenorm = false;
    LayerNormParams norm;
    bool residual = false;
    MatrixXd proj;  // empty: identity residual

    Eigen::Index d_in() const { return affine.front().W.cols(); }
    Eigen::Index d_out() const { return affine.back().W.rows(); }
};

struct NeuronWeights {
    MLPWeights reset;  // outputs d_state^2, row-major R
    MLPWeights set;
    VectorXd x0;
    Eigen::Index d_state() const { return x0.size(); }
};

struct LayerWeights {
    bool prenorm = true;
    LayerNormParams norm;
    std::vector<NeuronWeights> units;
    MLPWeights out;  // consumes (x_{t-1} | x_t | v_t)
    bool residual = true;
    MatrixXd proj;  // empty: identity residual
    Eigen::Index d_in = 0, d_out = 0, d_state = 0;
};

struct Dims {
    int d_in = 1, d_out = 1, d_model = 1, d_state = 1;
    int n_units = 1, n_layers = 1, d_mlp = 1, n_mlp = 1;
    bool prenorm = true;
    bool residual = true;

    int unit_hidden() const { return (d_mlp + n_units - 1) / n_units; }
    int layer_in(int l) const { return l == 0 ? d_in : d_model; }
    int layer_out(int l) const { return l == n_layers - 1 ? d_out : d_model; }
};

struct CascadeWeights {
    Dims dims;
    std::uint64_t seed = 0;
    std::vector<LayerWeights> layers;
};

enum class CascadeMode { sequential, parallel };

// Forward caches. Columns are time steps throughout.
struct LNCache {
    MatrixXd xhat;
    VectorXd inv_std;  // one per column
};

struct MLPCache {
    MatrixXd in;
    LNCache ln;
    MatrixXd normed;  // input of the first map when prenorm is set
    std::vector<MatrixXd> acts;  // tanh outputs
    MatrixXd out;
};

struct UnitTrace {
    MatrixXd R;                // d^2 x T
    MatrixXd S;                // d x T
    MatrixXd X;                // d x (T+1), column 0 is x0
    std::vector<MatrixXd> r_acts, s_acts;
};

struct LayerTrace {
    MatrixXd U;    // layer input
    LNCache ln;
    MatrixXd V;    // normalized input
    MatrixXd H;    // stacked first-map pre-activations of all unit MLPs
    std::vector<UnitTrace> units;
    MLPCache out;  // output MLP over (x_{t-1} | x_t | v_t)
    MatrixXd Y;
};

struct CascadeTrace {
    std::vector<LayerTrace> layers;
    const MatrixXd& output() const { return layers.back().Y; }
};

namespace detail {
// Maps 1.. of an affine chain, given the output of map 0 (before tanh).
MatrixXd chain_tail(const std::vector<Linear>& aff, MatrixXd pre, std::vector<MatrixXd>* acts);
// Reverse of chain_tail: d(output of map 0) from d(chain output); accumulates grads of maps 1..
MatrixXd chain_tail_backward(const std::vector<Linear>& aff, const std::vector<MatrixXd>& acts, MatrixXd d,
                             std::vector<Linear>* grad);
}  // namespace detail

// layer norm over each column
MatrixXd layer_norm(const LayerNormParams& p, const MatrixXd& X, LNCache* cache = nullptr);
MatrixXd layer_norm_backward(const LayerNormParams& p, const LNCache& c, const MatrixXd& dY,
                             LayerNormParams* grad);

MatrixXd mlp_forward(const MLPWeights& w, const MatrixXd& X, MLPCache* cache = nullptr);
// returns dX; accumulates into grad
MatrixXd mlp_backward(const MLPWeights& w, const MLPCache& c, const MatrixXd& dOut, MLPWeights* grad);
VectorXd mlp_eval(const MLPWeights& w, const VectorXd& x);

VectorXd neuron_step(const NeuronWeights& w, const VectorXd& x_prev, const VectorXd& u);

LayerTrace layer_forward(const LayerWeights& w, const MatrixXd& U, CascadeMode mode, int workers = 1);

// U is d_in x T; returns the trace, whose output() is d_out x T
CascadeTrace cascade_eval(const CascadeWeights& w, const MatrixXd& U,
                          CascadeMode mode = CascadeMode::sequential, int workers = 1);

void validate(const Dims& d);
CascadeWeights init_weights(const Dims& dims, std::uint64_t seed);
std::uint64_t count_params(const Dims& dims);

// Zero-valued weights of the same shapes (used as a gradient container).
CascadeWeights zeros_like(const CascadeWeights& w);

// Canonical parameter order: every array, visited as (name, data, size).
void visit_params(CascadeWeights& w, const std::function<void(const std::string&, double*, Eigen::Index)>& f);
void visit_params(const CascadeWeights& w,
                  const std::function<void(const std::string&, const double*, Eigen::Index)>& f);
std::uint64_t param_size(const CascadeWeights& w);
VectorXd flatten(const CascadeWeights& w);
void unflatten(const VectorXd& flat, CascadeWeights& w);

// Every state entry must be an initial-state entry or an R/s output emitted
// at an earlier or equal step of the same unit.
bool value_closure_ok(const CascadeTrace& trace, const CascadeWeights& w);

}  // namespace mm
