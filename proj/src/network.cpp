#include "minmax/network.hpp"

#include <cmath>
#include <random>
#include <unordered_set>

#include "minmax/parallel.hpp"
#include "minmax/recurrence.hpp"

namespace mm {

namespace {

void require_rows(const MatrixXd& X, Eigen::Index rows, const char* what)
{
    if (X.rows() != rows)
        throw ShapeError(std::string(what) + ": expected " + std::to_string(rows) + " rows, got " +
                         std::to_string(X.rows()));
}

MatrixXd affine(const Linear& l, const MatrixXd& X)
{
    MatrixXd Y = l.W * X;
    Y.colwise() += l.b;
    return Y;
}

}  // namespace

MatrixXd detail::chain_tail(const std::vector<Linear>& aff, MatrixXd pre, std::vector<MatrixXd>* acts)
{
    for (std::size_t k = 1; k < aff.size(); ++k) {
        MatrixXd a = pre.array().tanh().matrix();
        pre = affine(aff[k], a);
        if (acts) acts->push_back(std::move(a));
    }
    return pre;
}

MatrixXd detail::chain_tail_backward(const std::vector<Linear>& aff, const std::vector<MatrixXd>& acts,
                             MatrixXd d, std::vector<Linear>* grad)
{
    for (std::size_t k = aff.size() - 1; k >= 1; --k) {
        const MatrixXd& a = acts[k - 1];
        if (grad) {
            (*grad)[k].W.noalias() += d * a.transpose();
            (*grad)[k].b += d.rowwise().sum();
        }
        MatrixXd da = aff[k].W.transpose() * d;
        d = (da.array() * (1.0 - a.array().square())).matrix();
    }
    return d;
}

MatrixXd layer_norm(const LayerNormParams& p, const MatrixXd& X, LNCache* cache)
{
    require_rows(X, p.gamma.size(), "layer_norm");
    const double n = double(X.rows());
    MatrixXd xhat(X.rows(), X.cols());
    VectorXd inv(X.cols());
    for (Eigen::Index t = 0; t < X.cols(); ++t) {
        const double mu = X.col(t).sum() / n;
        const double var = (X.col(t).array() - mu).square().sum() / n;
        inv(t) = 1.0 / std::sqrt(var + kLayerNormEps);
        xhat.col(t) = (X.col(t).array() - mu) * inv(t);
    }
    MatrixXd Y = (xhat.array().colwise() * p.gamma.array()).matrix();
    Y.colwise() += p.beta;
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv);
    }
    return Y;
}

MatrixXd layer_norm_backward(const LayerNormParams& p, const LNCache& c, const MatrixXd& dY,
                             LayerNormParams* grad)
{
    if (grad) {
        grad->gamma += (dY.array() * c.xhat.array()).rowwise().sum().matrix();
        grad->beta += dY.rowwise().sum();
    }
    const double n = double(dY.rows());
    MatrixXd dxhat = (dY.array().colwise() * p.gamma.array()).matrix();
    MatrixXd dX(dY.rows(), dY.cols());
    for (Eigen::Index t = 0; t < dY.cols(); ++t) {
        const double m1 = dxhat.col(t).sum() / n;
        const double m2 = dxhat.col(t).dot(c.xhat.col(t)) / n;
        dX.col(t) = c.inv_std(t) * (dxhat.col(t).array() - m1 - c.xhat.col(t).array() * m2);
    }
    return dX;
}

MatrixXd mlp_forward(const MLPWeights& w, const MatrixXd& X, MLPCache* cache)
{
    if (w.affine.empty()) throw ShapeError("mlp: no affine maps");
    require_rows(X, w.d_in(), "mlp");
    MatrixXd in = w.prenorm ? layer_norm(w.norm, X, cache ? &cache->ln : nullptr) : X;
    if (cache) cache->acts.clear();
    MatrixXd out = detail::chain_tail(w.affine, affine(w.affine[0], in), cache ? &cache->acts : nullptr);
    if (w.residual) {
        if (w.proj.size())
            out.noalias() += w.proj * X;
        else {
            if (X.rows() != out.rows()) throw ShapeError("mlp: identity residual needs d_in == d_out");
            out += X;
        }
    }
    if (cache) {
        cache->in = X;
        if (w.prenorm) cache->normed = std::move(in);
        cache->out = out;
    }
    return out;
}

MatrixXd mlp_backward(const MLPWeights& w, const MLPCache& c, const MatrixXd& dOut, MLPWeights* grad)
{
    MatrixXd d0 = detail::chain_tail_backward(w.affine, c.acts, dOut, grad ? &grad->affine : nullptr);
    const MatrixXd& feed = w.prenorm ? c.normed : c.in;
    if (grad) {
        grad->affine[0].W.noalias() += d0 * feed.transpose();
        grad->affine[0].b += d0.rowwise().sum();
    }
    MatrixXd dX = w.affine[0].W.transpose() * d0;
    if (w.prenorm) dX = layer_norm_backward(w.norm, c.ln, dX, grad ? &grad->norm : nullptr);
    if (w.residual) {
        if (w.proj.size()) {
            if (grad) grad->proj.noalias() += dOut * c.in.transpose();
            dX.noalias() += w.proj.transpose() * dOut;
        } else {
            dX += dOut;
        }
    }
    return dX;
}

VectorXd mlp_eval(const MLPWeights& w, const VectorXd& x)
{
    return mlp_forward(w, MatrixXd(x)).col(0);
}

VectorXd neuron_step(const NeuronWeights& w, const VectorXd& x_prev, const VectorXd& u)
{
    const Eigen::Index d = w.d_state();
    if (x_prev.size() != d) throw ShapeError("neuron_step: state length");
    VectorXd r = mlp_eval(w.reset, u), s = mlp_eval(w.set, u);
    if (r.size() != d * d || s.size() != d) throw ShapeError("neuron_step: reset/set output size");
    StepPair<double> M{Eigen::Map<const MatD>(r.data(), d, d), s};
    return apply(M, VecD(x_prev));
}

namespace {

void recur_sequential(const MatrixXd& R, const MatrixXd& S, MatrixXd& X)
{
    const Eigen::Index d = S.rows(), T = S.cols();
    for (Eigen::Index t = 1; t <= T; ++t) {
        for (Eigen::Index i = 0; i < d; ++i) {
            double acc = S(i, t - 1);
            for (Eigen::Index j = 0; j < d; ++j) {
                const double z = detail::mn(R(i * d + j, t - 1), X(j, t - 1));
                acc = detail::mx(acc, z);
            }
            X(i, t) = acc;
        }
    }
}

void recur_parallel(const MatrixXd& R, const MatrixXd& S, MatrixXd& X, int workers)
{
    const Eigen::Index d = S.rows(), T = S.cols();
    RecurrenceInput<double> in;
    in.x_init = X.col(0);
    in.A.reserve(T);
    in.b.reserve(T);
    for (Eigen::Index t = 0; t < T; ++t) {
        in.A.push_back(Eigen::Map<const MatD>(R.col(t).data(), d, d));
        in.b.push_back(S.col(t));
    }
    auto traj = parallel_rec_eval(in, workers);
    for (Eigen::Index t = 0; t < T; ++t) X.col(t + 1) = traj[t];
}

}  // namespace

LayerTrace layer_forward(const LayerWeights& w, const MatrixXd& U, CascadeMode mode, int workers)
{
    require_rows(U, w.d_in, "layer");
    if (U.cols() < 1) throw ShapeError("layer: T must be >= 1");
    if (!U.allFinite()) throw DomainError("layer: non-finite input");
    LayerTrace tr;
    tr.U = U;
    tr.V = w.prenorm ? layer_norm(w.norm, U, &tr.ln) : U;

    // first maps of every unit MLP stacked into one product
    Eigen::Index rows = 0;
    for (const auto& u : w.units) rows += u.reset.affine[0].W.rows() + u.set.affine[0].W.rows();
    MatrixXd Wst(rows, w.d_in);
    VectorXd bst(rows);
    Eigen::Index r0 = 0;
    for (const auto& u : w.units)
        for (const MLPWeights* m : {&u.reset, &u.set}) {
            const auto& l = m->affine[0];
            Wst.middleRows(r0, l.W.rows()) = l.W;
            bst.segment(r0, l.W.rows()) = l.b;
            r0 += l.W.rows();
        }
    tr.H = Wst * tr.V;
    tr.H.colwise() += bst;

    const Eigen::Index T = U.cols(), d = w.d_state;
    tr.units.resize(w.units.size());
    r0 = 0;
    std::vector<Eigen::Index> offs;
    for (const auto& u : w.units) {
        offs.push_back(r0);
        r0 += u.reset.affine[0].W.rows() + u.set.affine[0].W.rows();
    }
    parallel_for(w.units.size(), mode == CascadeMode::parallel ? workers : 1, [&](std::size_t k) {
        const auto& u = w.units[k];
        auto& ut = tr.units[k];
        const Eigen::Index hr = u.reset.affine[0].W.rows(), hs = u.set.affine[0].W.rows();
        ut.R = detail::chain_tail(u.reset.affine, tr.H.middleRows(offs[k], hr), &ut.r_acts);
        ut.S = detail::chain_tail(u.set.affine, tr.H.middleRows(offs[k] + hr, hs), &ut.s_acts);
        if (!ut.R.allFinite() || !ut.S.allFinite()) throw NumericError("layer: non-finite reset/set output");
        ut.X.resize(d, T + 1);
        ut.X.col(0) = u.x0;
        if (mode == CascadeMode::sequential)
            recur_sequential(ut.R, ut.S, ut.X);
        else
            recur_parallel(ut.R, ut.S, ut.X, 1);
    });

    const Eigen::Index nu = Eigen::Index(w.units.size());
    MatrixXd Z(2 * nu * d + w.d_in, T);
    for (Eigen::Index k = 0; k < nu; ++k) {
        Z.middleRows(k * d, d) = tr.units[k].X.leftCols(T);
        Z.middleRows(nu * d + k * d, d) = tr.units[k].X.rightCols(T);
    }
    Z.bottomRows(w.d_in) = tr.V;
    tr.Y = mlp_forward(w.out, Z, &tr.out);
    if (w.residual) {
        if (w.proj.size())
            tr.Y.noalias() += w.proj * U;
        else
            tr.Y += U;
    }
    if (!tr.Y.allFinite()) throw NumericError("layer: non-finite output");
    return tr;
}

CascadeTrace cascade_eval(const CascadeWeights& w, const MatrixXd& U, CascadeMode mode, int workers)
{
    if (w.layers.empty()) throw ShapeError("cascade: no layers");
    CascadeTrace tr;
    tr.layers.reserve(w.layers.size());
    const MatrixXd* in = &U;
    for (const auto& l : w.layers) {
        tr.layers.push_back(layer_forward(l, *in, mode, workers));
        in = &tr.layers.back().Y;
    }
    return tr;
}

void validate(const Dims& d)
{
    for (int v : {d.d_in, d.d_out, d.d_model, d.d_state, d.n_units, d.n_layers, d.d_mlp})
        if (v < 1) throw DomainError("dims: every size must be >= 1");
    if (d.n_mlp < 0) throw DomainError("dims: n_mlp must be >= 0");
}

namespace {

struct Init {
    std::mt19937_64 g;
    explicit Init(std::uint64_t seed) : g(seed) {}
    double uni(double a) { return std::uniform_real_distribution<double>(-a, a)(g); }
    Linear linear(int out, int in)
    {
        const double a = 1.0 / std::sqrt(double(in));
        Linear l{MatrixXd(out, in), VectorXd(out)};
        for (Eigen::Index i = 0; i < l.W.size(); ++i) l.W.data()[i] = uni(a);
        for (Eigen::Index i = 0; i < out; ++i) l.b(i) = uni(a);
        return l;
    }
    MLPWeights mlp(int in, int hidden, int n_hidden, int out)
    {
        MLPWeights m;
        if (n_hidden == 0) {
            m.affine.push_back(linear(out, in));
            return m;
        }
        m.affine.push_back(linear(hidden, in));
        for (int k = 1; k < n_hidden; ++k) m.affine.push_back(linear(hidden, hidden));
        m.affine.push_back(linear(out, hidden));
        return m;
    }
};

LayerNormParams unit_norm(int n) { return {VectorXd::Ones(n), VectorXd::Zero(n)}; }

}  // namespace

CascadeWeights init_weights(const Dims& dims, std::uint64_t seed)
{
    validate(dims);
    Init ini(seed);
    CascadeWeights w;
    w.dims = dims;
    w.seed = seed;
    const int d = dims.d_state, h = dims.unit_hidden();
    for (int l = 0; l < dims.n_layers; ++l) {
        LayerWeights L;
        L.d_in = dims.layer_in(l);
        L.d_out = dims.layer_out(l);
        L.d_state = d;
        L.prenorm = dims.prenorm;
        if (L.prenorm) L.norm = unit_norm(int(L.d_in));
        for (int k = 0; k < dims.n_units; ++k) {
            NeuronWeights u;
            u.reset = ini.mlp(int(L.d_in), h, dims.n_mlp, d * d);
            u.set = ini.mlp(int(L.d_in), h, dims.n_mlp, d);
            u.reset.affine.back().b.array() += 1.0;
            u.set.affine.back().b.array() -= 1.0;
            u.x0 = VectorXd(d);
            for (int i = 0; i < d; ++i) u.x0(i) = ini.uni(1.0);
            L.units.push_back(std::move(u));
        }
        L.out = ini.mlp(2 * dims.n_units * d + int(L.d_in), dims.d_mlp, dims.n_mlp, int(L.d_out));
        L.residual = dims.residual;
        if (L.residual && L.d_in != L.d_out) {
            L.proj = MatrixXd(L.d_out, L.d_in);
            const double a = 1.0 / std::sqrt(double(L.d_in));
            for (Eigen::Index i = 0; i < L.proj.size(); ++i) L.proj.data()[i] = ini.uni(a);
        }
        w.layers.push_back(std::move(L));
    }
    return w;
}

std::uint64_t count_params(const Dims& dims)
{
    validate(dims);
    auto mlp = [&](std::uint64_t in, std::uint64_t hidden, std::uint64_t out) -> std::uint64_t {
        const std::uint64_t n = std::uint64_t(dims.n_mlp);
        if (n == 0) return out * in + out;
        return hidden * in + hidden + (n - 1) * (hidden * hidden + hidden) + out * hidden + out;
    };
    const std::uint64_t d = dims.d_state, h = dims.unit_hidden();
    std::uint64_t total = 0;
    for (int l = 0; l < dims.n_layers; ++l) {
        const std::uint64_t in = dims.layer_in(l), out = dims.layer_out(l);
        if (dims.prenorm) total += 2 * in;
        total += dims.n_units * (mlp(in, h, d * d) + mlp(in, h, d) + d);
        total += mlp(2 * dims.n_units * d + in, dims.d_mlp, out);
        if (dims.residual && in != out) total += in * out;
    }
    return total;
}

namespace {

template <class W, class F>
void visit_mlp(W& m, const std::string& p, F& f)
{
    if (m.prenorm) {
        f(p + ".norm.gamma", m.norm.gamma.data(), m.norm.gamma.size());
        f(p + ".norm.beta", m.norm.beta.data(), m.norm.beta.size());
    }
    for (std::size_t k = 0; k < m.affine.size(); ++k) {
        const std::string q = p + ".affine" + std::to_string(k);
        f(q + ".W", m.affine[k].W.data(), m.affine[k].W.size());
        f(q + ".b", m.affine[k].b.data(), m.affine[k].b.size());
    }
    if (m.residual && m.proj.size()) f(p + ".proj", m.proj.data(), m.proj.size());
}

template <class C, class F>
void visit_all(C& w, F& f)
{
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        auto& L = w.layers[l];
        const std::string p = "layer" + std::to_string(l);
        if (L.prenorm) {
            f(p + ".norm.gamma", L.norm.gamma.data(), L.norm.gamma.size());
            f(p + ".norm.beta", L.norm.beta.data(), L.norm.beta.size());
        }
        for (std::size_t k = 0; k < L.units.size(); ++k) {
            auto& u = L.units[k];
            const std::string q = p + ".unit" + std::to_string(k);
            visit_mlp(u.reset, q + ".reset", f);
            visit_mlp(u.set, q + ".set", f);
            f(q + ".x0", u.x0.data(), u.x0.size());
        }
        visit_mlp(L.out, p + ".out", f);
        if (L.residual && L.proj.size()) f(p + ".proj", L.proj.data(), L.proj.size());
    }
}

void zero_mlp(MLPWeights& m)
{
    for (auto& l : m.affine) {
        l.W.setZero();
        l.b.setZero();
    }
    m.norm.gamma.setZero();
    m.norm.beta.setZero();
    m.proj.setZero();
}

}  // namespace

void visit_params(CascadeWeights& w, const std::function<void(const std::string&, double*, Eigen::Index)>& f)
{
    visit_all(w, f);
}

void visit_params(const CascadeWeights& w,
                  const std::function<void(const std::string&, const double*, Eigen::Index)>& f)
{
    visit_all(w, f);
}

CascadeWeights zeros_like(const CascadeWeights& w)
{
    CascadeWeights z = w;
    for (auto& L : z.layers) {
        L.norm.gamma.setZero();
        L.norm.beta.setZero();
        for (auto& u : L.units) {
            zero_mlp(u.reset);
            zero_mlp(u.set);
            u.x0.setZero();
        }
        zero_mlp(L.out);
        L.proj.setZero();
    }
    return z;
}

std::uint64_t param_size(const CascadeWeights& w)
{
    std::uint64_t n = 0;
    visit_params(w, [&](const std::string&, const double*, Eigen::Index s) { n += std::uint64_t(s); });
    return n;
}

VectorXd flatten(const CascadeWeights& w)
{
    VectorXd v(param_size(w));
    Eigen::Index o = 0;
    visit_params(w, [&](const std::string&, const double* p, Eigen::Index s) {
        v.segment(o, s) = Eigen::Map<const VectorXd>(p, s);
        o += s;
    });
    return v;
}

void unflatten(const VectorXd& flat, CascadeWeights& w)
{
    if (std::uint64_t(flat.size()) != param_size(w)) throw ShapeError("unflatten: size mismatch");
    Eigen::Index o = 0;
    visit_params(w, [&](const std::string&, double* p, Eigen::Index s) {
        Eigen::Map<VectorXd>(p, s) = flat.segment(o, s);
        o += s;
    });
}

bool value_closure_ok(const CascadeTrace& trace, const CascadeWeights& w)
{
    for (std::size_t l = 0; l < trace.layers.size(); ++l) {
        const auto& L = trace.layers[l];
        for (std::size_t k = 0; k < L.units.size(); ++k) {
            const auto& u = L.units[k];
            const Eigen::Index d = u.S.rows(), T = u.S.cols();
            std::unordered_set<double> seen;
            for (Eigen::Index i = 0; i < d; ++i) seen.insert(w.layers[l].units[k].x0(i));
            for (Eigen::Index i = 0; i < d; ++i)
                if (u.X(i, 0) != w.layers[l].units[k].x0(i)) return false;
            for (Eigen::Index t = 1; t <= T; ++t) {
                for (Eigen::Index i = 0; i < d * d; ++i) seen.insert(u.R(i, t - 1));
                for (Eigen::Index i = 0; i < d; ++i) seen.insert(u.S(i, t - 1));
                for (Eigen::Index i = 0; i < d; ++i)
                    if (!seen.count(u.X(i, t))) return false;
            }
        }
    }
    return true;
}

}  // namespace mm
