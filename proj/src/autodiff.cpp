#include "minmax/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace mm {

namespace {

VectorXd uniform_on(const VectorXd& x, bool want_max)
{
    if (x.size() == 0) throw DomainError("grad: empty input");
    if (!x.allFinite()) throw DomainError("grad: non-finite input");
    const double v = want_max ? x.maxCoeff() : x.minCoeff();
    VectorXd g = VectorXd::Zero(x.size());
    int n = 0;
    for (Eigen::Index i = 0; i < x.size(); ++i) n += x(i) == v;
    for (Eigen::Index i = 0; i < x.size(); ++i)
        if (x(i) == v) g(i) = 1.0 / n;
    return g;
}

struct Stack {
    MatrixXd W;
    std::vector<Eigen::Index> off;  // per unit, reset rows first, then set rows
};

Stack stack_first_maps(const LayerWeights& w)
{
    Stack s;
    Eigen::Index rows = 0;
    for (const auto& u : w.units) {
        s.off.push_back(rows);
        rows += u.reset.affine[0].W.rows() + u.set.affine[0].W.rows();
    }
    s.W.resize(rows, w.d_in);
    for (std::size_t k = 0; k < w.units.size(); ++k) {
        const auto& u = w.units[k];
        const Eigen::Index hr = u.reset.affine[0].W.rows();
        s.W.middleRows(s.off[k], hr) = u.reset.affine[0].W;
        s.W.middleRows(s.off[k] + hr, u.set.affine[0].W.rows()) = u.set.affine[0].W;
    }
    return s;
}

struct TieStats {
    std::uint64_t ties = 0, nodes = 0;
};

// Backward through the MinMax recurrence of one unit. dX holds d/dx_t for
// t = 0..T on entry (contributions from outside the recurrence) and receives
// the propagated adjoints; dR, dS receive the reset/set adjoints.
void recurrence_backward(const UnitTrace& u, MatrixXd& dX, MatrixXd& dR, MatrixXd& dS, TieStats& st)
{
    const Eigen::Index d = u.S.rows(), T = u.S.cols();
    dR.setZero(d * d, T);
    dS.setZero(d, T);
    for (Eigen::Index t = T; t >= 1; --t) {
        for (Eigen::Index i = 0; i < d; ++i) {
            const double x = u.X(i, t);
            const double s = u.S(i, t - 1);
            int na = s == x;
            for (Eigen::Index j = 0; j < d; ++j) {
                const double r = u.R(i * d + j, t - 1), xp = u.X(j, t - 1);
                const double z = r < xp ? r : xp;
                na += z == x;
                st.ties += (r == xp);
            }
            st.nodes += 1 + std::uint64_t(d);
            st.ties += na > 1;
            const double g = dX(i, t);
            if (g == 0.0) continue;
            const double gw = g / na;
            if (s == x) dS(i, t - 1) += gw;
            for (Eigen::Index j = 0; j < d; ++j) {
                const double r = u.R(i * d + j, t - 1), xp = u.X(j, t - 1);
                const double z = r < xp ? r : xp;
                if (z != x) continue;
                const int nz = (r == z) + (xp == z);
                const double gz = gw / nz;
                if (r == z) dR(i * d + j, t - 1) += gz;
                if (xp == z) dX(j, t - 1) += gz;
            }
        }
    }
}

MatrixXd layer_backward(const LayerWeights& w, const LayerTrace& tr, const MatrixXd& dY, const MatrixXd* x_seed,
                        std::size_t seed_unit, LayerWeights& g, TieStats& st)
{
    const Eigen::Index T = tr.U.cols(), d = w.d_state, nu = Eigen::Index(w.units.size());
    MatrixXd dU = MatrixXd::Zero(w.d_in, T);
    if (w.residual) {
        if (w.proj.size()) {
            g.proj.noalias() += dY * tr.U.transpose();
            dU.noalias() += w.proj.transpose() * dY;
        } else {
            dU += dY;
        }
    }
    MatrixXd dZ = mlp_backward(w.out, tr.out, dY, &g.out);
    MatrixXd dV = dZ.bottomRows(w.d_in);

    Stack stk = stack_first_maps(w);
    MatrixXd dH(stk.W.rows(), T);
    for (Eigen::Index k = 0; k < nu; ++k) {
        const auto& uw = w.units[k];
        const auto& ut = tr.units[k];
        auto& ug = g.units[k];
        MatrixXd dX = MatrixXd::Zero(d, T + 1);
        dX.leftCols(T) += dZ.middleRows(k * d, d);
        dX.rightCols(T) += dZ.middleRows(nu * d + k * d, d);
        if (x_seed && std::size_t(k) == seed_unit) dX += *x_seed;
        MatrixXd dR, dS;
        recurrence_backward(ut, dX, dR, dS, st);
        ug.x0 += dX.col(0);
        const Eigen::Index hr = uw.reset.affine[0].W.rows(), hs = uw.set.affine[0].W.rows();
        dH.middleRows(stk.off[k], hr) = detail::chain_tail_backward(uw.reset.affine, ut.r_acts, dR, &ug.reset.affine);
        dH.middleRows(stk.off[k] + hr, hs) = detail::chain_tail_backward(uw.set.affine, ut.s_acts, dS, &ug.set.affine);
    }
    MatrixXd dWst = dH * tr.V.transpose();
    VectorXd dbst = dH.rowwise().sum();
    for (Eigen::Index k = 0; k < nu; ++k) {
        auto& ug = g.units[k];
        const Eigen::Index hr = ug.reset.affine[0].W.rows(), hs = ug.set.affine[0].W.rows();
        ug.reset.affine[0].W += dWst.middleRows(stk.off[k], hr);
        ug.reset.affine[0].b += dbst.segment(stk.off[k], hr);
        ug.set.affine[0].W += dWst.middleRows(stk.off[k] + hr, hs);
        ug.set.affine[0].b += dbst.segment(stk.off[k] + hr, hs);
    }
    dV.noalias() += stk.W.transpose() * dH;
    if (w.prenorm)
        dU += layer_norm_backward(w.norm, tr.ln, dV, &g.norm);
    else
        dU += dV;
    return dU;
}

void finish(GradResult& r)
{
    double m = 0.0;
    bool finite = true;
    visit_params(r.grad, [&](const std::string&, const double* p, Eigen::Index n) {
        for (Eigen::Index i = 0; i < n; ++i) {
            finite = finite && std::isfinite(p[i]);
            m = std::max(m, std::abs(p[i]));
        }
    });
    if (!finite || !r.dU.allFinite()) throw NumericError("backward: non-finite adjoint");
    r.grad_norm = m;
}

}  // namespace

VectorXd grad_max(const VectorXd& x) { return uniform_on(x, true); }
VectorXd grad_min(const VectorXd& x) { return uniform_on(x, false); }

double loss_value(const MatrixXd& Y, const Target& target, LossKind kind, double scale, MatrixXd* dY,
                  std::uint64_t* masked)
{
    const Eigen::Index T = Y.cols();
    if (!target.mask.empty() && Eigen::Index(target.mask.size()) != T) throw ShapeError("loss: mask length");
    auto on = [&](Eigen::Index t) { return target.mask.empty() || target.mask[t]; };
    std::uint64_t n = 0;
    for (Eigen::Index t = 0; t < T; ++t) n += on(t);
    if (n == 0) throw DomainError("loss: empty mask");
    if (scale <= 0) scale = 1.0 / double(n);
    if (dY) dY->setZero(Y.rows(), T);
    double total = 0.0;
    if (kind == LossKind::cross_entropy) {
        if (Eigen::Index(target.classes.size()) != T) throw ShapeError("loss: class count differs from T");
        for (Eigen::Index t = 0; t < T; ++t) {
            if (!on(t)) continue;
            const int c = target.classes[t];
            if (c < 0 || c >= Y.rows()) throw DomainError("loss: class id out of range");
            const double m = Y.col(t).maxCoeff();
            VectorXd e = (Y.col(t).array() - m).exp().matrix();
            const double z = e.sum();
            total += std::log(z) + m - Y(c, t);
            if (dY) {
                dY->col(t) = e / z * scale;
                (*dY)(c, t) -= scale;
            }
        }
    } else {
        if (target.values.rows() != Y.rows() || target.values.cols() != T) throw ShapeError("loss: target shape");
        for (Eigen::Index t = 0; t < T; ++t) {
            if (!on(t)) continue;
            VectorXd r = Y.col(t) - target.values.col(t);
            total += r.squaredNorm();
            if (dY) dY->col(t) = 2.0 * scale * r;
        }
    }
    if (masked) *masked = n;
    const double L = scale * total;
    if (!std::isfinite(L)) throw NumericError("loss: non-finite value");
    return L;
}

Tape build_loss_tape(const CascadeWeights& w, const MatrixXd& U, const Target& target, LossKind kind, double scale)
{
    Tape tp;
    tp.w = &w;
    tp.trace = cascade_eval(w, U, CascadeMode::sequential);
    tp.kind = kind;
    tp.target = target;
    std::uint64_t n = 0;
    tp.loss = loss_value(tp.trace.output(), target, kind, scale, &tp.dY, &n);
    tp.masked = n;
    tp.scale = scale <= 0 ? 1.0 / double(n) : scale;
    return tp;
}

TapeCounts Tape::counts() const
{
    TapeCounts c;
    for (const auto& L : trace.layers) {
        const std::uint64_t T = L.U.cols();
        c.u += T * L.U.rows();
        c.y += T * L.Y.rows();
        for (const auto& u : L.units) {
            const std::uint64_t d = u.S.rows();
            c.R += T * d * d;
            c.z += T * d * d;
            c.s += T * d;
            c.x += T * d;
        }
    }
    return c;
}

GradResult backward(const Tape& tape)
{
    GradResult r;
    r.grad = zeros_like(*tape.w);
    TieStats st;
    MatrixXd d = tape.dY;
    for (std::size_t l = tape.trace.layers.size(); l-- > 0;)
        d = layer_backward(tape.w->layers[l], tape.trace.layers[l], d, nullptr, 0, r.grad.layers[l], st);
    r.dU = std::move(d);
    r.tie_count = st.ties;
    r.minmax_nodes = st.nodes;
    finish(r);
    return r;
}

GradResult backward_from_state(const Tape& tape, const StateSeed& seed)
{
    const auto& layers = tape.trace.layers;
    if (seed.layer < 0 || std::size_t(seed.layer) >= layers.size()) throw DomainError("state seed: layer");
    const auto& L = layers[seed.layer];
    if (seed.unit < 0 || std::size_t(seed.unit) >= L.units.size()) throw DomainError("state seed: unit");
    const auto& ut = L.units[seed.unit];
    if (seed.comp < 0 || seed.comp >= ut.S.rows() || seed.t < 1 || seed.t > ut.S.cols())
        throw DomainError("state seed: component or step out of range");
    GradResult r;
    r.grad = zeros_like(*tape.w);
    TieStats st;
    MatrixXd xs = MatrixXd::Zero(ut.S.rows(), ut.S.cols() + 1);
    xs(seed.comp, seed.t) = 1.0;
    MatrixXd d = MatrixXd::Zero(L.Y.rows(), L.Y.cols());
    d = layer_backward(tape.w->layers[seed.layer], L, d, &xs, std::size_t(seed.unit), r.grad.layers[seed.layer], st);
    for (int l = seed.layer; l-- > 0;)
        d = layer_backward(tape.w->layers[l], layers[l], d, nullptr, 0, r.grad.layers[l], st);
    r.dU = std::move(d);
    r.tie_count = st.ties;
    r.minmax_nodes = st.nodes;
    finish(r);
    return r;
}

std::vector<std::uint32_t> active_signature(const CascadeTrace& trace)
{
    std::vector<std::uint32_t> sig;
    for (const auto& L : trace.layers)
        for (const auto& u : L.units) {
            const Eigen::Index d = u.S.rows(), T = u.S.cols();
            for (Eigen::Index t = 1; t <= T; ++t)
                for (Eigen::Index i = 0; i < d; ++i) {
                    const double x = u.X(i, t);
                    std::uint32_t mask = u.S(i, t - 1) == x ? 1u : 0u;
                    for (Eigen::Index j = 0; j < d; ++j) {
                        const double r = u.R(i * d + j, t - 1), xp = u.X(j, t - 1);
                        const double z = r < xp ? r : xp;
                        sig.push_back((r == z ? 1u : 0u) | (xp == z ? 2u : 0u));
                        if (z == x) mask |= 2u << j;
                    }
                    sig.push_back(mask);
                }
        }
    return sig;
}

std::string FDReport::to_text() const
{
    std::ostringstream os;
    os << "max_rel_error " << max_rel_error << "\n";
    os << "checked " << checked.size() << " excluded_ties " << tie_excluded.size() << " below_floor " << below_floor
       << "\n";
    os << "index name fd backward rel\n";
    for (const auto& e : checked) os << e.index << ' ' << e.name << ' ' << e.fd << ' ' << e.bw << ' ' << e.rel << "\n";
    for (auto i : tie_excluded) os << "tie_excluded " << i << "\n";
    return os.str();
}

FDReport finite_diff_check(const CascadeWeights& w, const MatrixXd& U, const Target& target, LossKind kind,
                           double epsilon, std::size_t subset_size, std::uint64_t seed, double magnitude_floor)
{
    if (!(epsilon > 0)) throw DomainError("finite_diff_check: epsilon must be > 0");
    Tape tp = build_loss_tape(w, U, target, kind);
    const VectorXd bw = backward(tp).flat();
    const auto base_sig = active_signature(tp.trace);

    std::vector<std::string> names;
    visit_params(w, [&](const std::string& n, const double*, Eigen::Index s) {
        for (Eigen::Index i = 0; i < s; ++i) names.push_back(n + "[" + std::to_string(i) + "]");
    });
    std::vector<std::uint64_t> idx(names.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (subset_size < idx.size()) {
        std::mt19937_64 g(seed);
        std::shuffle(idx.begin(), idx.end(), g);
        idx.resize(subset_size);
        std::sort(idx.begin(), idx.end());
    }

    const VectorXd theta = flatten(w);
    CascadeWeights probe = w;
    auto eval_at = [&](std::uint64_t i, double h, bool& same) {
        VectorXd th = theta;
        th(Eigen::Index(i)) += h;
        unflatten(th, probe);
        CascadeTrace tr = cascade_eval(probe, U, CascadeMode::sequential);
        same = active_signature(tr) == base_sig;
        return loss_value(tr.output(), target, kind, tp.scale);
    };

    FDReport rep;
    for (auto i : idx) {
        bool s1 = false, s2 = false;
        const double fp = eval_at(i, epsilon, s1);
        const double fm = eval_at(i, -epsilon, s2);
        if (!s1 || !s2) {
            rep.tie_excluded.push_back(i);
            continue;
        }
        const double fd = (fp - fm) / (2 * epsilon);
        const double b = bw(Eigen::Index(i));
        const double mag = std::max(std::abs(fd), std::abs(b));
        if (mag <= magnitude_floor) {
            ++rep.below_floor;
            continue;
        }
        const double rel = std::abs(fd - b) / mag;
        rep.checked.push_back({i, names[i], fd, b, rel});
        rep.max_rel_error = std::max(rep.max_rel_error, rel);
    }
    return rep;
}

namespace {

double l1(const CascadeWeights& g)
{
    double s = 0;
    visit_params(g, [&](const std::string&, const double* p, Eigen::Index n) {
        s += Eigen::Map<const VectorXd>(p, n).lpNorm<1>();
    });
    return s;
}

LNCache ln_column(const LNCache& c, Eigen::Index t)
{
    return {c.xhat.col(t), c.inv_std.segment(t, 1)};
}

std::vector<MatrixXd> acts_column(const std::vector<MatrixXd>& acts, Eigen::Index t)
{
    std::vector<MatrixXd> out;
    for (const auto& a : acts) out.push_back(a.col(t));
    return out;
}

// l1 norm of the derivative row of one reset/set output w.r.t. (u, theta)
double unit_output_row_norm(const LayerWeights& w, const LayerTrace& tr, const CascadeWeights& zero, std::size_t l,
                            std::size_t k, bool reset, Eigen::Index o, Eigen::Index t)
{
    CascadeWeights g = zero;
    const auto& uw = w.units[k];
    const MLPWeights& m = reset ? uw.reset : uw.set;
    MLPWeights& gm = reset ? g.layers[l].units[k].reset : g.layers[l].units[k].set;
    const auto& acts = reset ? tr.units[k].r_acts : tr.units[k].s_acts;
    MatrixXd seed = MatrixXd::Zero(m.d_out(), 1);
    seed(o, 0) = 1.0;
    MatrixXd dh = detail::chain_tail_backward(m.affine, acts_column(acts, t), seed, &gm.affine);
    MatrixXd v = tr.V.col(t);
    gm.affine[0].W += dh * v.transpose();
    gm.affine[0].b += dh;
    MatrixXd dv = m.affine[0].W.transpose() * dh;
    MatrixXd du = w.prenorm ? layer_norm_backward(w.norm, ln_column(tr.ln, t), dv, &g.layers[l].norm) : dv;
    return l1(g) + du.lpNorm<1>();
}

// l1 norm of the derivative row of one output component w.r.t. (x_{t-1}, u, x_t, theta)
double output_row_norm(const LayerWeights& w, const LayerTrace& tr, const CascadeWeights& zero, std::size_t l,
                       Eigen::Index i, Eigen::Index t)
{
    CascadeWeights g = zero;
    auto& gl = g.layers[l];
    MatrixXd seed = MatrixXd::Zero(w.d_out, 1);
    seed(i, 0) = 1.0;
    MatrixXd du = MatrixXd::Zero(w.d_in, 1);
    if (w.residual) {
        if (w.proj.size()) {
            gl.proj += seed * tr.U.col(t).transpose();
            du += w.proj.transpose() * seed;
        } else {
            du += seed;
        }
    }
    MLPCache c;
    c.in = tr.out.in.col(t);
    c.acts = acts_column(tr.out.acts, t);
    if (w.out.prenorm) {
        c.ln = ln_column(tr.out.ln, t);
        c.normed = tr.out.normed.col(t);
    }
    MatrixXd dz = mlp_backward(w.out, c, seed, &gl.out);
    const Eigen::Index ns = dz.rows() - w.d_in;
    MatrixXd dv = dz.bottomRows(w.d_in);
    du += w.prenorm ? layer_norm_backward(w.norm, ln_column(tr.ln, t), dv, &gl.norm) : dv;
    return l1(g) + dz.topRows(ns).lpNorm<1>() + du.lpNorm<1>();
}

}  // namespace

GradBound gradient_bound_check(const CascadeWeights& w, const MatrixXd& U, const Target& target, LossKind kind)
{
    Tape tp = build_loss_tape(w, U, target, kind);
    GradResult gr = backward(tp);
    GradBound b;
    const CascadeWeights zero = zeros_like(w);
    const Eigen::Index T = U.cols();
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const auto& L = w.layers[l];
        const auto& tr = tp.trace.layers[l];
        for (Eigen::Index t = 0; t < T; ++t) {
            for (std::size_t k = 0; k < L.units.size(); ++k) {
                for (Eigen::Index o = 0; o < L.d_state * L.d_state; ++o)
                    b.B_R = std::max(b.B_R, unit_output_row_norm(L, tr, zero, l, k, true, o, t));
                for (Eigen::Index o = 0; o < L.d_state; ++o)
                    b.B_s = std::max(b.B_s, unit_output_row_norm(L, tr, zero, l, k, false, o, t));
            }
            for (Eigen::Index i = 0; i < L.d_out; ++i) b.B_h = std::max(b.B_h, output_row_norm(L, tr, zero, l, i, t));
        }
    }
    // dY columns are scale * per-step loss derivatives
    for (Eigen::Index t = 0; t < T; ++t)
        b.B_loss = std::max(b.B_loss, tp.dY.col(t).lpNorm<1>() * double(tp.masked));
    const double B1Rs = std::max({1.0, b.B_R, b.B_s}), B1h = std::max(1.0, b.B_h);
    b.bound = b.B_loss * std::pow(B1Rs * B1h, double(w.layers.size()));
    const VectorXd f = gr.flat();
    b.grad_l1 = f.lpNorm<1>();
    b.grad_max_abs = f.lpNorm<Eigen::Infinity>();
    return b;
}

}  // namespace mm
