#include "verify.hpp"

#include <cmath>
#include <algorithm>
#include <random>
#include <stdexcept>

#include "minmax/autodiff.hpp"
#include "minmax/automata.hpp"
#include "minmax/recurrence.hpp"

namespace mm::cli {

using nlohmann::json;

namespace {

void fail(SuiteResult& r, json ex)
{
    if (r.failures++ == 0) r.counterexample = std::move(ex);
}

json vec_json(const VecD& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

RecurrenceInput<double> random_instance(std::mt19937_64& g, std::size_t T, int N)
{
    std::uniform_real_distribution<double> d(-10, 10);
    RecurrenceInput<double> in;
    in.x_init = VecD::NullaryExpr(N, [&] { return d(g); });
    for (std::size_t t = 0; t < T; ++t) {
        in.A.push_back(MatD::NullaryExpr(N, N, [&] { return d(g); }));
        in.b.push_back(VecD::NullaryExpr(N, [&] { return d(g); }));
    }
    return in;
}

Dims small_dims(std::mt19937_64& g)
{
    Dims d;
    d.d_in = 2 + int(g() % 3);
    d.d_out = 2 + int(g() % 3);
    d.d_model = 3 + int(g() % 3);
    d.d_state = 1 + int(g() % 3);
    d.n_units = 1 + int(g() % 3);
    d.n_layers = 1 + int(g() % 2);
    d.d_mlp = 4 + int(g() % 4);
    d.n_mlp = int(g() % 3);
    return d;
}

MatrixXd uniform_inputs(std::mt19937_64& g, Eigen::Index rows, Eigen::Index T)
{
    std::uniform_real_distribution<double> u(-1, 1);
    return MatrixXd::NullaryExpr(rows, T, [&] { return u(g); });
}

Target random_classes(std::mt19937_64& g, Eigen::Index T, int k)
{
    Target t;
    for (Eigen::Index i = 0; i < T; ++i) t.classes.push_back(int(g() % k));
    return t;
}

Semiautomaton random_identity_reset(std::mt19937_64& g, int n, int m)
{
    std::vector<std::vector<int>> t(n, std::vector<int>(m));
    for (int s = 0; s < m; ++s) {
        const int c = int(g() % (n + 1));
        for (int q = 0; q < n; ++q) t[q][s] = c == n ? q : c;
    }
    return make_automaton(n, m, t);
}

std::pair<Semiautomaton, std::vector<std::vector<int>>> random_permutation(std::mt19937_64& g, int n, int m)
{
    std::vector<std::vector<int>> t(n, std::vector<int>(m)), rep(m);
    for (int s = 0; s < m; ++s) {
        std::vector<int> p(n);
        for (int q = 0; q < n; ++q) p[q] = q;
        std::shuffle(p.begin(), p.end(), g);
        rep[s].resize(n);
        for (int q = 0; q < n; ++q) {
            t[q][s] = p[q];
            rep[s][p[q]] = q;  // tuples move by the inverse
        }
    }
    return {make_automaton(n, m, t), rep};
}

Semiautomaton random_general(std::mt19937_64& g, int n, int m)
{
    std::vector<std::vector<int>> t(n, std::vector<int>(m));
    for (auto& r : t)
        for (auto& v : r) v = int(g() % n);
    return make_automaton(n, m, t);
}

json mismatch_json(const Mismatch& m, const std::string& what)
{
    return json{{"unit", what},       {"word", m.word},         {"start", m.start},
                {"step", m.step},     {"expected", m.expected}, {"decoded", m.decoded}};
}

}  // namespace

SuiteResult verify_scan(const VerifyOptions& o)
{
    SuiteResult r;
    r.suite = "scan";
    std::mt19937_64 g(o.seed);
    for (int k = 0; k < 500; ++k) {
        const std::size_t T = 1 + g() % 129;
        const int N = 1 + int(g() % 8);
        auto in = random_instance(g, T, N);
        auto X = seq_rec_eval(in);
        for (int workers : {1, std::max(2, o.workers)}) {
            auto P = parallel_rec_eval(in, workers);
            ++r.checks;
            for (std::size_t t = 0; t < T; ++t)
                if (!(P[t].array() == X[t].array()).all()) {
                    fail(r, json{{"instance", k}, {"T", T}, {"N", N}, {"workers", workers}, {"t", t + 1},
                                 {"sequential", vec_json(X[t])}, {"scan", vec_json(P[t])}});
                    break;
                }
        }
    }
    return r;
}

SuiteResult verify_grad(const VerifyOptions& o)
{
    SuiteResult r;
    r.suite = "grad";
    // closed forms on every tie pattern
    for (int n = 1; n <= 5; ++n)
        for (int mask = 1; mask < (1 << n); ++mask) {
            VectorXd x = VectorXd::Zero(n), want = VectorXd::Zero(n);
            const int k = __builtin_popcount(unsigned(mask));
            for (int i = 0; i < n; ++i)
                if (mask >> i & 1) {
                    x(i) = 1;
                    want(i) = 1.0 / k;
                }
            ++r.checks;
            if (!(grad_max(x).array() == want.array()).all() || !(grad_min(-x).array() == want.array()).all())
                fail(r, json{{"rule", "active-set weights"}, {"x", vec_json(x)}});
        }
    std::mt19937_64 g(o.seed);
    double worst = 0;
    std::uint64_t excluded = 0, checked = 0;
    for (int k = 0; k < 20; ++k) {
        Dims d = small_dims(g);
        auto w = init_weights(d, g());
        const Eigen::Index T = 2 + Eigen::Index(g() % 6);
        auto rep = finite_diff_check(w, uniform_inputs(g, d.d_in, T), random_classes(g, T, d.d_out),
                                     LossKind::cross_entropy, 1e-5, 400, g());
        ++r.checks;
        worst = std::max(worst, rep.max_rel_error);
        excluded += rep.tie_excluded.size();
        checked += rep.checked.size();
        if (rep.max_rel_error > 1e-4) {
            const FDEntry* bad = &rep.checked.front();
            for (const auto& e : rep.checked)
                if (e.rel > bad->rel) bad = &e;
            fail(r, json{{"cascade", k}, {"param", bad->name}, {"fd", bad->fd}, {"backward", bad->bw},
                         {"rel", bad->rel}});
        }
    }
    r.details = json{{"max_rel_error", worst}, {"params_checked", checked}, {"tie_excluded", excluded}};
    return r;
}

SuiteResult verify_automata(const VerifyOptions& o)
{
    SuiteResult r;
    r.suite = "automata";
    auto check = [&](const CompiledUnit& u, const Semiautomaton& a, const std::vector<std::vector<int>>& words,
                     const char* what) {
        CompiledUnit v = u;
        if (o.inject_anchor_bug && v.anchors.size() > 1) {
            // anchors squeezed below the 2*epsilon spacing, tables left as compiled
            for (std::size_t i = 0; i < v.anchors.size(); ++i) v.anchors[i] = v.anchors[0] + double(i) * v.epsilon;
        }
        auto rep = certify(v, a, words, o.workers);
        ++r.checks;
        if (!rep.certified()) fail(r, mismatch_json(rep.mismatches.front(), what));
    };

    const auto parity = make_automaton(2, 2, {{0, 1}, {1, 0}});
    check(compile_permutation(parity, {{0, 1}, {1, 0}}), parity, exhaustive_words(2, 8), "permutation");
    check(compile_general(parity), parity, exhaustive_words(2, 8), "general");

    // every identity-reset semiautomaton with at most 3 states and 3 symbols
    std::uint64_t n_ir = 0;
    for (int n = 1; n <= 3; ++n)
        for (int m = 1; m <= 3; ++m) {
            const auto words = exhaustive_words(m, 8);
            int combos = 1;
            for (int s = 0; s < m; ++s) combos *= n + 1;
            for (int c = 0; c < combos; ++c) {
                std::vector<std::vector<int>> t(n, std::vector<int>(m));
                int code = c;
                for (int s = 0; s < m; ++s, code /= n + 1)
                    for (int q = 0; q < n; ++q) t[q][s] = code % (n + 1) == n ? q : code % (n + 1);
                auto a = make_automaton(n, m, t);
                check(compile_identity_reset(a), a, words, "identity_reset");
                ++n_ir;
            }
        }

    std::mt19937_64 g(o.seed);
    for (int k = 0; k < 20; ++k) {
        const int n = 2 + int(g() % 4), m = 1 + int(g() % 4);
        const auto words = random_words(m, 1000, 64, g());
        auto a = random_identity_reset(g, n, m);
        check(compile_identity_reset(a), a, words, "identity_reset");
        auto [p, rep] = random_permutation(g, n, m);
        check(compile_permutation(p, rep), p, words, "permutation");
        auto b = random_general(g, n, m);
        check(compile_general(b), b, words, "general");
    }
    r.details = json{{"identity_reset_exhaustive", n_ir}, {"random_per_class", 20}};
    return r;
}

SuiteResult verify_stability(const VerifyOptions& o)
{
    SuiteResult r;
    r.suite = "stability";
    std::mt19937_64 g(o.seed);
    for (int k = 0; k < 50; ++k) {
        Dims d = small_dims(g);
        auto w = init_weights(d, g());
        const Eigen::Index T = 1 + Eigen::Index(g() % 200);
        auto tr = cascade_eval(w, uniform_inputs(g, d.d_in, T));
        ++r.checks;
        if (!value_closure_ok(tr, w)) fail(r, json{{"trace", k}, {"T", T}, {"check", "value closure"}});
    }
    // frozen cascade under a long bounded input stream
    Dims d;
    d.d_in = 3;
    d.d_out = 2;
    d.d_model = 4;
    d.d_state = 2;
    d.n_units = 3;
    d.n_layers = 2;
    d.d_mlp = 6;
    auto w = init_weights(d, o.seed + 1);
    auto tr = cascade_eval(w, uniform_inputs(g, 3, 100000));
    double bound = 0, state = 0;
    for (std::size_t l = 0; l < tr.layers.size(); ++l)
        for (std::size_t u = 0; u < tr.layers[l].units.size(); ++u) {
            const auto& ut = tr.layers[l].units[u];
            bound = std::max({bound, ut.R.cwiseAbs().maxCoeff(), ut.S.cwiseAbs().maxCoeff(),
                              w.layers[l].units[u].x0.cwiseAbs().maxCoeff()});
            state = std::max(state, ut.X.cwiseAbs().maxCoeff());
        }
    ++r.checks;
    if (!value_closure_ok(tr, w)) fail(r, json{{"trace", "long"}, {"check", "value closure"}});
    ++r.checks;
    if (!(state <= bound)) fail(r, json{{"trace", "long"}, {"max_state_abs", state}, {"closure_bound", bound}});
    r.details = json{{"T", 100000}, {"max_state_abs", state}, {"closure_bound", bound}};
    return r;
}

SuiteResult run_suite(const std::string& name, const VerifyOptions& o)
{
    if (name == "scan") return verify_scan(o);
    if (name == "grad") return verify_grad(o);
    if (name == "automata") return verify_automata(o);
    if (name == "stability") return verify_stability(o);
    throw std::invalid_argument("unknown suite " + name);
}

}  // namespace mm::cli
