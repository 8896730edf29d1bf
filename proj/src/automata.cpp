#include "minmax/automata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "minmax/parallel.hpp"

namespace mm {

int Semiautomaton::run(int q, const std::vector<int>& word) const
{
    for (int s : word) q = next(q, s);
    return q;
}

void Semiautomaton::validate() const
{
    if (n_states < 1 || n_symbols < 1) throw DomainError("automaton: need at least one state and one symbol");
    if (delta.size() != std::size_t(n_states) * std::size_t(n_symbols))
        throw DomainError("automaton: transition table is not total");
    for (int v : delta)
        if (v < 0 || v >= n_states) throw DomainError("automaton: transition target out of range");
}

Semiautomaton make_automaton(int n_states, int n_symbols, const std::vector<std::vector<int>>& table)
{
    // table[q][sigma]
    Semiautomaton a;
    a.n_states = n_states;
    a.n_symbols = n_symbols;
    if (int(table.size()) != n_states) throw DomainError("automaton: table rows differ from state count");
    for (const auto& r : table) {
        if (int(r.size()) != n_symbols) throw DomainError("automaton: table row length differs from symbol count");
        a.delta.insert(a.delta.end(), r.begin(), r.end());
    }
    a.validate();
    return a;
}

Classification classify(const Semiautomaton& a)
{
    a.validate();
    Classification c;
    bool all_ir = true, all_perm = true;
    for (int s = 0; s < a.n_symbols; ++s) {
        SymbolClass sc;
        std::vector<int> img(a.n_states);
        for (int q = 0; q < a.n_states; ++q) img[q] = a.next(q, s);
        std::set<int> range(img.begin(), img.end());
        bool ident = true;
        for (int q = 0; q < a.n_states; ++q) ident = ident && img[q] == q;
        if (ident) {
            sc.tag = Tag::identity;
            sc.perm = img;
        } else if (range.size() == 1) {
            sc.tag = Tag::constant;
            sc.target = img[0];
        } else if (int(range.size()) == a.n_states) {
            sc.tag = Tag::permutation;
            sc.perm = img;
        } else {
            sc.tag = Tag::general;
        }
        all_ir = all_ir && (sc.tag == Tag::identity || sc.tag == Tag::constant);
        all_perm = all_perm && (sc.tag == Tag::identity || sc.tag == Tag::permutation);
        c.symbols.push_back(std::move(sc));
    }
    c.overall = all_ir ? AutomatonClass::identity_reset
                       : (all_perm ? AutomatonClass::permutation : AutomatonClass::general);
    return c;
}

const char* to_string(AutomatonClass c)
{
    switch (c) {
    case AutomatonClass::identity_reset: return "identity-reset";
    case AutomatonClass::permutation: return "permutation";
    default: return "general";
    }
}

const char* to_string(Tag t)
{
    switch (t) {
    case Tag::identity: return "identity";
    case Tag::constant: return "constant";
    case Tag::permutation: return "permutation";
    default: return "general";
    }
}

std::vector<double> default_anchors(int k)
{
    std::vector<double> v(k);
    std::iota(v.begin(), v.end(), 1.0);
    return v;
}

namespace {

void check_anchors(const std::vector<double>& x, double eps)
{
    if (!(eps >= 0) || !std::isfinite(eps)) throw DomainError("anchors: epsilon must be finite and >= 0");
    for (double v : x)
        if (!std::isfinite(v)) throw DomainError("anchors: non-finite anchor");
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = i + 1; j < x.size(); ++j)
            if (!(std::abs(x[i] - x[j]) > 2 * eps))
                throw DomainError("anchors: spacing must exceed 2*epsilon");
}

void set_bounds(CompiledUnit& u)
{
    u.x_min = *std::min_element(u.anchors.begin(), u.anchors.end());
    u.x_max = *std::max_element(u.anchors.begin(), u.anchors.end());
}

}  // namespace

VecD CompiledUnit::initial(int q) const
{
    if (q < 0 || q >= n_states) throw DomainError("compiled unit: start state out of range");
    switch (kind) {
    case UnitKind::identity_reset: return VecD::Constant(1, anchors[q]);
    case UnitKind::permutation: return Eigen::Map<const VecD>(anchors.data(), state_dim);
    default: {
        VecD x = VecD::Constant(state_dim, anchors[0]);
        x(q) = anchors[1];
        return x;
    }
    }
}

VecD CompiledUnit::step(const VecD& x, int sigma) const
{
    if (sigma < 0 || sigma >= int(reset.size())) throw DomainError("compiled unit: symbol out of range");
    return apply(StepPair<double>{reset[sigma], set[sigma]}, x);
}

int CompiledUnit::component(double v) const
{
    for (std::size_t i = 0; i < anchors.size(); ++i)
        if (std::abs(v - anchors[i]) <= epsilon) return int(i);
    return -1;
}

int CompiledUnit::decode(const VecD& x, int start) const
{
    if (x.size() != state_dim) throw ShapeError("compiled unit: state size");
    switch (kind) {
    case UnitKind::identity_reset: return component(x(0));
    case UnitKind::permutation: {
        std::vector<int> t(state_dim);
        for (int j = 0; j < state_dim; ++j)
            if ((t[j] = component(x(j))) < 0) return -1;
        auto it = std::lower_bound(tuples.begin(), tuples.end(), t);
        if (it == tuples.end() || *it != t) return -1;
        return tuple_maps[std::size_t(it - tuples.begin())][start];
    }
    default: {
        int hot = -1;
        for (int j = 0; j < state_dim; ++j) {
            const int c = component(x(j));
            if (c < 0) return -1;
            if (c == 1) {
                if (hot >= 0) return -1;
                hot = j;
            }
        }
        return hot;
    }
    }
}

bool CompiledUnit::tables_closed() const
{
    auto ok = [&](double v) {
        return v == x_min || v == x_max || std::find(anchors.begin(), anchors.end(), v) != anchors.end();
    };
    for (const auto& R : reset)
        for (Eigen::Index i = 0; i < R.size(); ++i)
            if (!ok(R.data()[i])) return false;
    for (const auto& s : set)
        for (Eigen::Index i = 0; i < s.size(); ++i)
            if (!ok(s(i))) return false;
    return true;
}

CompiledUnit compile_identity_reset(const Semiautomaton& a, std::vector<double> anchors, double epsilon)
{
    const auto cls = classify(a);
    if (cls.overall != AutomatonClass::identity_reset)
        throw ClassError(std::string("compile_identity_reset: automaton is ") + to_string(cls.overall));
    if (anchors.empty()) anchors = default_anchors(a.n_states);
    if (int(anchors.size()) != a.n_states) throw DomainError("compile_identity_reset: one anchor per state");
    check_anchors(anchors, epsilon);
    CompiledUnit u;
    u.kind = UnitKind::identity_reset;
    u.state_dim = 1;
    u.n_states = a.n_states;
    u.anchors = std::move(anchors);
    u.epsilon = epsilon;
    set_bounds(u);
    for (const auto& sc : cls.symbols) {
        if (sc.tag == Tag::identity) {
            u.reset.push_back(MatD::Constant(1, 1, u.x_max));
            u.set.push_back(VecD::Constant(1, u.x_min));
        } else {
            u.reset.push_back(MatD::Constant(1, 1, u.x_min));
            u.set.push_back(VecD::Constant(1, u.anchors[sc.target]));
        }
    }
    return u;
}

CompiledUnit compile_permutation(const Semiautomaton& a, const std::vector<std::vector<int>>& perm_rep,
                                 std::vector<double> anchors, double epsilon)
{
    const auto cls = classify(a);
    for (const auto& sc : cls.symbols)
        if (sc.tag != Tag::identity && sc.tag != Tag::permutation)
            throw ClassError("compile_permutation: some symbol is not a bijection");
    if (int(perm_rep.size()) != a.n_symbols) throw DomainError("compile_permutation: one permutation per symbol");
    const int d = int(perm_rep.front().size());
    if (d < 1) throw DomainError("compile_permutation: empty permutation");
    for (const auto& p : perm_rep) {
        if (int(p.size()) != d) throw DomainError("compile_permutation: permutations differ in degree");
        std::vector<int> s = p;
        std::sort(s.begin(), s.end());
        for (int i = 0; i < d; ++i)
            if (s[i] != i) throw DomainError("compile_permutation: not a permutation of [0..d)");
    }
    if (anchors.empty()) anchors = default_anchors(d);
    if (int(anchors.size()) != d) throw DomainError("compile_permutation: one anchor per tuple index");
    check_anchors(anchors, epsilon);

    CompiledUnit u;
    u.kind = UnitKind::permutation;
    u.state_dim = d;
    u.n_states = a.n_states;
    u.anchors = std::move(anchors);
    u.epsilon = epsilon;
    set_bounds(u);
    for (const auto& p : perm_rep) {
        MatD R = MatD::Constant(d, d, u.x_min);
        for (int l = 0; l < d; ++l) R(l, p[l]) = u.x_max;
        u.reset.push_back(std::move(R));
        u.set.push_back(VecD::Constant(d, u.x_min));
    }

    // Every reachable tuple must stand for a single automaton map.
    std::map<std::vector<int>, std::vector<int>> seen;
    std::vector<int> id(d), qid(a.n_states);
    std::iota(id.begin(), id.end(), 0);
    std::iota(qid.begin(), qid.end(), 0);
    seen[id] = qid;
    std::vector<std::vector<int>> frontier{id};
    const std::size_t cap = 1u << 22;
    while (!frontier.empty()) {
        std::vector<std::vector<int>> nxt;
        for (const auto& t : frontier) {
            const std::vector<int> m = seen[t];
            for (int s = 0; s < a.n_symbols; ++s) {
                std::vector<int> t2(d), m2(a.n_states);
                for (int j = 0; j < d; ++j) t2[j] = t[perm_rep[s][j]];
                for (int q = 0; q < a.n_states; ++q) m2[q] = a.next(m[q], s);
                auto it = seen.find(t2);
                if (it == seen.end()) {
                    seen.emplace(t2, m2);
                    nxt.push_back(std::move(t2));
                    if (seen.size() > cap) throw DomainError("compile_permutation: group too large to tabulate");
                } else if (it->second != m2) {
                    throw CertificationError("compile_permutation: representation inconsistent with delta");
                }
            }
        }
        frontier = std::move(nxt);
    }
    for (auto& [t, m] : seen) {
        u.tuples.push_back(t);
        u.tuple_maps.push_back(m);
    }
    return u;
}

CompiledUnit compile_general(const Semiautomaton& a, double x0, double x1, double epsilon)
{
    a.validate();
    if (!std::isfinite(x0) || !std::isfinite(x1) || !(x1 - x0 > 2 * epsilon) || !(epsilon >= 0))
        throw DomainError("compile_general: need x1 - x0 > 2*epsilon");
    CompiledUnit u;
    u.kind = UnitKind::general;
    u.state_dim = a.n_states;
    u.n_states = a.n_states;
    u.anchors = {x0, x1};
    u.epsilon = epsilon;
    set_bounds(u);
    const int n = a.n_states;
    for (int s = 0; s < a.n_symbols; ++s) {
        MatD R = MatD::Constant(n, n, x0);
        for (int k = 0; k < n; ++k) R(a.next(k, s), k) = x1;
        u.reset.push_back(std::move(R));
        u.set.push_back(VecD::Constant(n, x0));
    }
    return u;
}

CompiledUnit compile_auto(const Semiautomaton& a, const std::vector<std::vector<int>>& perm_rep, double epsilon)
{
    const auto c = classify(a).overall;
    if (c == AutomatonClass::identity_reset) return compile_identity_reset(a, {}, epsilon);
    if (c == AutomatonClass::permutation && !perm_rep.empty()) return compile_permutation(a, perm_rep, {}, epsilon);
    return compile_general(a, 1.0, 2.0, epsilon);
}

void validate_cascade(const std::vector<CascadeLevel>& levels, int n_external)
{
    if (n_external < 1) throw DomainError("cascade: external alphabet must be nonempty");
    if (levels.empty()) throw DomainError("cascade: no levels");
    std::size_t width = std::size_t(n_external);
    for (std::size_t i = 0; i < levels.size(); ++i) {
        const auto& L = levels[i];
        L.a.validate();
        if (L.route.size() != width)
            throw DomainError("cascade: level " + std::to_string(i) + " route table has " +
                              std::to_string(L.route.size()) + " entries, expected " + std::to_string(width));
        for (int v : L.route)
            if (v < 0 || v >= L.a.n_symbols)
                throw DomainError("cascade: level " + std::to_string(i) + " routes to an unknown symbol");
        width *= std::size_t(L.a.n_states);
    }
}

int route_symbol(const std::vector<CascadeLevel>& levels, int n_external, std::size_t level, int sigma,
                 const std::vector<int>& states)
{
    std::size_t idx = 0, radix = 1;
    for (std::size_t j = 0; j < level; ++j) {
        idx += std::size_t(states[j]) * radix;
        radix *= std::size_t(levels[j].a.n_states);
    }
    return levels[level].route[std::size_t(sigma) + std::size_t(n_external) * idx];
}

std::vector<std::vector<int>> cascade_run(const std::vector<CascadeLevel>& levels, int n_external,
                                          const std::vector<int>& word, std::vector<int> start)
{
    validate_cascade(levels, n_external);
    if (start.empty()) start.assign(levels.size(), 0);
    if (start.size() != levels.size()) throw DomainError("cascade: one start state per level");
    std::vector<std::vector<int>> out{start};
    std::vector<int> q = start;
    for (int s : word) {
        if (s < 0 || s >= n_external) throw DomainError("cascade: symbol out of range");
        std::vector<int> nq(q.size());
        for (std::size_t i = 0; i < levels.size(); ++i)
            nq[i] = levels[i].a.next(q[i], route_symbol(levels, n_external, i, s, q));
        q = std::move(nq);
        out.push_back(q);
    }
    return out;
}

CompiledCascade compile_cascade(const std::vector<CascadeLevel>& levels, int n_external, double epsilon)
{
    validate_cascade(levels, n_external);
    CompiledCascade c;
    c.n_external = n_external;
    c.levels = levels;
    for (const auto& L : levels) c.units.push_back(compile_auto(L.a, L.perm_rep, epsilon));
    return c;
}

std::string RealizationReport::to_text() const
{
    std::ostringstream os;
    os << "words_tested " << words_tested << "\n";
    os << "steps_checked " << steps_checked << "\n";
    os << "mismatches " << mismatches.size() << "\n";
    for (const auto& m : mismatches) {
        os << "mismatch start " << m.start << " step " << m.step << " level " << m.level << " expected " << m.expected
           << " decoded " << (m.decoded < 0 ? std::string("none") : std::to_string(m.decoded)) << " word";
        for (int s : m.word) os << ' ' << s;
        os << "\n";
    }
    os << (certified() ? "certified\n" : "not certified\n");
    return os.str();
}

namespace {

struct Partial {
    std::uint64_t steps = 0;
    std::vector<Mismatch> mm;
};

RealizationReport merge(std::vector<Partial>& parts, std::size_t words)
{
    RealizationReport r;
    r.words_tested = words;
    for (auto& p : parts) {
        r.steps_checked += p.steps;
        for (auto& m : p.mm) r.mismatches.push_back(std::move(m));
    }
    return r;
}

StepPair<double> noisy(const CompiledUnit& u, int s, std::mt19937_64& g, double amp)
{
    std::uniform_real_distribution<double> d(-amp, amp);
    StepPair<double> M{u.reset[s], u.set[s]};
    for (Eigen::Index i = 0; i < M.A.size(); ++i) M.A.data()[i] += d(g);
    for (Eigen::Index i = 0; i < M.b.size(); ++i) M.b(i) += d(g);
    return M;
}

}  // namespace

RealizationReport certify(const CompiledUnit& u, const Semiautomaton& a, const std::vector<std::vector<int>>& words,
                          int workers, const Perturbation* noise)
{
    a.validate();
    if (int(u.reset.size()) != a.n_symbols || u.n_states != a.n_states)
        throw DomainError("certify: unit was compiled for a different alphabet or state set");
    std::vector<Partial> parts(words.size());
    parallel_for(words.size(), workers, [&](std::size_t w) {
        const auto& word = words[w];
        for (int q0 = 0; q0 < a.n_states; ++q0) {
            std::mt19937_64 g(noise ? noise->seed ^ (0x9e3779b97f4a7c15ULL * (w * 131 + std::uint64_t(q0) + 1)) : 0);
            VecD x = u.initial(q0);
            if (noise) {
                std::uniform_real_distribution<double> d(-noise->amplitude, noise->amplitude);
                for (Eigen::Index i = 0; i < x.size(); ++i) x(i) += d(g);
            }
            int q = q0;
            auto check = [&](std::size_t step) {
                ++parts[w].steps;
                const int got = u.decode(x, q0);
                if (got != q) {
                    parts[w].mm.push_back({word, q0, step, 0, q, got});
                    return false;
                }
                return true;
            };
            if (!check(0)) continue;
            for (std::size_t t = 0; t < word.size(); ++t) {
                const int s = word[t];
                if (s < 0 || s >= a.n_symbols) throw DomainError("certify: symbol out of range");
                q = a.next(q, s);
                x = noise ? apply(noisy(u, s, g, noise->amplitude), x) : u.step(x, s);
                if (!check(t + 1)) break;
            }
        }
    });
    return merge(parts, words.size());
}

RealizationReport certify(const CompiledCascade& c, const std::vector<std::vector<int>>& words, int workers)
{
    validate_cascade(c.levels, c.n_external);
    const std::size_t L = c.levels.size();
    std::vector<Partial> parts(words.size());
    parallel_for(words.size(), workers, [&](std::size_t w) {
        const auto& word = words[w];
        const auto want = cascade_run(c.levels, c.n_external, word);
        std::vector<VecD> x(L);
        for (std::size_t i = 0; i < L; ++i) x[i] = c.units[i].initial(0);
        std::vector<int> dec(L);
        for (std::size_t t = 0; t <= word.size(); ++t) {
            if (t > 0) {
                // routing reads the decoded pre-step states
                const int s = word[t - 1];
                std::vector<VecD> nx(L);
                for (std::size_t i = 0; i < L; ++i)
                    nx[i] = c.units[i].step(x[i], route_symbol(c.levels, c.n_external, i, s, dec));
                x = std::move(nx);
            }
            bool ok = true;
            for (std::size_t i = 0; i < L; ++i) {
                ++parts[w].steps;
                dec[i] = c.units[i].decode(x[i], 0);
                if (dec[i] != want[t][i]) {
                    parts[w].mm.push_back({word, 0, t, int(i), want[t][i], dec[i]});
                    ok = false;
                    break;
                }
            }
            if (!ok) break;
        }
    });
    return merge(parts, words.size());
}

std::vector<std::vector<int>> exhaustive_words(int n_symbols, int max_len)
{
    if (n_symbols < 1 || max_len < 0) throw DomainError("exhaustive_words: bad arguments");
    std::vector<std::vector<int>> out{{}};
    std::vector<std::vector<int>> layer{{}};
    for (int len = 1; len <= max_len; ++len) {
        std::vector<std::vector<int>> nxt;
        nxt.reserve(layer.size() * std::size_t(n_symbols));
        for (const auto& w : layer)
            for (int s = 0; s < n_symbols; ++s) {
                auto v = w;
                v.push_back(s);
                nxt.push_back(std::move(v));
            }
        out.insert(out.end(), nxt.begin(), nxt.end());
        layer = std::move(nxt);
    }
    return out;
}

std::vector<std::vector<int>> random_words(int n_symbols, std::size_t count, int max_len, std::uint64_t seed,
                                           int min_len)
{
    if (n_symbols < 1 || max_len < min_len || min_len < 0) throw DomainError("random_words: bad arguments");
    std::mt19937_64 g(seed);
    std::uniform_int_distribution<int> len(min_len, max_len), sym(0, n_symbols - 1);
    std::vector<std::vector<int>> out(count);
    for (auto& w : out) {
        w.resize(std::size_t(len(g)));
        for (auto& s : w) s = sym(g);
    }
    return out;
}

namespace {

std::string strip_comment(std::string line)
{
    auto p = line.find('#');
    if (p != std::string::npos) line.erase(p);
    return line;
}

std::string read_file(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw DomainError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

Semiautomaton parse_automaton(const std::string& text)
{
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    Semiautomaton a;
    bool header = false;
    std::vector<char> filled;
    auto fail = [&](const std::string& msg) { throw DomainError("automaton line " + std::to_string(lineno) + ": " + msg); };
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(strip_comment(line));
        std::string kw;
        if (!(ls >> kw)) continue;
        if (kw == "states") {
            std::string sym;
            if (header) fail("duplicate header");
            if (!(ls >> a.n_states >> sym >> a.n_symbols) || sym != "symbols") fail("expected `states K symbols M`");
            if (a.n_states < 1 || a.n_symbols < 1) fail("sizes must be >= 1");
            a.delta.assign(std::size_t(a.n_states) * a.n_symbols, -1);
            filled.assign(a.delta.size(), 0);
            header = true;
        } else if (kw == "delta") {
            if (!header) fail("delta before header");
            int q, s, r;
            if (!(ls >> q >> s >> r)) fail("expected `delta q sigma q'`");
            if (q < 0 || q >= a.n_states || s < 0 || s >= a.n_symbols || r < 0 || r >= a.n_states)
                fail("index out of range");
            const std::size_t i = std::size_t(q) * a.n_symbols + s;
            if (filled[i]) fail("duplicate transition");
            filled[i] = 1;
            a.delta[i] = r;
        } else {
            fail("unknown keyword " + kw);
        }
        std::string extra;
        if (ls >> extra) fail("trailing tokens");
    }
    if (!header) throw DomainError("automaton: missing header");
    for (std::size_t i = 0; i < filled.size(); ++i)
        if (!filled[i])
            throw DomainError("automaton: missing transition for state " + std::to_string(i / a.n_symbols) +
                              " symbol " + std::to_string(i % a.n_symbols));
    return a;
}

Semiautomaton load_automaton(const std::string& path) { return parse_automaton(read_file(path)); }

std::string format_automaton(const Semiautomaton& a)
{
    a.validate();
    std::ostringstream os;
    os << "states " << a.n_states << " symbols " << a.n_symbols << "\n";
    for (int q = 0; q < a.n_states; ++q)
        for (int s = 0; s < a.n_symbols; ++s) os << "delta " << q << ' ' << s << ' ' << a.next(q, s) << "\n";
    return os.str();
}

CascadeFile load_cascade(const std::string& path)
{
    std::istringstream in(read_file(path));
    const auto dir = std::filesystem::path(path).parent_path();
    CascadeFile cf;
    std::string line;
    int lineno = 0;
    auto fail = [&](const std::string& msg) {
        throw DomainError(path + " line " + std::to_string(lineno) + ": " + msg);
    };
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(strip_comment(line));
        std::string kw;
        if (!(ls >> kw)) continue;
        if (kw == "external") {
            if (!(ls >> cf.n_external)) fail("expected `external M`");
        } else if (kw == "level") {
            std::string f;
            if (!(ls >> f)) fail("expected `level <file>`");
            auto p = std::filesystem::path(f);
            if (p.is_relative()) p = dir / p;
            CascadeLevel L;
            L.a = load_automaton(p.string());
            cf.levels.push_back(std::move(L));
        } else if (kw == "route") {
            if (cf.levels.empty()) fail("route before any level");
            int v;
            while (ls >> v) cf.levels.back().route.push_back(v);
            if (!ls.eof()) fail("non-integer route entry");
        } else if (kw == "perm") {
            if (cf.levels.empty()) fail("perm before any level");
            auto& L = cf.levels.back();
            int s, v;
            if (!(ls >> s) || s < 0 || s >= L.a.n_symbols) fail("perm symbol out of range");
            std::vector<int> p;
            while (ls >> v) p.push_back(v);
            if (L.perm_rep.size() < std::size_t(L.a.n_symbols)) L.perm_rep.resize(std::size_t(L.a.n_symbols));
            L.perm_rep[std::size_t(s)] = std::move(p);
        } else {
            fail("unknown keyword " + kw);
        }
    }
    for (auto& L : cf.levels)
        for (const auto& p : L.perm_rep)
            if (p.empty()) throw DomainError(path + ": perm given for some symbols only");
    validate_cascade(cf.levels, cf.n_external);
    return cf;
}

}  // namespace mm
