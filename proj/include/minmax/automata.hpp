#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "minmax/algebra.hpp"

namespace mm {

// States and symbols are 0-based.
struct Semiautomaton {
    int n_states = 1;
    int n_symbols = 1;
    std::vector<int> delta;  // delta[q * n_symbols + sigma]

    int next(int q, int sigma) const { return delta[std::size_t(q) * n_symbols + sigma]; }
    int run(int q, const std::vector<int>& word) const;
    void validate() const;
};

Semiautomaton make_automaton(int n_states, int n_symbols, const std::vector<std::vector<int>>& table);

enum class Tag { identity, constant, permutation, general };
enum class AutomatonClass { identity_reset, permutation, general };

struct SymbolClass {
    Tag tag = Tag::general;
    int target = -1;        // constant symbols
    std::vector<int> perm;  // bijective symbols: q -> delta(q, sigma)
};

struct Classification {
    std::vector<SymbolClass> symbols;
    AutomatonClass overall = AutomatonClass::general;
};

Classification classify(const Semiautomaton& a);
const char* to_string(AutomatonClass c);
const char* to_string(Tag t);

enum class UnitKind { identity_reset, permutation, general };

struct CompiledUnit {
    UnitKind kind = UnitKind::general;
    int state_dim = 1;
    int n_states = 1;
    std::vector<MatD> reset;  // one per symbol
    std::vector<VecD> set;
    std::vector<double> anchors;
    double epsilon = 0.25;
    double x_min = 0, x_max = 0;
    // permutation units: reachable index tuples and the automaton map each stands for
    std::vector<std::vector<int>> tuples;
    std::vector<std::vector<int>> tuple_maps;

    VecD initial(int q) const;
    VecD step(const VecD& x, int sigma) const;
    // index of the anchor interval holding v, -1 if none
    int component(double v) const;
    // automaton state encoded by x for a run started at `start`, -1 if undecodable
    int decode(const VecD& x, int start) const;
    bool tables_closed() const;
};

inline constexpr double kDefaultEpsilon = 0.25;
std::vector<double> default_anchors(int k);

CompiledUnit compile_identity_reset(const Semiautomaton& a, std::vector<double> anchors = {},
                                    double epsilon = kDefaultEpsilon);
// perm_rep[sigma] is a permutation of [0..d); component j of the next tuple is
// component perm_rep[sigma][j] of the current one.
CompiledUnit compile_permutation(const Semiautomaton& a, const std::vector<std::vector<int>>& perm_rep,
                                 std::vector<double> anchors = {}, double epsilon = kDefaultEpsilon);
CompiledUnit compile_general(const Semiautomaton& a, double x0 = 1.0, double x1 = 2.0,
                             double epsilon = kDefaultEpsilon);
// picks the compiler by class; permutation only when a representation is given
CompiledUnit compile_auto(const Semiautomaton& a, const std::vector<std::vector<int>>& perm_rep = {},
                          double epsilon = kDefaultEpsilon);

// Level i reads the external symbol and the pre-step states of levels < i:
// route[sigma + M * (q_0 + n_0 * (q_1 + n_1 * ...))] is its own symbol.
struct CascadeLevel {
    Semiautomaton a;
    std::vector<int> route;
    std::vector<std::vector<int>> perm_rep;
};

struct CompiledCascade {
    int n_external = 1;
    std::vector<CascadeLevel> levels;
    std::vector<CompiledUnit> units;
};

void validate_cascade(const std::vector<CascadeLevel>& levels, int n_external);
int route_symbol(const std::vector<CascadeLevel>& levels, int n_external, std::size_t level, int sigma,
                 const std::vector<int>& states);
// joint states after each symbol (row 0 is the start)
std::vector<std::vector<int>> cascade_run(const std::vector<CascadeLevel>& levels, int n_external,
                                          const std::vector<int>& word, std::vector<int> start = {});
CompiledCascade compile_cascade(const std::vector<CascadeLevel>& levels, int n_external,
                                double epsilon = kDefaultEpsilon);

struct Mismatch {
    std::vector<int> word;
    int start = 0;
    std::size_t step = 0;
    int level = 0;
    int expected = 0;
    int decoded = -1;  // -1: outside every interval
};

struct RealizationReport {
    std::uint64_t words_tested = 0;
    std::uint64_t steps_checked = 0;
    std::vector<Mismatch> mismatches;
    bool certified() const { return mismatches.empty(); }
    std::string to_text() const;
};

// Table noise: every reset/set entry and the initial state get a fresh uniform
// offset of at most `amplitude` on every step.
struct Perturbation {
    double amplitude = 0.0;
    std::uint64_t seed = 0;
};

// every word is run from every start state
RealizationReport certify(const CompiledUnit& u, const Semiautomaton& a, const std::vector<std::vector<int>>& words,
                          int workers = 1, const Perturbation* noise = nullptr);
RealizationReport certify(const CompiledCascade& c, const std::vector<std::vector<int>>& words, int workers = 1);

std::vector<std::vector<int>> exhaustive_words(int n_symbols, int max_len);
std::vector<std::vector<int>> random_words(int n_symbols, std::size_t count, int max_len, std::uint64_t seed,
                                           int min_len = 0);

// header `states K symbols M`, then `delta q sigma q'` lines; '#' starts a comment
Semiautomaton parse_automaton(const std::string& text);
Semiautomaton load_automaton(const std::string& path);
std::string format_automaton(const Semiautomaton& a);

// `external M`, then per level: `level <file>`, `route v...`, optional `perm sigma p...`
struct CascadeFile {
    int n_external = 1;
    std::vector<CascadeLevel> levels;
};
CascadeFile load_cascade(const std::string& path);

}  // namespace mm
