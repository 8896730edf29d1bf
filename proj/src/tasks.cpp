#include "minmax/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <random>
#include <set>

#include "minmax/errors.hpp"

namespace mm {

using nlohmann::json;

void SequencesSpec::validate() const
{
    if (n < 1) throw DomainError("sequences: n must be >= 1");
    if (vocab < 1) throw DomainError("sequences: empty vocabulary");
    if (events.size() != 2 || resets.size() != 2) throw DomainError("sequences: two channels expected");
    auto check = [&](const std::vector<int>& s, const char* what) {
        if (s.empty()) throw DomainError(std::string("sequences: empty ") + what);
        for (int t : s)
            if (t < 0 || t >= vocab) throw DomainError(std::string("sequences: token out of range in ") + what);
    };
    for (int i = 0; i < 2; ++i) {
        if (int(events[i].size()) != n) throw DomainError("sequences: each channel needs n event sets");
        for (const auto& e : events[i]) check(e, "event set");
        check(resets[i], "reset set");
    }
}

SequencesSpec sequences_defaults(int n)
{
    if (n < 1) throw DomainError("sequences: n must be >= 1");
    SequencesSpec s;
    s.n = n;
    int tok = 0;
    s.events.assign(2, {});
    for (int i = 0; i < 2; ++i)
        for (int k = 0; k < n; ++k) {
            s.events[i].push_back({tok, tok + 1, tok + 2});
            tok += 3;
        }
    s.resets = {{tok, tok + 1}, {tok + 2, tok + 3}};
    tok += 4;
    s.vocab = tok + 4;
    return s;
}

int TaskSpec::vocab() const
{
    switch (kind) {
    case TaskKind::latching: return 20 * n;
    case TaskKind::sequences: return seq.events.empty() ? sequences_defaults(n).vocab : seq.vocab;
    default: return n + 2;
    }
}

int TaskSpec::n_classes() const { return kind == TaskKind::sequences ? 4 : n; }

void TaskSpec::validate() const
{
    if (n < 1) throw DomainError("task: n must be >= 1");
    if (kind == TaskKind::induction_heads && window < 1) throw DomainError("task: window must be >= 1");
    if (kind == TaskKind::sequences && !seq.events.empty()) {
        seq.validate();
        if (seq.n != n) throw DomainError("task: sequences n differs from its event sets");
    }
}

TaskKind parse_task_kind(const std::string& s)
{
    if (s == "latching") return TaskKind::latching;
    if (s == "sequences") return TaskKind::sequences;
    if (s == "induction_heads") return TaskKind::induction_heads;
    throw DomainError("unknown task " + s);
}

const char* to_string(TaskKind k)
{
    switch (k) {
    case TaskKind::latching: return "latching";
    case TaskKind::sequences: return "sequences";
    default: return "induction_heads";
    }
}

namespace {

int uniform(std::mt19937_64& g, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(g); }

}  // namespace

TaskSample gen_latching(int n, std::size_t T, std::uint64_t seed)
{
    if (n < 1 || T < 1) throw DomainError("latching: need n >= 1 and T >= 1");
    std::mt19937_64 g(seed);
    TaskSample s;
    s.tokens.resize(T);
    s.tokens[0] = uniform(g, 0, n - 1);
    for (std::size_t t = 1; t < T; ++t) s.tokens[t] = uniform(g, 0, 20 * n - 1);
    s.targets.assign(T, s.tokens[0]);
    s.mask.assign(T, 1);
    return s;
}

TaskSample gen_sequences(const SequencesSpec& spec, std::size_t T, std::uint64_t seed)
{
    spec.validate();
    if (T < 1) throw DomainError("sequences: T must be >= 1");
    std::mt19937_64 g(seed);
    std::vector<std::vector<std::vector<char>>> in_event(2, std::vector<std::vector<char>>(spec.n));
    std::vector<std::vector<char>> in_reset(2);
    for (int i = 0; i < 2; ++i) {
        for (int k = 0; k < spec.n; ++k) {
            in_event[i][k].assign(spec.vocab, 0);
            for (int t : spec.events[i][k]) in_event[i][k][t] = 1;
        }
        in_reset[i].assign(spec.vocab, 0);
        for (int t : spec.resets[i]) in_reset[i][t] = 1;
    }
    TaskSample s;
    s.tokens.resize(T);
    s.targets.resize(T);
    s.mask.assign(T, 1);
    int prog[2] = {0, 0};
    for (std::size_t t = 0; t < T; ++t) {
        const int a = uniform(g, 0, spec.vocab - 1);
        s.tokens[t] = a;
        int y = 0;
        for (int i = 0; i < 2; ++i) {
            if (prog[i] < spec.n) {
                if (in_reset[i][a]) prog[i] = 0;
                if (in_event[i][prog[i]][a]) ++prog[i];
            }
            y |= (prog[i] == spec.n) << i;
        }
        s.targets[t] = y;
    }
    return s;
}

TaskSample gen_induction_heads(int n, std::size_t T, std::uint64_t seed, int window)
{
    if (n < 1 || window < 1) throw DomainError("induction heads: need n >= 1 and window >= 1");
    if (T < 3 || std::size_t(window) + 2 > T)
        throw DomainError("induction heads: T = " + std::to_string(T) + " cannot fit a marker window of " +
                          std::to_string(window));
    std::mt19937_64 g(seed);
    // 0-based positions: first marker p, payload p+1, second marker r
    const std::size_t p = std::size_t(uniform(g, 0, window - 1));
    const int payload = uniform(g, 1, n);
    const std::size_t r = std::size_t(uniform(g, int(p) + 2, int(T) - 1));
    TaskSample s;
    s.tokens.resize(T);
    for (std::size_t t = 0; t < T; ++t) {
        if (t == p || t == r) {
            s.tokens[t] = 0;
        } else if (t == p + 1) {
            s.tokens[t] = payload;
        } else if (t > p + 1 && t < r) {
            // candidates other than the payload, or the neutral filler
            int v = uniform(g, 1, n);
            if (v == payload) v = n + 1;
            s.tokens[t] = v;
        } else {
            s.tokens[t] = uniform(g, 1, n + 1);
        }
    }
    s.targets.assign(T, 0);
    s.mask.assign(T, 0);
    s.targets[r] = payload - 1;
    s.mask[r] = 1;
    return s;
}

TaskSample generate(const TaskSpec& spec, std::size_t T, std::uint64_t seed)
{
    spec.validate();
    switch (spec.kind) {
    case TaskKind::latching: return gen_latching(spec.n, T, seed);
    case TaskKind::sequences:
        return gen_sequences(spec.seq.events.empty() ? sequences_defaults(spec.n) : spec.seq, T, seed);
    default: return gen_induction_heads(spec.n, T, seed, spec.window);
    }
}

std::vector<TaskSample> generate_set(const TaskSpec& spec, const std::vector<std::size_t>& lengths,
                                     std::size_t count, std::uint64_t seed)
{
    if (lengths.empty()) throw DomainError("generate_set: no lengths");
    std::mt19937_64 g(seed);
    std::vector<TaskSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t T = lengths[std::size_t(g() % lengths.size())];
        out.push_back(generate(spec, T, g()));
    }
    return out;
}

void dump_jsonl(const std::string& path, const std::vector<TaskSample>& samples)
{
    std::ofstream out(path);
    if (!out) throw DomainError("cannot write " + path);
    for (const auto& s : samples) {
        json j;
        j["length"] = s.length();
        j["tokens"] = s.tokens;
        j["targets"] = s.targets;
        std::vector<int> m(s.mask.begin(), s.mask.end());
        j["mask"] = m;
        out << j.dump() << "\n";
    }
}

std::vector<TaskSample> load_jsonl(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw DomainError("cannot open " + path);
    std::vector<TaskSample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            TaskSample s;
            const std::size_t T = j.at("length").get<std::size_t>();
            s.tokens = j.at("tokens").get<std::vector<int>>();
            s.targets = j.at("targets").get<std::vector<int>>();
            for (int v : j.at("mask").get<std::vector<int>>()) s.mask.push_back(std::uint8_t(v != 0));
            if (s.tokens.size() != T || s.targets.size() != T || s.mask.size() != T)
                throw DomainError("length mismatch");
            out.push_back(std::move(s));
        } catch (const std::exception& e) {
            throw DomainError(path + " line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace mm
