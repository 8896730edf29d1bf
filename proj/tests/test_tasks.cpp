#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <set>

#include "minmax/errors.hpp"
#include "minmax/tasks.hpp"

using namespace mm;

namespace {

bool in(const std::vector<int>& s, int v) { return std::find(s.begin(), s.end(), v) != s.end(); }

// y_i on the prefix a[0..t]: positions j_1 < ... < j_n with a[j_k] in E_{i,k}
// and no restart token in (j_1, j_n]
int relabel_sequences(const SequencesSpec& sp, const std::vector<int>& a, std::size_t t)
{
    int y = 0;
    for (int i = 0; i < 2; ++i) {
        bool found = false;
        for (std::size_t j1 = 0; j1 <= t && !found; ++j1) {
            if (!in(sp.events[i][0], a[j1])) continue;
            std::size_t end = t;
            for (std::size_t p = j1 + 1; p <= t; ++p)
                if (in(sp.resets[i], a[p])) {
                    end = p - 1;
                    break;
                }
            // can[k][p]: events k..n-1 matchable inside [p, end]
            const int n = sp.n;
            std::vector<std::vector<char>> can(n + 1, std::vector<char>(end + 2, 0));
            for (std::size_t p = 0; p <= end + 1; ++p) can[n][p] = 1;
            for (int k = n - 1; k >= 1; --k)
                for (std::size_t p = end + 1; p-- > j1 + 1;)
                    can[k][p] = can[k][p + 1] || (in(sp.events[i][k], a[p]) && can[k + 1][p + 1]);
            found = n == 1 || (j1 + 1 <= end + 1 && can[1][j1 + 1]);
        }
        y |= int(found) << i;
    }
    return y;
}

double chi2(const std::vector<int>& counts)
{
    double total = 0;
    for (int c : counts) total += c;
    const double e = total / double(counts.size());
    double s = 0;
    for (int c : counts) s += (c - e) * (c - e) / e;
    return s;
}

}  // namespace

TEST_CASE("latching")
{
    auto s = gen_latching(3, 1, 5);
    CHECK(s.targets[0] == s.tokens[0]);
    for (int seed = 0; seed < 20; ++seed) {
        auto one = gen_latching(1, 10, std::uint64_t(seed));
        CHECK(one.tokens[0] == 0);
        for (int t : one.targets) CHECK(t == 0);
    }
    std::vector<int> counts(4, 0);
    for (int seed = 0; seed < 10000; ++seed) ++counts[gen_latching(4, 2, std::uint64_t(seed)).tokens[0]];
    CHECK(chi2(counts) < 11.345);  // 3 dof, 1%
    for (int seed = 0; seed < 1000; ++seed) {
        auto x = gen_latching(4, 1 + seed % 40, std::uint64_t(seed));
        for (std::size_t t = 0; t < x.length(); ++t) {
            CHECK(x.targets[t] == x.tokens[0]);
            CHECK(x.mask[t] == 1);
            CHECK(x.tokens[t] < 80);
        }
    }
    CHECK_THROWS_AS(gen_latching(0, 5, 1), DomainError);
    CHECK_THROWS_AS(gen_latching(2, 0, 1), DomainError);
}

TEST_CASE("sequences labels match a direct subsequence search")
{
    for (int n : {1, 2, 3}) {
        auto sp = sequences_defaults(n);
        CHECK(sp.vocab == 6 * n + 8);
        for (int seed = 0; seed < 1000 / 3 + 1; ++seed) {
            auto s = gen_sequences(sp, 1 + seed % 40, std::uint64_t(seed));
            for (std::size_t t = 0; t < s.length(); ++t) CHECK(s.targets[t] == relabel_sequences(sp, s.tokens, t));
        }
    }
    // overlapping sets with a restart token that also starts a match
    SequencesSpec o;
    o.n = 2;
    o.vocab = 5;
    o.events = {{{0, 1}, {1, 2}}, {{2}, {0}}};
    o.resets = {{3, 0}, {4}};
    for (int seed = 0; seed < 300; ++seed) {
        auto s = gen_sequences(o, 25, std::uint64_t(seed));
        for (std::size_t t = 0; t < s.length(); ++t) CHECK(s.targets[t] == relabel_sequences(o, s.tokens, t));
    }
}

TEST_CASE("sequences hand cases")
{
    SequencesSpec sp;
    sp.n = 2;
    sp.vocab = 7;
    sp.events = {{{0}, {1}}, {{2}, {3}}};
    sp.resets = {{4}, {5}};
    auto label = [&](std::vector<int> w) {
        std::vector<int> out;
        for (std::size_t t = 0; t < w.size(); ++t) out.push_back(relabel_sequences(sp, w, t));
        return out;
    };
    CHECK(label({0, 6, 1, 4}) == std::vector<int>{0, 0, 1, 1});
    CHECK(label({0, 4, 1, 0, 1}) == std::vector<int>{0, 0, 0, 0, 1});
    CHECK(label({2, 3, 0, 1}) == std::vector<int>{0, 2, 2, 3});
    sp.resets[0] = {};
    CHECK_THROWS_AS(gen_sequences(sp, 5, 0), DomainError);
}

TEST_CASE("induction heads")
{
    // minimal layout
    auto m = gen_induction_heads(5, 3, 1, 1);
    CHECK(m.tokens[0] == 0);
    CHECK(m.tokens[2] == 0);
    CHECK(m.targets[2] == m.tokens[1] - 1);
    CHECK((m.mask[0] == 0 && m.mask[1] == 0 && m.mask[2] == 1));

    std::vector<int> counts(16, 0);
    for (int seed = 0; seed < 10000; ++seed) {
        auto s = gen_induction_heads(16, 64, std::uint64_t(seed), 30);
        std::vector<std::size_t> markers;
        for (std::size_t t = 0; t < s.length(); ++t)
            if (s.tokens[t] == 0) markers.push_back(t);
        REQUIRE(markers.size() == 2);
        CHECK(markers[0] < 30);
        const int payload = s.tokens[markers[0] + 1];
        CHECK(payload >= 1);
        CHECK(payload <= 16);
        for (std::size_t t = markers[0] + 2; t < markers[1]; ++t) CHECK(s.tokens[t] != payload);
        for (std::size_t t = 0; t < s.length(); ++t) {
            CHECK(s.mask[t] == (t == markers[1]));
            CHECK(s.tokens[t] <= 17);
        }
        CHECK(s.targets[markers[1]] == payload - 1);
        ++counts[s.targets[markers[1]]];
    }
    CHECK(chi2(counts) < 30.578);  // 15 dof, 1%
    CHECK_THROWS_AS(gen_induction_heads(16, 31, 1, 30), DomainError);
    CHECK_NOTHROW(gen_induction_heads(16, 32, 1, 30));
}

TEST_CASE("determinism, task specs and dumps")
{
    TaskSpec sp;
    sp.kind = TaskKind::sequences;
    sp.n = 2;
    auto a = generate_set(sp, {8, 16}, 50, 3), b = generate_set(sp, {8, 16}, 50, 3);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].tokens == b[i].tokens);
        CHECK(a[i].targets == b[i].targets);
    }
    CHECK(sp.vocab() == 20);
    CHECK(sp.n_classes() == 4);
    CHECK(parse_task_kind("induction_heads") == TaskKind::induction_heads);
    CHECK_THROWS_AS(parse_task_kind("copy"), DomainError);

    TaskSpec ih;
    ih.kind = TaskKind::induction_heads;
    ih.n = 16;
    auto c = generate_set(ih, {40, 64}, 30, 9);
    const std::string path = "test_tasks_dump.jsonl";
    dump_jsonl(path, c);
    auto back = load_jsonl(path);
    REQUIRE(back.size() == c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
        CHECK(back[i].tokens == c[i].tokens);
        CHECK(back[i].targets == c[i].targets);
        CHECK(back[i].mask == c[i].mask);
    }
    std::remove(path.c_str());
}
