#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "minmax/automata.hpp"
#include "minmax/config.hpp"
#include "minmax/errors.hpp"
#include "minmax/recurrence.hpp"
#include "minmax/training.hpp"
#include "verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mm;

namespace {

enum Exit { ok = 0, bad_input = 1, numeric = 2, verify_failed = 3 };

// MINMAX_SEQ_LOG: 0 quiet, 1 log points (default), 2 also per-suite details
int log_level()
{
    const char* v = std::getenv("MINMAX_SEQ_LOG");
    if (!v || !*v) return 1;
    return std::atoi(v);
}

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path prepare_out_dir(const std::string& dir)
{
    fs::path p = dir.empty() ? fs::path(".") : fs::path(dir);
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw ConfigError("cannot create output directory " + p.string() + ": " + ec.message());
    return p;
}

std::string fmt_acc(double a)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", a);
    return buf;
}

void write_eval_table(const fs::path& path, const std::vector<std::size_t>& lengths, std::size_t samples,
                      const std::vector<double>& acc)
{
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << "length\tsamples\taccuracy\n";
    for (std::size_t i = 0; i < lengths.size(); ++i)
        out << lengths[i] << "\t" << samples << "\t" << fmt_acc(acc[i]) << "\n";
}

void print_eval_table(const std::vector<std::size_t>& lengths, std::size_t samples, const std::vector<double>& acc)
{
    std::printf("%10s %8s %10s\n", "length", "samples", "accuracy");
    for (std::size_t i = 0; i < lengths.size(); ++i) std::printf("%10zu %8zu %10.6f\n", lengths[i], samples, acc[i]);
}

struct TrainArgs {
    std::string config, out_dir = ".", resume;
    std::uint64_t seed = 0;
    int workers = 0;
    double budget = -1;
    std::uint64_t max_steps = 0;
    bool has_seed = false, skip_eval = false;
};

int cmd_train(const TrainArgs& a)
{
    RunConfig rc = load_config(a.config);
    TrainConfig& tc = rc.train;
    if (a.has_seed) tc.seed = a.seed;
    if (a.workers > 0) tc.workers = a.workers;
    if (a.budget >= 0) tc.budget_seconds = a.budget;
    if (a.max_steps > 0) tc.max_steps = a.max_steps;
    const fs::path out = prepare_out_dir(a.out_dir);
    tc.metrics_path = (out / "metrics.jsonl").string();
    tc.checkpoint_path = (out / "model.ckpt").string();

    LoadedModel resumed;
    if (!a.resume.empty()) {
        try {
            resumed = load_model(a.resume);
        } catch (const std::exception& e) {
            throw ConfigError(std::string("resume: ") + e.what());
        }
        if (resumed.task.vocab() != tc.task.vocab() || resumed.task.n_classes() != tc.task.n_classes())
            throw ConfigError("resume: checkpoint task does not match the config");
    } else {
        std::ofstream(tc.metrics_path, std::ios::trunc);
    }
    {
        std::ofstream cj(out / "config.json");
        cj << config_to_json(rc).dump(2) << "\n";
    }
    const int verbose = log_level();
    if (verbose >= 1) {
        std::fprintf(stderr, "training %s(%d), %llu parameters, %llu steps, seed %llu\n", to_string(tc.task.kind),
                     tc.task.n, (unsigned long long)count_model_params(tc.dims, tc.task.vocab()),
                     (unsigned long long)tc.max_steps, (unsigned long long)tc.seed);
        tc.on_log = [](const Metrics& m) { std::fprintf(stderr, "%s\n", m.to_json().c_str()); };
    }

    TrainResult r;
    try {
        r = a.resume.empty() ? train(tc) : train(tc, &resumed.model, &resumed.adam);
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric abort: %s\n", e.what());
        return numeric;
    }
    std::printf("steps %llu%s%s\n", (unsigned long long)r.steps, r.budget_exhausted ? " (budget exhausted)" : "",
                r.target_reached ? " (target reached)" : "");
    if (!r.history.empty()) {
        const Metrics& last = r.history.back();
        std::printf("final train loss %.6g\n", last.train_loss);
        for (const auto& [len, acc] : last.val_accuracy) std::printf("val accuracy @%zu %.6f\n", len, acc);
    }
    if (!a.skip_eval && !rc.eval.lengths.empty()) {
        auto acc = evaluate(r.model, tc.task, rc.eval.lengths, rc.eval.samples, rc.eval.seed, tc.workers);
        print_eval_table(rc.eval.lengths, rc.eval.samples, acc);
        write_eval_table(out / "eval.tsv", rc.eval.lengths, rc.eval.samples, acc);
    }
    std::printf("checkpoint %s\n", tc.checkpoint_path.c_str());
    return ok;
}

struct EvalArgs {
    std::string checkpoint, config, out_dir;
    std::vector<std::size_t> lengths;
    std::size_t samples = 0;
    std::uint64_t seed = 1;
    bool has_seed = false;
    int workers = 1;
};

int cmd_eval(EvalArgs a)
{
    LoadedModel lm;
    try {
        lm = load_model(a.checkpoint);
    } catch (const std::exception& e) {
        throw ConfigError("checkpoint: " + std::string(e.what()));
    }
    TaskSpec task = lm.task;
    EvalConfig ec;
    if (!a.config.empty()) {
        RunConfig rc = load_config(a.config);
        task = rc.train.task;
        ec = rc.eval;
        if (task.vocab() != lm.model.embed.cols() || task.n_classes() != lm.model.net.dims.d_out)
            throw ConfigError("config task does not match the checkpoint dimensions");
        if (rc.train.dims.d_in != lm.model.net.dims.d_in || rc.train.dims.n_layers != lm.model.net.dims.n_layers ||
            rc.train.dims.d_model != lm.model.net.dims.d_model)
            throw ConfigError("config model does not match the checkpoint dimensions");
    }
    if (!a.lengths.empty()) ec.lengths = a.lengths;
    if (a.samples > 0) ec.samples = a.samples;
    if (a.has_seed) ec.seed = a.seed;
    if (ec.lengths.empty()) throw ConfigError("eval: no lengths given");
    for (std::size_t L : ec.lengths)
        if (L < 1 || (task.kind == TaskKind::induction_heads && L < std::size_t(task.window) + 2))
            throw ConfigError("eval: length " + std::to_string(L) + " is not admissible for the task");
    auto acc = evaluate(lm.model, task, ec.lengths, ec.samples, ec.seed, a.workers);
    print_eval_table(ec.lengths, ec.samples, acc);
    if (!a.out_dir.empty()) write_eval_table(prepare_out_dir(a.out_dir) / "eval.tsv", ec.lengths, ec.samples, acc);
    return ok;
}

int cmd_verify(const std::string& suite, const cli::VerifyOptions& o)
{
    std::vector<std::string> suites;
    if (suite == "all")
        suites = {"scan", "grad", "automata", "stability"};
    else
        suites = {suite};
    int code = ok;
    for (const auto& s : suites) {
        const auto t0 = std::chrono::steady_clock::now();
        cli::SuiteResult r = cli::run_suite(s, o);
        std::printf("%-10s %s  checks %llu  failures %llu  (%.2f s)\n", s.c_str(), r.passed() ? "PASS" : "FAIL",
                    (unsigned long long)r.checks, (unsigned long long)r.failures, seconds_since(t0));
        if (!r.details.empty() && (log_level() >= 1 || !r.passed())) std::printf("  %s\n", r.details.dump().c_str());
        if (!r.passed()) {
            std::printf("  first counterexample: %s\n", r.counterexample.dump().c_str());
            code = verify_failed;
        }
    }
    return code;
}

struct BenchArgs {
    std::vector<std::size_t> T{64, 128, 256, 512, 1024};
    std::vector<int> N{1, 2, 3, 4, 8};
    std::string mode = "both", out_dir;
    std::uint64_t seed = 0;
};

RecurrenceInput<double> bench_instance(std::mt19937_64& g, std::size_t T, int N)
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

int cmd_bench(const BenchArgs& a)
{
    if (a.mode != "sequential" && a.mode != "scan" && a.mode != "both")
        throw ConfigError("bench: mode must be sequential, scan or both");
    for (std::size_t T : a.T)
        if (T < 1) throw ConfigError("bench: T must be >= 1");
    for (int N : a.N)
        if (N < 1) throw ConfigError("bench: N must be >= 1");
    std::mt19937_64 g(a.seed);
    // envelope constant from the N = 2, T = 8 calibration instance
    const double c = double(op_counter_eval(bench_instance(g, 8, 2), EvalMode::scan).second.oplus) / (8.0 * 8.0);
    std::vector<std::string> modes;
    if (a.mode != "scan") modes.push_back("sequential");
    if (a.mode != "sequential") modes.push_back("scan");
    std::ofstream tsv;
    if (!a.out_dir.empty()) {
        tsv.open(prepare_out_dir(a.out_dir) / "bench.tsv");
        tsv << "mode\tT\tN\toplus\todot\tseconds\tratio\tenvelope\n";
    }
    std::printf("scan envelope c = %.6g (N=2, T=8)\n", c);
    std::printf("%-10s %7s %3s %12s %12s %10s %8s %s\n", "mode", "T", "N", "oplus", "odot", "seconds", "ratio",
                "envelope");
    for (const auto& m : modes)
        for (int N : a.N)
            for (std::size_t T : a.T) {
                auto in = bench_instance(g, T, N);
                const bool seq = m == "sequential";
                auto cnt = op_counter_eval(in, seq ? EvalMode::sequential : EvalMode::scan).second;
                const auto t0 = std::chrono::steady_clock::now();
                auto X = seq ? seq_rec_eval(in) : parallel_rec_eval(in, 1);
                const double sec = seconds_since(t0);
                (void)X;
                const double n = N, ratio = seq ? double(cnt.oplus) / (double(T) * n * n)
                                                : double(cnt.oplus) / (double(T) * n * n * n);
                const char* env = seq ? "-" : (ratio <= c ? "within" : "above");
                std::printf("%-10s %7zu %3d %12llu %12llu %10.6f %8.4f %s\n", m.c_str(), T, N,
                            (unsigned long long)cnt.oplus, (unsigned long long)cnt.odot, sec, ratio, env);
                if (tsv)
                    tsv << m << "\t" << T << "\t" << N << "\t" << cnt.oplus << "\t" << cnt.odot << "\t" << sec << "\t"
                        << ratio << "\t" << env << "\n";
            }
    return ok;
}

struct CertifyArgs {
    std::string automaton, cascade, compiler = "auto";
    int max_len = 8;
    std::size_t random = 0;
    int random_len = 64;
    double noise = 0;
    double epsilon = kDefaultEpsilon;
    std::uint64_t seed = 0;
    int workers = 1;
};

int cmd_certify(const CertifyArgs& a)
{
    if (a.automaton.empty() == a.cascade.empty()) throw ConfigError("certify: give exactly one of --automaton, --cascade");
    if (a.max_len < 0 || a.random_len < 0) throw ConfigError("certify: word lengths must be >= 0");
    auto words_for = [&](int m) {
        auto w = exhaustive_words(m, a.max_len);
        if (a.random > 0) {
            auto r = random_words(m, a.random, a.random_len, a.seed);
            w.insert(w.end(), r.begin(), r.end());
        }
        return w;
    };
    RealizationReport rep;
    try {
        if (!a.automaton.empty()) {
            Semiautomaton s = load_automaton(a.automaton);
            const Classification cls = classify(s);
            std::printf("automaton: %d states, %d symbols, class %s\n", s.n_states, s.n_symbols,
                        to_string(cls.overall));
            std::vector<std::vector<int>> rep_perm;
            if (cls.overall == AutomatonClass::permutation)
                for (const auto& sc : cls.symbols) {
                    // tuple components move by the inverse permutation
                    std::vector<int> inv(sc.perm.size());
                    for (std::size_t q = 0; q < inv.size(); ++q) inv[std::size_t(sc.perm[q])] = int(q);
                    rep_perm.push_back(inv);
                }
            CompiledUnit u;
            if (a.compiler == "auto")
                u = compile_auto(s, rep_perm, a.epsilon);
            else if (a.compiler == "identity_reset")
                u = compile_identity_reset(s, {}, a.epsilon);
            else if (a.compiler == "permutation")
                u = compile_permutation(s, rep_perm, {}, a.epsilon);
            else if (a.compiler == "general")
                u = compile_general(s, 1.0, 2.0, a.epsilon);
            else
                throw ConfigError("certify: unknown compiler " + a.compiler);
            std::printf("unit: state dimension %d, interval radius %g\n", u.state_dim, u.epsilon);
            Perturbation p{a.noise, a.seed};
            rep = certify(u, s, words_for(s.n_symbols), a.workers, a.noise > 0 ? &p : nullptr);
        } else {
            CascadeFile cf = load_cascade(a.cascade);
            CompiledCascade cc = compile_cascade(cf.levels, cf.n_external, a.epsilon);
            std::printf("cascade: %zu levels, %d external symbols\n", cf.levels.size(), cf.n_external);
            rep = certify(cc, words_for(cf.n_external), a.workers);
        }
    } catch (const ClassError& e) {
        throw ConfigError(e.what());
    } catch (const DomainError& e) {
        throw ConfigError(e.what());
    } catch (const CertificationError& e) {
        std::printf("not certified: %s\n", e.what());
        return verify_failed;
    }
    std::printf("%s\n", rep.to_text().c_str());
    return rep.certified() ? ok : verify_failed;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"MinMax recurrent neural cascades"};
    app.require_subcommand(1);

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "train a model from a config file");
    tr->add_option("--config", ta.config, "JSON config")->required();
    tr->add_option("--seed", ta.seed, "override train.seed")->each([&](const std::string&) { ta.has_seed = true; });
    tr->add_option("--workers", ta.workers, "worker threads")->check(CLI::PositiveNumber);
    tr->add_option("--budget-seconds", ta.budget, "wall-clock budget");
    tr->add_option("--out-dir", ta.out_dir, "metrics, checkpoint and tables");
    tr->add_option("--max-steps", ta.max_steps, "override train.max_steps");
    tr->add_option("--resume", ta.resume, "checkpoint to continue from");
    tr->add_flag("--no-eval", ta.skip_eval, "skip the post-training evaluation");

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "accuracy per length for a checkpoint");
    ev->add_option("--checkpoint", ea.checkpoint)->required();
    ev->add_option("--config", ea.config, "task and eval section; must match the checkpoint");
    ev->add_option("--lengths", ea.lengths, "sequence lengths")->delimiter(',');
    ev->add_option("--samples", ea.samples, "samples per length");
    ev->add_option("--seed", ea.seed)->each([&](const std::string&) { ea.has_seed = true; });
    ev->add_option("--workers", ea.workers)->check(CLI::PositiveNumber);
    ev->add_option("--out-dir", ea.out_dir, "writes eval.tsv");

    std::string suite;
    cli::VerifyOptions vo;
    auto* vf = app.add_subcommand("verify", "run a property suite");
    vf->add_option("suite", suite, "scan, grad, automata, stability or all")
        ->required()
        ->check(CLI::IsMember({"scan", "grad", "automata", "stability", "all"}));
    vf->add_option("--seed", vo.seed);
    vf->add_option("--workers", vo.workers)->check(CLI::PositiveNumber);
    vf->add_flag("--inject-anchor-bug", vo.inject_anchor_bug, "squeeze compiled anchors (negative control)");

    BenchArgs ba;
    auto* bn = app.add_subcommand("bench", "operation counts and timings of the recurrence");
    bn->add_option("--T", ba.T, "sequence lengths")->delimiter(',');
    bn->add_option("--N", ba.N, "state dimensions")->delimiter(',');
    bn->add_option("--mode", ba.mode, "sequential, scan or both");
    bn->add_option("--seed", ba.seed);
    bn->add_option("--out-dir", ba.out_dir, "writes bench.tsv");

    CertifyArgs ca;
    auto* cf = app.add_subcommand("certify", "compile a semiautomaton or cascade and certify it on words");
    cf->add_option("--automaton", ca.automaton);
    cf->add_option("--cascade", ca.cascade);
    cf->add_option("--compiler", ca.compiler, "auto, identity_reset, permutation or general");
    cf->add_option("--max-len", ca.max_len, "exhaustive word length");
    cf->add_option("--random", ca.random, "extra random words");
    cf->add_option("--random-len", ca.random_len);
    cf->add_option("--noise", ca.noise, "per-step table noise amplitude");
    cf->add_option("--epsilon", ca.epsilon, "interval radius");
    cf->add_option("--seed", ca.seed);
    cf->add_option("--workers", ca.workers)->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return bad_input;
    }

    try {
        if (*tr) return cmd_train(ta);
        if (*ev) return cmd_eval(ea);
        if (*vf) return cmd_verify(suite, vo);
        if (*bn) return cmd_bench(ba);
        if (*cf) return cmd_certify(ca);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return bad_input;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric abort: %s\n", e.what());
        return numeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return bad_input;
    }
    return bad_input;
}
