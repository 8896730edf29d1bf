#include "minmax/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <random>

#include "minmax/parallel.hpp"

namespace mm {

using nlohmann::json;

Model init_model(const Dims& dims, int vocab, std::uint64_t seed)
{
    if (vocab < 1) throw DomainError("model: vocabulary must be nonempty");
    Model m;
    m.net = init_weights(dims, seed);
    std::mt19937_64 g(seed ^ 0x5bd1e995ULL);
    std::normal_distribution<double> nd(0.0, 1.0);
    m.embed = MatrixXd::NullaryExpr(dims.d_in, vocab, [&] { return nd(g); });
    return m;
}

std::uint64_t count_model_params(const Dims& dims, int vocab)
{
    return count_params(dims) + std::uint64_t(dims.d_in) * std::uint64_t(vocab);
}

MatrixXd embed_tokens(const Model& m, const std::vector<int>& tokens)
{
    MatrixXd U(m.embed.rows(), Eigen::Index(tokens.size()));
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const int k = tokens[t];
        if (k < 0 || k >= m.embed.cols()) throw DomainError("embed: token id out of range");
        U.col(Eigen::Index(t)) = m.embed.col(k);
    }
    return U;
}

VectorXd flatten(const Model& m)
{
    VectorXd a = flatten(m.net);
    VectorXd out(a.size() + m.embed.size());
    out << a, Eigen::Map<const VectorXd>(m.embed.data(), m.embed.size());
    return out;
}

void unflatten(const VectorXd& flat, Model& m)
{
    const Eigen::Index n = Eigen::Index(param_size(m.net));
    if (flat.size() != n + m.embed.size()) throw ShapeError("model: flat size mismatch");
    unflatten(VectorXd(flat.head(n)), m.net);
    Eigen::Map<VectorXd>(m.embed.data(), m.embed.size()) = flat.tail(m.embed.size());
}

void adam_step(VectorXd& theta, const VectorXd& grad, AdamState& st, const AdamConfig& cfg)
{
    if (grad.size() != theta.size()) throw ShapeError("adam: gradient size mismatch");
    if (!grad.allFinite()) {
        Eigen::Index bad = 0;
        for (; bad < grad.size() && std::isfinite(grad(bad)); ++bad) {
        }
        throw NumericError("adam: non-finite gradient at component " + std::to_string(bad) + " on step " +
                           std::to_string(st.step + 1));
    }
    if (st.m.size() != theta.size()) {
        st.m = VectorXd::Zero(theta.size());
        st.v = VectorXd::Zero(theta.size());
    }
    ++st.step;
    theta *= 1.0 - cfg.lr * cfg.weight_decay;
    st.m = cfg.beta1 * st.m + (1 - cfg.beta1) * grad;
    st.v = cfg.beta2 * st.v + (1 - cfg.beta2) * grad.cwiseAbs2();
    const double c1 = 1 - std::pow(cfg.beta1, double(st.step));
    const double c2 = 1 - std::pow(cfg.beta2, double(st.step));
    theta.array() -= cfg.lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + cfg.eps);
}

namespace {

Target make_target(const TaskSample& s)
{
    Target t;
    t.classes = s.targets;
    t.mask = s.mask;
    return t;
}

double max_state(const CascadeTrace& tr)
{
    double m = 0;
    for (const auto& L : tr.layers)
        for (const auto& u : L.units) m = std::max(m, u.X.cwiseAbs().maxCoeff());
    return m;
}

}  // namespace

BatchGrad batch_gradient(const Model& m, const TaskSpec& task, const std::vector<const TaskSample*>& batch,
                         int workers)
{
    (void)task;
    if (batch.empty()) throw DomainError("batch: empty");
    const std::size_t B = batch.size();
    struct Slot {
        double loss = 0;
        VectorXd g;
        MatrixXd dU;
        std::uint64_t ties = 0, nodes = 0;
        double xmax = 0;
        bool closure = true;
    };
    std::vector<Slot> slots(B);
    parallel_for(B, workers, [&](std::size_t i) {
        const TaskSample& s = *batch[i];
        Target tg = make_target(s);
        std::uint64_t masked = 0;
        for (auto v : s.mask) masked += v;
        Tape tp = build_loss_tape(m.net, embed_tokens(m, s.tokens), tg, LossKind::cross_entropy,
                                  1.0 / (double(B) * double(masked)));
        GradResult gr = backward(tp);
        auto& sl = slots[i];
        sl.loss = tp.loss;
        sl.g = gr.flat();
        sl.dU = std::move(gr.dU);
        sl.ties = gr.tie_count;
        sl.nodes = gr.minmax_nodes;
        sl.xmax = max_state(tp.trace);
        sl.closure = value_closure_ok(tp.trace, m.net);
    });
    BatchGrad out;
    const Eigen::Index nn = Eigen::Index(param_size(m.net));
    out.grad = VectorXd::Zero(nn + m.embed.size());
    Eigen::Map<MatrixXd> ge(out.grad.data() + nn, m.embed.rows(), m.embed.cols());
    // ordered reduction over sample index
    for (std::size_t i = 0; i < B; ++i) {
        const auto& sl = slots[i];
        out.loss += sl.loss;
        out.grad.head(nn) += sl.g;
        const auto& toks = batch[i]->tokens;
        for (std::size_t t = 0; t < toks.size(); ++t) ge.col(toks[t]) += sl.dU.col(Eigen::Index(t));
        out.ties += sl.ties;
        out.nodes += sl.nodes;
        out.max_state_abs = std::max(out.max_state_abs, sl.xmax);
        out.closure_ok = out.closure_ok && sl.closure;
    }
    return out;
}

namespace {

double sample_accuracy(const Model& m, const TaskSample& s)
{
    const CascadeTrace tr = cascade_eval(m.net, embed_tokens(m, s.tokens));
    const MatrixXd& Y = tr.output();
    std::size_t hit = 0, n = 0;
    for (std::size_t t = 0; t < s.length(); ++t) {
        if (!s.mask[t]) continue;
        Eigen::Index arg;
        Y.col(Eigen::Index(t)).maxCoeff(&arg);
        hit += arg == s.targets[t];
        ++n;
    }
    if (n == 0) throw DomainError("accuracy: sample without masked steps");
    return double(hit) / double(n);
}

}  // namespace

double accuracy(const Model& m, const std::vector<TaskSample>& samples, int workers)
{
    if (samples.empty()) throw DomainError("accuracy: no samples");
    std::vector<double> acc(samples.size());
    parallel_for(samples.size(), workers, [&](std::size_t i) { acc[i] = sample_accuracy(m, samples[i]); });
    double s = 0;
    for (double a : acc) s += a;
    return s / double(samples.size());
}

std::vector<double> evaluate(const Model& m, const TaskSpec& task, const std::vector<std::size_t>& lengths,
                             std::size_t n_samples, std::uint64_t seed, int workers)
{
    std::vector<double> out;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        if (lengths[i] < 1) throw DomainError("evaluate: lengths must be >= 1");
        out.push_back(accuracy(m, generate_set(task, {lengths[i]}, n_samples, seed + 7919 * i), workers));
    }
    return out;
}

Telemetry telemetry_probe(const Model& m, const TaskSpec& task, const std::vector<TaskSample>& batch, int workers)
{
    std::vector<const TaskSample*> ptr;
    for (const auto& s : batch) ptr.push_back(&s);
    BatchGrad bg = batch_gradient(m, task, ptr, workers);
    Telemetry t;
    t.grad_norm = bg.grad.lpNorm<Eigen::Infinity>();
    t.tie_fraction = bg.nodes ? double(bg.ties) / double(bg.nodes) : 0.0;
    t.max_state_abs = bg.max_state_abs;
    t.closure_ok = bg.closure_ok;
    return t;
}

std::string Metrics::to_json() const
{
    json j;
    j["step"] = step;
    j["train_loss"] = train_loss;
    json acc = json::object();
    for (const auto& [len, a] : val_accuracy) acc[std::to_string(len)] = a;
    j["val_accuracy"] = acc;
    j["grad_norm"] = grad_norm;
    j["tie_fraction"] = tie_fraction;
    j["max_state_abs"] = max_state_abs;
    j["seconds"] = seconds;
    return j.dump();
}

json task_to_json(const TaskSpec& t)
{
    json j{{"kind", to_string(t.kind)}, {"n", t.n}};
    if (t.kind == TaskKind::induction_heads) j["window"] = t.window;
    if (t.kind == TaskKind::sequences && !t.seq.events.empty()) {
        j["vocab"] = t.seq.vocab;
        j["events"] = t.seq.events;
        j["resets"] = t.seq.resets;
    }
    return j;
}

TaskSpec task_from_json(const json& j)
{
    TaskSpec t;
    for (const auto& [k, v] : j.items()) {
        (void)v;
        if (k != "kind" && k != "n" && k != "window" && k != "vocab" && k != "events" && k != "resets")
            throw ConfigError("task: unknown key " + k);
    }
    t.kind = parse_task_kind(j.at("kind").get<std::string>());
    t.n = j.at("n").get<int>();
    t.window = j.value("window", 30);
    if (j.contains("events")) {
        t.seq.n = t.n;
        t.seq.vocab = j.at("vocab").get<int>();
        t.seq.events = j.at("events").get<std::vector<std::vector<std::vector<int>>>>();
        t.seq.resets = j.at("resets").get<std::vector<std::vector<int>>>();
    }
    t.validate();
    return t;
}

void save_model(const std::string& path, const Model& m, const TaskSpec& task, const AdamState* adam,
                std::uint64_t step)
{
    CheckpointExtra ex;
    ex.arrays["embedding"] = m.embed;
    ex.meta["task"] = task_to_json(task);
    ex.meta["step"] = step;
    if (adam && adam->m.size()) {
        ex.arrays["adam_m"] = adam->m;
        ex.arrays["adam_v"] = adam->v;
        ex.meta["adam_step"] = adam->step;
    }
    save_checkpoint(path, m.net, ex);
}

LoadedModel load_model(const std::string& path)
{
    CheckpointExtra ex;
    LoadedModel lm;
    lm.model.net = load_checkpoint(path, &ex);
    auto it = ex.arrays.find("embedding");
    if (it == ex.arrays.end()) throw ShapeError("checkpoint: no embedding in " + path);
    lm.model.embed = it->second;
    if (lm.model.embed.rows() != lm.model.net.dims.d_in) throw ShapeError("checkpoint: embedding width != d_in");
    lm.task = task_from_json(ex.meta.at("task"));
    lm.step = ex.meta.value("step", std::uint64_t(0));
    if (ex.arrays.count("adam_m")) {
        lm.adam.m = ex.arrays.at("adam_m");
        lm.adam.v = ex.arrays.at("adam_v");
        lm.adam.step = ex.meta.value("adam_step", std::uint64_t(0));
    }
    if (lm.model.embed.cols() != lm.task.vocab()) throw ShapeError("checkpoint: embedding size != task vocabulary");
    return lm;
}

TrainResult train(const TrainConfig& cfg0, const Model* resume, const AdamState* resume_adam)
{
    TrainConfig cfg = cfg0;
    cfg.task.validate();
    cfg.dims.d_out = cfg.task.n_classes();
    validate(cfg.dims);
    if (!(cfg.adam.lr >= 0) || cfg.batch_size < 1) throw DomainError("train: need lr >= 0 and batch_size >= 1");
    if (cfg.train_lengths.empty() || cfg.val_lengths.empty()) throw DomainError("train: empty length lists");
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

    TrainResult res;
    const int vocab = cfg.task.vocab();
    res.model = resume ? *resume : init_model(cfg.dims, vocab, cfg.seed);
    if (resume_adam) res.adam = *resume_adam;
    if (res.model.embed.cols() != vocab || res.model.net.dims.d_out != cfg.dims.d_out)
        throw ShapeError("train: resumed model does not match the task");

    std::mt19937_64 g(cfg.seed + 1);
    const auto pool = generate_set(cfg.task, cfg.train_lengths, cfg.train_size, g());
    std::vector<std::vector<TaskSample>> val;
    for (std::size_t L : cfg.val_lengths) val.push_back(generate_set(cfg.task, {L}, cfg.val_size, g()));
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);

    std::ofstream log;
    if (!cfg.metrics_path.empty()) {
        log.open(cfg.metrics_path, std::ios::app);
        if (!log) throw DomainError("train: cannot open metrics log " + cfg.metrics_path);
    }
    VectorXd theta = flatten(res.model);

    auto log_point = [&](std::uint64_t step, const BatchGrad& bg) {
        Metrics mt;
        mt.step = step;
        mt.train_loss = bg.loss;
        mt.grad_norm = bg.grad.lpNorm<Eigen::Infinity>();
        mt.tie_fraction = bg.nodes ? double(bg.ties) / double(bg.nodes) : 0.0;
        mt.max_state_abs = bg.max_state_abs;
        bool all = cfg.target_accuracy > 0;
        for (std::size_t i = 0; i < val.size(); ++i) {
            const double a = accuracy(res.model, val[i], cfg.workers);
            mt.val_accuracy[cfg.val_lengths[i]] = a;
            all = all && a >= cfg.target_accuracy;
        }
        mt.seconds = elapsed();
        if (log) log << mt.to_json() << "\n" << std::flush;
        res.history.push_back(mt);
        if (cfg.on_log) cfg.on_log(mt);
        if (!cfg.checkpoint_path.empty()) save_model(cfg.checkpoint_path, res.model, cfg.task, &res.adam, step);
        return all;
    };

    for (std::uint64_t step = 1; step <= cfg.max_steps; ++step) {
        std::vector<const TaskSample*> batch;
        for (int b = 0; b < cfg.batch_size; ++b) batch.push_back(&pool[pick(g)]);
        BatchGrad bg = batch_gradient(res.model, cfg.task, batch, cfg.workers);
        adam_step(theta, bg.grad, res.adam, cfg.adam);
        if (!theta.allFinite())
            throw NumericError("train: non-finite parameters after step " + std::to_string(step));
        unflatten(theta, res.model);
        res.steps = step;
        const bool over = cfg.budget_seconds > 0 && elapsed() > cfg.budget_seconds;
        if (step % cfg.log_every == 0 || step == cfg.max_steps || over) {
            if (log_point(step, bg)) {
                res.target_reached = true;
                break;
            }
        }
        if (over) {
            res.budget_exhausted = true;
            break;
        }
    }
    return res;
}

}  // namespace mm
