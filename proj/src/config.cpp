#include "minmax/config.hpp"

#include <fstream>
#include <set>

#include "minmax/errors.hpp"

namespace mm {

using nlohmann::json;

namespace {

void only_keys(const json& j, const std::string& where, const std::set<std::string>& allowed)
{
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [k, v] : j.items()) {
        (void)v;
        if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
    }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where)
{
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

void positive(long long v, const std::string& what)
{
    if (v < 1) throw ConfigError(what + " must be >= 1");
}

}  // namespace

RunConfig parse_config(const json& j)
{
    only_keys(j, "config", {"model", "task", "train", "eval"});
    RunConfig c;
    if (!j.contains("task")) throw ConfigError("config: missing section 'task'");

    try {
        c.train.task = task_from_json(j.at("task"));
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("task: ") + e.what());
    }

    Dims& d = c.train.dims;
    if (j.contains("model")) {
        const json& m = j.at("model");
        only_keys(m, "model", {"d_in", "d_model", "d_state", "n_units", "n_layers", "d_mlp", "n_mlp", "prenorm",
                               "residual"});
        read(m, "d_in", d.d_in, "model");
        read(m, "d_model", d.d_model, "model");
        read(m, "d_state", d.d_state, "model");
        read(m, "n_units", d.n_units, "model");
        read(m, "n_layers", d.n_layers, "model");
        read(m, "d_mlp", d.d_mlp, "model");
        read(m, "n_mlp", d.n_mlp, "model");
        read(m, "prenorm", d.prenorm, "model");
        read(m, "residual", d.residual, "model");
    }
    d.d_out = c.train.task.n_classes();
    try {
        validate(d);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }

    TrainConfig& t = c.train;
    if (j.contains("train")) {
        const json& s = j.at("train");
        only_keys(s, "train", {"lr", "weight_decay", "beta1", "beta2", "eps", "batch_size", "max_steps",
                               "train_lengths", "val_lengths", "train_size", "val_size", "seed", "log_every",
                               "workers", "budget_seconds", "target_accuracy"});
        read(s, "lr", t.adam.lr, "train");
        read(s, "weight_decay", t.adam.weight_decay, "train");
        read(s, "beta1", t.adam.beta1, "train");
        read(s, "beta2", t.adam.beta2, "train");
        read(s, "eps", t.adam.eps, "train");
        read(s, "batch_size", t.batch_size, "train");
        read(s, "max_steps", t.max_steps, "train");
        read(s, "train_lengths", t.train_lengths, "train");
        read(s, "val_lengths", t.val_lengths, "train");
        read(s, "train_size", t.train_size, "train");
        read(s, "val_size", t.val_size, "train");
        read(s, "seed", t.seed, "train");
        read(s, "log_every", t.log_every, "train");
        read(s, "workers", t.workers, "train");
        read(s, "budget_seconds", t.budget_seconds, "train");
        read(s, "target_accuracy", t.target_accuracy, "train");
    }
    if (!(t.adam.lr > 0)) throw ConfigError("train.lr must be > 0");
    if (!(t.adam.weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
    if (!(t.adam.beta1 >= 0 && t.adam.beta1 < 1 && t.adam.beta2 >= 0 && t.adam.beta2 < 1))
        throw ConfigError("train: betas must lie in [0, 1)");
    if (!(t.adam.eps > 0)) throw ConfigError("train.eps must be > 0");
    positive(t.batch_size, "train.batch_size");
    positive((long long)t.max_steps, "train.max_steps");
    positive((long long)t.train_size, "train.train_size");
    positive((long long)t.val_size, "train.val_size");
    positive((long long)t.log_every, "train.log_every");
    positive(t.workers, "train.workers");
    if (t.train_lengths.empty() || t.val_lengths.empty()) throw ConfigError("train: length lists must be nonempty");
    if (!(t.target_accuracy >= 0 && t.target_accuracy <= 1)) throw ConfigError("train.target_accuracy not in [0, 1]");

    if (j.contains("eval")) {
        const json& e = j.at("eval");
        only_keys(e, "eval", {"lengths", "samples", "seed"});
        read(e, "lengths", c.eval.lengths, "eval");
        read(e, "samples", c.eval.samples, "eval");
        read(e, "seed", c.eval.seed, "eval");
    }
    if (c.eval.lengths.empty()) c.eval.lengths = t.val_lengths;
    positive((long long)c.eval.samples, "eval.samples");

    // every length must admit a sample of the task
    auto check_len = [&](const std::vector<std::size_t>& ls, const std::string& what) {
        for (std::size_t L : ls) {
            positive((long long)L, what);
            if (t.task.kind == TaskKind::induction_heads && L < std::size_t(t.task.window) + 2)
                throw ConfigError(what + ": length " + std::to_string(L) + " is shorter than window + 2");
        }
    };
    check_len(t.train_lengths, "train.train_lengths");
    check_len(t.val_lengths, "train.val_lengths");
    check_len(c.eval.lengths, "eval.lengths");
    t.eval_lengths = c.eval.lengths;
    t.eval_size = c.eval.samples;
    return c;
}

RunConfig load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    json j;
    try {
        j = json::parse(in, nullptr, true, true);
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return parse_config(j);
}

json config_to_json(const RunConfig& c)
{
    const Dims& d = c.train.dims;
    const TrainConfig& t = c.train;
    return json{{"model",
                 {{"d_in", d.d_in},
                  {"d_model", d.d_model},
                  {"d_state", d.d_state},
                  {"n_units", d.n_units},
                  {"n_layers", d.n_layers},
                  {"d_mlp", d.d_mlp},
                  {"n_mlp", d.n_mlp},
                  {"prenorm", d.prenorm},
                  {"residual", d.residual}}},
                {"task", task_to_json(t.task)},
                {"train",
                 {{"lr", t.adam.lr},
                  {"weight_decay", t.adam.weight_decay},
                  {"beta1", t.adam.beta1},
                  {"beta2", t.adam.beta2},
                  {"eps", t.adam.eps},
                  {"batch_size", t.batch_size},
                  {"max_steps", t.max_steps},
                  {"train_lengths", t.train_lengths},
                  {"val_lengths", t.val_lengths},
                  {"train_size", t.train_size},
                  {"val_size", t.val_size},
                  {"seed", t.seed},
                  {"log_every", t.log_every},
                  {"workers", t.workers},
                  {"budget_seconds", t.budget_seconds},
                  {"target_accuracy", t.target_accuracy}}},
                {"eval", {{"lengths", c.eval.lengths}, {"samples", c.eval.samples}, {"seed", c.eval.seed}}}};
}

}  // namespace mm
