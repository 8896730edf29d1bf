#pragma once
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "minmax/autodiff.hpp"
#include "minmax/checkpoint.hpp"
#include "minmax/tasks.hpp"

namespace mm {

// Cascade plus a learned token embedding (d_in x vocab) feeding layer 0.
struct Model {
    CascadeWeights net;
    MatrixXd embed;
};

Model init_model(const Dims& dims, int vocab, std::uint64_t seed);
std::uint64_t count_model_params(const Dims& dims, int vocab);
MatrixXd embed_tokens(const Model& m, const std::vector<int>& tokens);
VectorXd flatten(const Model& m);
void unflatten(const VectorXd& flat, Model& m);

struct AdamConfig {
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    VectorXd m, v;
    std::uint64_t step = 0;
};

// Decoupled decay first (theta *= 1 - lr * wd), then the bias-corrected Adam update.
void adam_step(VectorXd& theta, const VectorXd& grad, AdamState& st, const AdamConfig& cfg);

struct Metrics {
    std::uint64_t step = 0;
    double train_loss = 0;
    std::map<std::size_t, double> val_accuracy;
    double grad_norm = 0;
    double tie_fraction = 0;
    double max_state_abs = 0;
    double seconds = 0;

    std::string to_json() const;
};

struct TrainConfig {
    Dims dims;  // d_out is forced to the task's class count
    TaskSpec task;
    AdamConfig adam;
    int batch_size = 64;
    std::uint64_t max_steps = 1000;
    std::vector<std::size_t> train_lengths{64};
    std::vector<std::size_t> val_lengths{128};
    std::size_t train_size = 20000;
    std::size_t val_size = 1000;
    std::vector<std::size_t> eval_lengths;  // used after training by the CLI
    std::size_t eval_size = 1000;
    std::uint64_t seed = 0;
    std::uint64_t log_every = 50;
    int workers = 1;
    double budget_seconds = 0;    // <= 0: no limit
    double target_accuracy = 0;   // > 0: stop once every validation length reaches it
    std::string metrics_path;     // JSONL, appended
    std::string checkpoint_path;  // written at every log point and at the end
    std::function<void(const Metrics&)> on_log;
};

struct TrainResult {
    Model model;
    AdamState adam;
    std::vector<Metrics> history;
    std::uint64_t steps = 0;
    bool budget_exhausted = false;
    bool target_reached = false;
};

// one batch step's loss and gradient (mean over batch and masked positions)
struct BatchGrad {
    double loss = 0;
    VectorXd grad;
    std::uint64_t ties = 0, nodes = 0;
    double max_state_abs = 0;
    bool closure_ok = true;
};
BatchGrad batch_gradient(const Model& m, const TaskSpec& task, const std::vector<const TaskSample*>& batch,
                         int workers);

TrainResult train(const TrainConfig& cfg, const Model* resume = nullptr, const AdamState* resume_adam = nullptr);

// mean per-sample accuracy at masked positions
double accuracy(const Model& m, const std::vector<TaskSample>& samples, int workers = 1);
std::vector<double> evaluate(const Model& m, const TaskSpec& task, const std::vector<std::size_t>& lengths,
                             std::size_t n_samples, std::uint64_t seed, int workers = 1);

struct Telemetry {
    double grad_norm = 0;  // max |component|
    double tie_fraction = 0;
    double max_state_abs = 0;
    bool closure_ok = true;
};
Telemetry telemetry_probe(const Model& m, const TaskSpec& task, const std::vector<TaskSample>& batch, int workers = 1);

nlohmann::json task_to_json(const TaskSpec& t);
TaskSpec task_from_json(const nlohmann::json& j);

void save_model(const std::string& path, const Model& m, const TaskSpec& task, const AdamState* adam = nullptr,
                std::uint64_t step = 0);
struct LoadedModel {
    Model model;
    TaskSpec task;
    AdamState adam;
    std::uint64_t step = 0;
};
LoadedModel load_model(const std::string& path);

}  // namespace mm
