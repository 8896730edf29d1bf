#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "minmax/errors.hpp"
#include "minmax/training.hpp"

using namespace mm;

namespace {

void set_linear(MLPWeights& m, std::initializer_list<std::initializer_list<double>> W, std::initializer_list<double> b)
{
    auto& L = m.affine.at(0);
    Eigen::Index i = 0;
    for (auto r : W) {
        Eigen::Index j = 0;
        for (double v : r) L.W(i, j++) = v;
        ++i;
    }
    i = 0;
    for (double v : b) L.b(i++) = v;
}

Dims rig_dims(int n)
{
    Dims d;
    d.d_in = 1;
    d.d_model = 2;
    d.d_out = n;
    d.d_state = 1;
    d.n_units = 1;
    d.n_layers = 2;
    d.d_mlp = 1;
    d.n_mlp = 0;
    d.prenorm = false;
    d.residual = false;
    return d;
}

// Layer 0 emits (first-step flag, token value); layer 1 latches the value seen
// while the flag is down; class k scores k*x - k^2/2.
Model latch_rig(int n)
{
    Model m = init_model(rig_dims(n), 20 * n, 1);
    for (int k = 0; k < 20 * n; ++k) m.embed(0, k) = k % n;
    auto& A = m.net.layers[0];
    set_linear(A.units[0].reset, {{0}}, {1});
    set_linear(A.units[0].set, {{0}}, {1});
    A.units[0].x0(0) = 0;
    A.out.affine[0].W.setZero();
    A.out.affine[0].W(0, 0) = 1;
    A.out.affine[0].W(1, 2) = 1;
    A.out.affine[0].b.setZero();
    auto& B = m.net.layers[1];
    set_linear(B.units[0].reset, {{100, 0}}, {-50});
    set_linear(B.units[0].set, {{-100, 1}}, {0});
    B.units[0].x0(0) = 0;
    B.out.affine[0].W.setZero();
    for (int k = 0; k < n; ++k) {
        B.out.affine[0].W(k, 1) = k;
        B.out.affine[0].b(k) = -0.5 * k * k;
    }
    return m;
}

TaskSpec latching(int n)
{
    TaskSpec t;
    t.kind = TaskKind::latching;
    t.n = n;
    return t;
}

Dims tiny_dims(int n_classes, int d_in = 4)
{
    Dims d;
    d.d_in = d_in;
    d.d_out = n_classes;
    d.d_model = 6;
    d.d_state = 1;
    d.n_units = 4;
    d.n_layers = 2;
    d.d_mlp = 8;
    d.n_mlp = 1;
    return d;
}

double bound_of_final_map(const MLPWeights& m)
{
    // hidden activations are tanh, so each output is within sum|W_row| + |b|
    const auto& L = m.affine.back();
    if (m.affine.size() == 1) return INFINITY;
    return (L.W.cwiseAbs().rowwise().sum() + L.b.cwiseAbs()).maxCoeff();
}

}  // namespace

TEST_CASE("adam step")
{
    AdamConfig c;
    c.weight_decay = 0;
    VectorXd th(3);
    th << 1.5, -2, 0.25;
    const VectorXd th0 = th;
    AdamState st;
    for (int i = 0; i < 5; ++i) adam_step(th, VectorXd::Zero(3), st, c);
    CHECK((th.array() == th0.array()).all());

    // constant gradient: each update tends to lr * sign(g)
    AdamState s2;
    VectorXd p = VectorXd::Zero(2);
    VectorXd g(2);
    g << 3.0, -0.01;
    VectorXd prev = p;
    for (int i = 0; i < 2000; ++i) {
        prev = p;
        adam_step(p, g, s2, c);
    }
    VectorXd step = p - prev;
    CHECK(step(0) == doctest::Approx(-c.lr).epsilon(1e-4));
    CHECK(step(1) == doctest::Approx(c.lr).epsilon(1e-4));

    // hand trace, two parameters, three steps, with decay
    AdamConfig h;
    h.lr = 0.1;
    h.weight_decay = 0.5;
    double x[2] = {1.0, -0.5}, m[2] = {0, 0}, v[2] = {0, 0};
    const double gs[3][2] = {{0.2, -1.0}, {0.4, 0.5}, {-0.3, 2.0}};
    VectorXd q(2);
    q << 1.0, -0.5;
    AdamState s3;
    for (int t = 1; t <= 3; ++t) {
        for (int i = 0; i < 2; ++i) {
            x[i] = x[i] - h.lr * h.weight_decay * x[i];
            m[i] = 0.9 * m[i] + 0.1 * gs[t - 1][i];
            v[i] = 0.999 * v[i] + 0.001 * gs[t - 1][i] * gs[t - 1][i];
            const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
            x[i] -= h.lr * mh / (std::sqrt(vh) + 1e-8);
        }
        VectorXd gg(2);
        gg << gs[t - 1][0], gs[t - 1][1];
        adam_step(q, gg, s3, h);
        CHECK(q(0) == doctest::Approx(x[0]).epsilon(1e-14));
        CHECK(q(1) == doctest::Approx(x[1]).epsilon(1e-14));
    }
    CHECK(s3.step == 3);

    VectorXd bad(2);
    bad << 1, NAN;
    CHECK_THROWS_AS(adam_step(q, bad, s3, h), NumericError);
    CHECK_THROWS_AS(adam_step(q, VectorXd::Zero(3), s3, h), ShapeError);
}

TEST_CASE("zero learning rate keeps the initial weights")
{
    TrainConfig c;
    c.dims = tiny_dims(2);
    c.task = latching(2);
    c.adam.lr = 0;
    c.batch_size = 4;
    c.max_steps = 5;
    c.train_lengths = {6};
    c.val_lengths = {8};
    c.train_size = 20;
    c.val_size = 5;
    c.log_every = 2;
    c.seed = 11;
    auto r = train(c);
    Dims d = c.dims;
    Model init = init_model(d, c.task.vocab(), c.seed);
    CHECK((flatten(r.model).array() == flatten(init).array()).all());
    CHECK(r.steps == 5);
    CHECK(r.history.size() == 3);
}

TEST_CASE("short training lowers the loss")
{
    // a single class makes the cross-entropy identically zero
    TrainConfig c1;
    c1.dims = tiny_dims(1);
    c1.task = latching(1);
    c1.batch_size = 8;
    c1.max_steps = 20;
    c1.train_lengths = {8};
    c1.train_size = 100;
    c1.val_size = 10;
    c1.log_every = 10;
    for (const auto& m : train(c1).history) CHECK(m.train_loss == 0.0);

    TrainConfig c;
    c.dims = tiny_dims(2);
    c.task = latching(2);
    c.adam.lr = 1e-2;
    c.batch_size = 16;
    c.max_steps = 200;
    c.train_lengths = {4, 8, 16};
    c.val_lengths = {16};
    c.train_size = 2000;
    c.val_size = 50;
    c.log_every = 1;
    c.seed = 3;
    auto r = train(c);
    REQUIRE(r.history.size() == 200);
    double first = 0, last = 0;
    for (int i = 0; i < 20; ++i) {
        first += r.history[std::size_t(i)].train_loss;
        last += r.history[r.history.size() - 1 - std::size_t(i)].train_loss;
    }
    MESSAGE("mean loss, first 20 steps " << first / 20 << ", last 20 steps " << last / 20);
    CHECK(last < first);
    for (const auto& m : r.history)
        for (const auto& [len, a] : m.val_accuracy) {
            CHECK(a >= 0.0);
            CHECK(a <= 1.0);
        }
}

TEST_CASE("accuracy: rigged model, random head, recount")
{
    for (int n : {2, 4}) {
        Model m = latch_rig(n);
        CHECK(accuracy(m, generate_set(latching(n), {1, 7, 50}, 200, 5)) == 1.0);
        const auto acc = evaluate(m, latching(n), {512, 2048}, 10, 1);
        CHECK(acc == std::vector<double>{1.0, 1.0});
    }

    // head reads only the current token: chance level after the first step
    const int n = 4, T = 50;
    Model m = latch_rig(n);
    std::mt19937_64 g(8);
    std::normal_distribution<double> nd;
    auto& out = m.net.layers[1].out.affine[0];
    out.W.setZero();
    for (int k = 0; k < n; ++k) {
        out.W(k, 3) = nd(g);
        out.b(k) = nd(g);
    }
    for (int k = 0; k < 20 * n; ++k) m.embed(0, k) = nd(g);
    int fixed = 0;
    for (int k = 0; k < n; ++k) {
        Eigen::Index arg;
        (out.W.col(3) * m.embed(0, k) + out.b).maxCoeff(&arg);
        fixed += arg == k;
    }
    const double expect = (double(fixed) / n + (T - 1) / double(n)) / T;
    const double a = accuracy(m, generate_set(latching(n), {std::size_t(T)}, 10000, 17));
    MESSAGE("random head accuracy " << a << ", expected " << expect);
    CHECK(std::abs(a - expect) < 0.01);

    // per-position recount against the public accuracy
    Model r = init_model(tiny_dims(4), 80, 4);
    auto samples = generate_set(latching(4), {3, 9, 20}, 100, 6);
    double total = 0;
    for (const auto& s : samples) {
        MatrixXd U(r.embed.rows(), Eigen::Index(s.length()));
        for (std::size_t t = 0; t < s.length(); ++t) U.col(Eigen::Index(t)) = r.embed.col(s.tokens[t]);
        const MatrixXd Y = cascade_eval(r.net, U).output();
        int hit = 0;
        for (std::size_t t = 0; t < s.length(); ++t) {
            int best = 0;
            for (int k = 1; k < 4; ++k)
                if (Y(k, Eigen::Index(t)) > Y(best, Eigen::Index(t))) best = k;
            hit += best == s.targets[t];
        }
        total += double(hit) / double(s.length());
    }
    CHECK(accuracy(r, samples) == doctest::Approx(total / 100).epsilon(1e-15));
    CHECK(accuracy(r, samples, 3) == accuracy(r, samples, 1));

    TaskSpec ih;
    ih.kind = TaskKind::induction_heads;
    ih.n = 4;
    ih.window = 5;
    Model h = init_model(tiny_dims(4), ih.vocab(), 2);
    auto hs = generate_set(ih, {12}, 50, 1);
    const double ah = accuracy(h, hs);
    CHECK(ah * 50 == doctest::Approx(std::round(ah * 50)));  // one scored step per sample
}

TEST_CASE("determinism and worker independence")
{
    TrainConfig c;
    c.dims = tiny_dims(4);
    c.task = latching(4);
    c.batch_size = 6;
    c.max_steps = 12;
    c.train_lengths = {5, 9};
    c.val_lengths = {12, 30};
    c.train_size = 200;
    c.val_size = 20;
    c.log_every = 4;
    c.seed = 21;
    auto a = train(c), b = train(c);
    c.workers = 3;
    auto w = train(c);
    REQUIRE(a.history.size() == 3);
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].to_json().substr(0, a.history[i].to_json().find("\"seconds\"")) ==
              b.history[i].to_json().substr(0, b.history[i].to_json().find("\"seconds\"")));
        CHECK(a.history[i].train_loss == w.history[i].train_loss);
        CHECK(a.history[i].grad_norm == w.history[i].grad_norm);
    }
    CHECK((flatten(a.model).array() == flatten(b.model).array()).all());
    CHECK((flatten(a.model).array() == flatten(w.model).array()).all());
}

TEST_CASE("metrics log, checkpoints, budget and resume")
{
    const std::string log = "test_training_metrics.jsonl", ck = "test_training.ckpt";
    std::remove(log.c_str());
    TrainConfig c;
    c.dims = tiny_dims(3);
    c.task = latching(3);
    c.batch_size = 4;
    c.max_steps = 6;
    c.train_lengths = {5};
    c.val_lengths = {7};
    c.train_size = 30;
    c.val_size = 5;
    c.log_every = 3;
    c.seed = 2;
    c.metrics_path = log;
    c.checkpoint_path = ck;
    auto r = train(c);
    std::ifstream in(log);
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        CHECK(j.contains("val_accuracy"));
        CHECK(j.contains("tie_fraction"));
        ++lines;
    }
    CHECK(lines == 2);

    auto back = load_model(ck);
    CHECK(back.step == 6);
    CHECK(back.task.n == 3);
    CHECK(back.adam.step == 6);
    CHECK((flatten(back.model).array() == flatten(r.model).array()).all());
    CHECK((back.adam.m.array() == r.adam.m.array()).all());
    auto s = generate(c.task, 40, 9);
    const MatrixXd y1 = cascade_eval(r.model.net, embed_tokens(r.model, s.tokens)).output();
    const MatrixXd y2 = cascade_eval(back.model.net, embed_tokens(back.model, s.tokens)).output();
    CHECK((y1.array() == y2.array()).all());

    // resuming for 0 further steps changes nothing; budget stops after one step
    TrainConfig c2 = c;
    c2.metrics_path.clear();
    c2.checkpoint_path.clear();
    c2.budget_seconds = 1e-9;
    c2.max_steps = 100;
    auto rb = train(c2, &back.model, &back.adam);
    CHECK(rb.budget_exhausted);
    CHECK(rb.steps == 1);
    CHECK(rb.history.size() == 1);

    TrainConfig bad = c2;
    bad.task = latching(5);
    CHECK_THROWS_AS(train(bad, &back.model), ShapeError);
    bad = c2;
    bad.batch_size = 0;
    CHECK_THROWS_AS(train(bad), DomainError);
    std::remove(log.c_str());
    std::remove(ck.c_str());
}

TEST_CASE("telemetry")
{
    std::mt19937_64 g(5);
    TaskSpec t = latching(3);
    for (int probe = 0; probe < 100; ++probe) {
        Dims d = tiny_dims(3, 3);
        d.d_state = 1 + probe % 3;
        Model m = init_model(d, t.vocab(), std::uint64_t(probe));
        auto batch = generate_set(t, {4, 11}, 3, g());
        Telemetry tm = telemetry_probe(m, t, batch);
        CHECK(tm.closure_ok);
        CHECK(std::isfinite(tm.grad_norm));
        CHECK(tm.tie_fraction >= 0.0);
        CHECK(tm.tie_fraction <= 1.0);
    }

    // frozen weights, long vs short bounded i.i.d. inputs
    Dims d = tiny_dims(3, 3);
    d.d_state = 2;
    Model m = init_model(d, t.vocab(), 77);
    double bound = 0;
    for (const auto& L : m.net.layers)
        for (const auto& u : L.units)
            bound = std::max({bound, bound_of_final_map(u.reset), bound_of_final_map(u.set), u.x0.cwiseAbs().maxCoeff()});
    auto short_s = generate_set(t, {1000}, 1, 1), long_s = generate_set(t, {100000}, 1, 2);
    Telemetry a = telemetry_probe(m, t, short_s), b = telemetry_probe(m, t, long_s);
    MESSAGE("max |state| at 1e3: " << a.max_state_abs << ", at 1e5: " << b.max_state_abs << ", bound " << bound);
    CHECK(a.closure_ok);
    CHECK(b.closure_ok);
    CHECK(a.max_state_abs <= bound);
    CHECK(b.max_state_abs <= bound);
}

TEST_CASE("recorded gradients stay under the per-sequence bound")
{
    TrainConfig c;
    c.dims = tiny_dims(2);
    c.task = latching(2);
    c.adam.lr = 1e-2;
    c.batch_size = 4;
    c.max_steps = 30;
    c.train_lengths = {6, 10};
    c.train_size = 100;
    c.val_size = 4;
    c.log_every = 10;
    auto r = train(c);
    auto batch = generate_set(c.task, {6, 10}, 4, 99);
    std::vector<const TaskSample*> ptr;
    double worst = 0;
    for (const auto& s : batch) {
        ptr.push_back(&s);
        Target tg;
        tg.classes = s.targets;
        tg.mask = s.mask;
        worst = std::max(worst, gradient_bound_check(r.model.net, embed_tokens(r.model, s.tokens), tg,
                                                     LossKind::cross_entropy)
                                    .bound);
    }
    BatchGrad bg = batch_gradient(r.model, c.task, ptr, 1);
    const Eigen::Index nn = Eigen::Index(param_size(r.model.net));
    CHECK(bg.grad.head(nn).cwiseAbs().maxCoeff() <= worst);
}

TEST_CASE("task json round trip")
{
    TaskSpec s;
    s.kind = TaskKind::sequences;
    s.n = 2;
    s.seq = sequences_defaults(2);
    auto back = task_from_json(task_to_json(s));
    CHECK(back.seq.events == s.seq.events);
    CHECK(back.vocab() == s.vocab());
    TaskSpec ih;
    ih.kind = TaskKind::induction_heads;
    ih.n = 16;
    ih.window = 12;
    CHECK(task_from_json(task_to_json(ih)).window == 12);
    CHECK_THROWS_AS(task_from_json(nlohmann::json{{"kind", "latching"}, {"n", 2}, {"colour", 1}}), ConfigError);
}
