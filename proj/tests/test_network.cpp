#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <random>

#include "minmax/checkpoint.hpp"
#include "minmax/network.hpp"

using namespace mm;

namespace {

MLPWeights affine_only(MatrixXd W, VectorXd b)
{
    MLPWeights m;
    m.affine.push_back({std::move(W), std::move(b)});
    return m;
}

MatrixXd row(std::initializer_list<double> v)
{
    MatrixXd m(1, Eigen::Index(v.size()));
    Eigen::Index i = 0;
    for (double x : v) m(0, i++) = x;
    return m;
}

// 1 layer, 1 unit, d_state 1; input u_t = (A_t, b_t), output selects x_t
CascadeWeights example1_cascade()
{
    Dims d;
    d.d_in = 2;
    d.d_out = 1;
    d.d_model = 1;
    d.d_state = 1;
    d.n_units = 1;
    d.n_layers = 1;
    d.d_mlp = 1;
    d.n_mlp = 0;
    d.prenorm = false;
    d.residual = false;
    CascadeWeights w = init_weights(d, 1);
    auto& L = w.layers[0];
    L.units[0].reset = affine_only(row({1, 0}), VectorXd::Zero(1));
    L.units[0].set = affine_only(row({0, 1}), VectorXd::Zero(1));
    L.units[0].x0 = VectorXd::Zero(1);
    L.out = affine_only(row({0, 1, 0, 0}), VectorXd::Zero(1));
    return w;
}

MatrixXd example1_inputs()
{
    MatrixXd U(2, 4);
    U << 0, 7, 5, 0,
         2, 0, 0, 1;
    return U;
}

Dims small_dims(int layers = 2, int units = 3, int d_state = 2)
{
    Dims d;
    d.d_in = 4;
    d.d_out = 3;
    d.d_model = 5;
    d.d_state = d_state;
    d.n_units = units;
    d.n_layers = layers;
    d.d_mlp = 6;
    d.n_mlp = 1;
    return d;
}

MatrixXd random_inputs(std::mt19937_64& g, Eigen::Index rows, Eigen::Index T)
{
    std::uniform_real_distribution<double> u(-1, 1);
    return MatrixXd::NullaryExpr(rows, T, [&] { return u(g); });
}

bool same(const MatrixXd& a, const MatrixXd& b)
{
    return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

}  // namespace

TEST_CASE("mlp evaluation")
{
    std::mt19937_64 g(1);
    auto id = affine_only(MatrixXd::Identity(3, 3), VectorXd::Zero(3));
    VectorXd x = VectorXd::Random(3);
    CHECK((mlp_eval(id, x).array() == x.array()).all());

    MatrixXd A = random_inputs(g, 3, 4);
    VectorXd b = random_inputs(g, 3, 1).col(0), v = random_inputs(g, 4, 1).col(0);
    VectorXd want = A * v + b;
    CHECK((mlp_eval(affine_only(A, b), v) - want).norm() < 1e-14);

    LayerNormParams p{VectorXd::Ones(4), VectorXd::Zero(4)};
    MatrixXd c = MatrixXd::Constant(4, 1, 2.5);
    CHECK(layer_norm(p, c).norm() == 0.0);
    CHECK_THROWS_AS(mlp_eval(id, VectorXd::Zero(2)), ShapeError);
}

TEST_CASE("mlp backward with norm and residual matches finite differences")
{
    std::mt19937_64 g(2);
    MLPWeights m;
    m.affine = {{random_inputs(g, 5, 4), random_inputs(g, 5, 1).col(0)},
                {random_inputs(g, 5, 5), random_inputs(g, 5, 1).col(0)},
                {random_inputs(g, 3, 5), random_inputs(g, 3, 1).col(0)}};
    m.prenorm = true;
    m.norm = {VectorXd::Ones(4) + 0.3 * random_inputs(g, 4, 1).col(0), random_inputs(g, 4, 1).col(0)};
    m.residual = true;
    m.proj = random_inputs(g, 3, 4);
    MatrixXd X = random_inputs(g, 4, 6), R = random_inputs(g, 3, 6);
    auto f = [&](const MatrixXd& in) { return (mlp_forward(m, in).array() * R.array()).sum(); };
    MLPCache c;
    mlp_forward(m, X, &c);
    MLPWeights gm = m;
    for (auto& l : gm.affine) {
        l.W.setZero();
        l.b.setZero();
    }
    gm.norm.gamma.setZero();
    gm.norm.beta.setZero();
    gm.proj.setZero();
    MatrixXd dX = mlp_backward(m, c, R, &gm);
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < X.size(); ++i) {
        MatrixXd p = X, q = X;
        p.data()[i] += h;
        q.data()[i] -= h;
        CHECK(std::abs((f(p) - f(q)) / (2 * h) - dX.data()[i]) < 1e-7);
    }
    auto fd_param = [&](double& ref) {
        const double keep = ref;
        ref = keep + h;
        const double a = f(X);
        ref = keep - h;
        const double b = f(X);
        ref = keep;
        return (a - b) / (2 * h);
    };
    CHECK(std::abs(fd_param(m.norm.gamma(1)) - gm.norm.gamma(1)) < 1e-7);
    CHECK(std::abs(fd_param(m.norm.beta(2)) - gm.norm.beta(2)) < 1e-7);
    CHECK(std::abs(fd_param(m.proj(2, 3)) - gm.proj(2, 3)) < 1e-7);
    CHECK(std::abs(fd_param(m.affine[0].W(4, 1)) - gm.affine[0].W(4, 1)) < 1e-7);
    CHECK(std::abs(fd_param(m.affine[1].b(3)) - gm.affine[1].b(3)) < 1e-7);
}

TEST_CASE("neuron step")
{
    NeuronWeights n;
    n.reset = affine_only(row({1, 0}), VectorXd::Zero(1));
    n.set = affine_only(row({0, 1}), VectorXd::Zero(1));
    n.x0 = VectorXd::Zero(1);
    MatrixXd U = example1_inputs();
    VectorXd x = n.x0;
    std::vector<double> want{2, 2, 2, 1};
    for (int t = 0; t < 4; ++t) {
        x = neuron_step(n, x, U.col(t));
        CHECK(x(0) == want[t]);
    }
    // s >= R >= x: stores s
    VectorXd u(2);
    u << 3, 5;
    CHECK(neuron_step(n, VectorXd::Constant(1, 1.0), u)(0) == 5.0);

    std::mt19937_64 g(3);
    Dims d = small_dims(1, 1, 3);
    auto w = init_weights(d, 7);
    const auto& unit = w.layers[0].units[0];
    for (int it = 0; it < 20; ++it) {
        VectorXd in = random_inputs(g, 4, 1).col(0), xp = random_inputs(g, 3, 1).col(0);
        VectorXd r = mlp_eval(unit.reset, in), s = mlp_eval(unit.set, in);
        StepPair<double> M{Eigen::Map<const MatD>(r.data(), 3, 3), s};
        CHECK((neuron_step(unit, xp, in).array() == apply(M, VecD(xp)).array()).all());
    }
}

TEST_CASE("cascade reproduces the scalar worked example")
{
    auto w = example1_cascade();
    auto tr = cascade_eval(w, example1_inputs());
    std::vector<double> want{2, 2, 2, 1};
    for (int t = 0; t < 4; ++t) {
        CHECK(tr.output()(0, t) == want[t]);
        CHECK(tr.layers[0].units[0].X(0, t + 1) == want[t]);
    }
    auto tp = cascade_eval(w, example1_inputs(), CascadeMode::parallel);
    CHECK(same(tp.output(), tr.output()));
}

TEST_CASE("scalar units settle under constant input")
{
    std::mt19937_64 g(4);
    for (int seed = 0; seed < 10; ++seed) {
        auto w = init_weights(small_dims(2, 4, 1), seed);
        MatrixXd col = random_inputs(g, 4, 1);
        MatrixXd U = col.replicate(1, 12);
        auto tr = cascade_eval(w, U);
        // layer 0 sees a constant input; states are constant from step 2 on
        for (const auto& u : tr.layers[0].units)
            for (Eigen::Index t = 3; t <= 12; ++t) CHECK(u.X(0, t) == u.X(0, 2));
    }
}

TEST_CASE("parallel mode equals sequential mode")
{
    std::mt19937_64 g(5);
    for (int seed = 0; seed < 5; ++seed) {
        auto w = init_weights(small_dims(2, 3, 2), 100 + seed);
        MatrixXd U = random_inputs(g, 4, 40);
        auto s = cascade_eval(w, U, CascadeMode::sequential);
        auto p1 = cascade_eval(w, U, CascadeMode::parallel, 1);
        auto p3 = cascade_eval(w, U, CascadeMode::parallel, 3);
        CHECK(same(s.output(), p1.output()));
        CHECK(same(s.output(), p3.output()));
        for (std::size_t l = 0; l < 2; ++l)
            for (std::size_t k = 0; k < 3; ++k)
                CHECK(same(s.layers[l].units[k].X, p3.layers[l].units[k].X));
    }
}

TEST_CASE("initialization")
{
    auto a = init_weights(small_dims(), 42), b = init_weights(small_dims(), 42), c = init_weights(small_dims(), 43);
    CHECK((flatten(a).array() == flatten(b).array()).all());
    CHECK(!(flatten(a).array() == flatten(c).array()).all());
    CHECK(flatten(a).allFinite());
    for (const auto& L : a.layers)
        for (const auto& u : L.units) CHECK(u.x0.cwiseAbs().maxCoeff() <= 1.0);
    std::mt19937_64 g(6);
    auto tr = cascade_eval(a, random_inputs(g, 4, 30));
    CHECK(tr.output().allFinite());
    CHECK(value_closure_ok(tr, a));
}

TEST_CASE("closure check detects a foreign value")
{
    std::mt19937_64 g(7);
    auto w = init_weights(small_dims(1, 2, 2), 3);
    auto tr = cascade_eval(w, random_inputs(g, 4, 10));
    CHECK(value_closure_ok(tr, w));
    tr.layers[0].units[1].X(1, 5) += 1e-3;
    CHECK(!value_closure_ok(tr, w));
}

TEST_CASE("parameter counts")
{
    Dims d;
    d.d_in = 2;
    d.d_out = 3;
    d.d_model = 3;
    d.d_state = 1;
    d.n_units = 1;
    d.n_layers = 1;
    d.d_mlp = 1;
    d.n_mlp = 0;
    d.prenorm = false;
    d.residual = false;
    // one affine map per MLP: reset 2->1 (3), set 2->1 (3), x0 (1), output 4->3 (15)
    CHECK(count_params(d) == 3 + 3 + 1 + 15);
    CHECK(init_weights(d, 0).layers[0].out.affine[0].W.size() + 3 == 15);
    MLPWeights lin = affine_only(MatrixXd::Zero(3, 2), VectorXd::Zero(3));
    CHECK(lin.affine[0].W.size() + lin.affine[0].b.size() == 9);

    for (int layers : {1, 2, 3})
        for (int nm : {0, 1, 2})
            for (bool pn : {false, true}) {
                Dims e = small_dims(layers, 3, 2);
                e.n_mlp = nm;
                e.prenorm = pn;
                CHECK(count_params(e) == param_size(init_weights(e, 1)));
            }

    Dims base = small_dims(2, 3, 2);
    base.d_model = 8;  // keep the residual projections present
    const auto c0 = count_params(base);
    for (int field = 0; field < 8; ++field) {
        Dims e = base;
        int* f[] = {&e.d_in, &e.d_out, &e.d_model, &e.d_state, &e.n_units, &e.n_layers, &e.d_mlp, &e.n_mlp};
        *f[field] += 1;
        INFO("field " << field);
        CHECK(count_params(e) > c0);
    }

    // a two-layer configuration near 125k exists
    Dims t;
    t.d_in = 64;
    t.d_out = 80;
    t.d_model = 64;
    t.d_state = 1;
    t.n_units = 32;
    t.n_layers = 2;
    t.n_mlp = 1;
    std::uint64_t best = 0;
    for (int m = 16; m <= 512; m += 8) {
        t.d_mlp = m;
        const auto n = count_params(t);
        if (std::llabs(std::int64_t(n) - 125000) < std::llabs(std::int64_t(best) - 125000)) best = n;
    }
    CHECK(best >= 112500);
    CHECK(best <= 137500);
}

TEST_CASE("flatten round trip and zeros")
{
    auto w = init_weights(small_dims(), 9);
    VectorXd f = flatten(w);
    auto z = zeros_like(w);
    CHECK(flatten(z).cwiseAbs().maxCoeff() == 0.0);
    unflatten(f, z);
    CHECK((flatten(z).array() == f.array()).all());
    CHECK_THROWS_AS(unflatten(VectorXd::Zero(3), z), ShapeError);
}

TEST_CASE("checkpoint round trip")
{
    std::mt19937_64 g(10);
    auto w = init_weights(small_dims(), 11);
    VectorXd f = flatten(w) + 0.01 * VectorXd::Random(param_size(w));
    unflatten(f, w);
    CheckpointExtra ex;
    ex.arrays["embedding"] = random_inputs(g, 4, 7);
    ex.meta["note"] = "x";
    const std::string path = "test_network_ckpt.bin";
    save_checkpoint(path, w, ex);
    CheckpointExtra back;
    auto w2 = load_checkpoint(path, &back);
    CHECK((flatten(w2).array() == f.array()).all());
    CHECK(same(back.arrays.at("embedding"), ex.arrays.at("embedding")));
    CHECK(back.meta.at("note") == "x");
    MatrixXd U = random_inputs(g, 4, 25);
    CHECK(same(cascade_eval(w, U).output(), cascade_eval(w2, U).output()));

    {
        std::FILE* fp = std::fopen(path.c_str(), "r+b");
        std::fputc('X', fp);
        std::fclose(fp);
    }
    CHECK_THROWS_AS(load_checkpoint(path), ShapeError);
    std::remove(path.c_str());
}
