#pragma once
#include <vector>

#include "minmax/algebra.hpp"
#include "minmax/parallel.hpp"

namespace mm {

template <class S>
struct RecurrenceInput {
    Vec<S> x_init;
    std::vector<Mat<S>> A;
    std::vector<Vec<S>> b;
    std::size_t T() const { return A.size(); }
    Eigen::Index N() const { return x_init.size(); }
};

template <class S>
using Trajectory = std::vector<Vec<S>>;

enum class EvalMode { sequential, scan };

template <class S>
void validate(const RecurrenceInput<S>& in)
{
    if (in.A.empty()) throw ShapeError("recurrence: T must be >= 1");
    if (in.A.size() != in.b.size()) throw ShapeError("recurrence: A and b sequences differ in length");
    const Eigen::Index n = in.N();
    if (n < 1) throw ShapeError("recurrence: empty state");
    require_finite(in.x_init, "recurrence");
    for (std::size_t t = 0; t < in.A.size(); ++t) {
        if (in.A[t].rows() != n || in.A[t].cols() != n || in.b[t].size() != n)
            throw ShapeError("recurrence: step " + std::to_string(t) + " has wrong shape");
        require_finite(in.A[t], "recurrence");
        require_finite(in.b[t], "recurrence");
    }
}

template <class S>
Trajectory<S> seq_rec_eval(const RecurrenceInput<S>& in, OpCount* cnt = nullptr)
{
    validate(in);
    const Eigen::Index n = in.N();
    Trajectory<S> X(in.T());
    const Vec<S>* prev = &in.x_init;
    for (std::size_t t = 0; t < in.T(); ++t) {
        const auto& A = in.A[t];
        const auto& b = in.b[t];
        Vec<S>& x = X[t];
        x.resize(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            S z = b(i);
            for (Eigen::Index j = 0; j < n; ++j) z = detail::mx<S>(z, detail::mn<S>(A(i, j), (*prev)(j)));
            x(i) = z;
        }
        prev = &x;
    }
    if (cnt) {
        cnt->oplus += std::uint64_t(in.T() * n * n);
        cnt->odot += std::uint64_t(in.T() * n * n);
    }
    return X;
}

namespace detail {

template <class S>
std::vector<StepPair<S>> scan_rec(const std::vector<StepPair<S>>& steps, const StepPair<S>& E,
                                  int workers, OpCount* cnt)
{
    const std::size_t T = steps.size();
    if (T == 1) return {E};
    const std::size_t m = T / 2, l = (T + 1) / 2;
    std::vector<StepPair<S>> X(l);
    parallel_for(m, workers, [&](std::size_t t) {
        compose_raw(steps[2 * t], steps[2 * t + 1], X[t], cnt);
    });
    if (T % 2 == 1) X[l - 1] = steps[T - 1];
    std::vector<StepPair<S>> Z = scan_rec(X, E, workers, cnt);
    std::vector<StepPair<S>> C(T);
    parallel_for(T, workers, [&](std::size_t t) {
        if (t % 2 == 0)
            C[t] = Z[t / 2];
        else
            compose_raw(Z[(t - 1) / 2], steps[t - 1], C[t], cnt);
    });
    return C;
}

}  // namespace detail

// Counting (cnt != nullptr) forces a single worker.
// Exclusive prefixes: out[t] = step_0 (*) ... (*) step_{t-1}, out[0] = identity.
template <class S>
std::vector<StepPair<S>> parallel_scan(const std::vector<Mat<S>>& A, const std::vector<Vec<S>>& b,
                                       const MonoidBounds<S>& bounds, int workers = 1,
                                       OpCount* cnt = nullptr)
{
    if (A.empty() || A.size() != b.size()) throw ShapeError("parallel_scan: bad sequence lengths");
    const Eigen::Index n = A[0].rows();
    StepPair<S> E = identity_element(bounds, n);
    std::vector<StepPair<S>> steps(A.size());
    for (std::size_t t = 0; t < A.size(); ++t) {
        steps[t] = StepPair<S>{A[t], b[t]};
        check_pair(steps[t], "parallel_scan");
        if (steps[t].dim() != n) throw ShapeError("parallel_scan: dimension changes along the sequence");
        if (A[t].minCoeff() < bounds.v_min || A[t].maxCoeff() > bounds.v_max ||
            b[t].minCoeff() < bounds.v_min || b[t].maxCoeff() > bounds.v_max)
            throw DomainError("parallel_scan: entry outside the monoid bounds at step " + std::to_string(t));
    }
    if (cnt) workers = 1;
    return detail::scan_rec(steps, E, workers, cnt);
}

template <class S>
MonoidBounds<S> instance_bounds(const RecurrenceInput<S>& in, OpCount* cnt = nullptr)
{
    std::vector<S> vals(in.x_init.data(), in.x_init.data() + in.x_init.size());
    for (std::size_t t = 0; t < in.T(); ++t) vals.insert(vals.end(), in.A[t].data(), in.A[t].data() + in.A[t].size());
    for (std::size_t t = 0; t < in.T(); ++t) vals.insert(vals.end(), in.b[t].data(), in.b[t].data() + in.b[t].size());
    S lo = parallel_min(vals, cnt);
    S hi = parallel_max(std::move(vals), cnt);
    return {lo, hi};
}

template <class S>
Trajectory<S> parallel_rec_eval(const RecurrenceInput<S>& in, int workers = 1, OpCount* cnt = nullptr)
{
    validate(in);
    if (cnt) workers = 1;
    MonoidBounds<S> bounds = instance_bounds(in, cnt);
    auto C = parallel_scan(in.A, in.b, bounds, workers, cnt);
    Trajectory<S> X(in.T());
    parallel_for(in.T(), workers, [&](std::size_t t) {
        StepPair<S> Z;
        detail::compose_raw(C[t], StepPair<S>{in.A[t], in.b[t]}, Z, cnt);
        detail::apply_raw(Z, in.x_init, X[t], cnt);
    });
    return X;
}

template <class S>
std::pair<Trajectory<S>, OpCount> op_counter_eval(const RecurrenceInput<S>& in, EvalMode mode)
{
    OpCount c;
    Trajectory<S> X = mode == EvalMode::sequential ? seq_rec_eval(in, &c) : parallel_rec_eval(in, 1, &c);
    return {std::move(X), c};
}

}  // namespace mm
