#pragma once
#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "minmax/errors.hpp"

namespace mm {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatD = Mat<double>;
using VecD = Vec<double>;

struct OpCount {
    std::uint64_t oplus = 0;
    std::uint64_t odot = 0;
    OpCount& operator+=(const OpCount& o)
    {
        oplus += o.oplus;
        odot += o.odot;
        return *this;
    }
};

template <class S>
struct StepPair {
    Mat<S> A;
    Vec<S> b;
    Eigen::Index dim() const { return A.rows(); }
};

template <class S>
struct MonoidBounds {
    S v_min;
    S v_max;
};

template <class S>
inline void require_finite_scalar(S a, const char* what)
{
    if (!std::isfinite(a)) throw DomainError(std::string(what) + ": non-finite operand");
}

template <class Derived>
inline void require_finite(const Eigen::DenseBase<Derived>& m, const char* what)
{
    if (!m.allFinite()) throw DomainError(std::string(what) + ": non-finite entry");
}

template <class S>
inline S oplus(S a, S b)
{
    if (std::isnan(a) || std::isnan(b)) throw DomainError("oplus: NaN operand");
    return a < b ? b : a;
}

template <class S>
inline S odot(S a, S b)
{
    if (std::isnan(a) || std::isnan(b)) throw DomainError("odot: NaN operand");
    return b < a ? b : a;
}

namespace detail {

template <class S>
inline S mx(S a, S b) { return a < b ? b : a; }
template <class S>
inline S mn(S a, S b) { return b < a ? b : a; }

// C = A (x) B, no checks; C must not alias A or B
template <class S, class DA, class DB, class DC>
inline void matmul_raw(const Eigen::MatrixBase<DA>& A, const Eigen::MatrixBase<DB>& B,
                       Eigen::MatrixBase<DC>& C, OpCount* cnt)
{
    const Eigen::Index m = A.rows(), p = A.cols(), n = B.cols();
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < n; ++j) {
            S acc = mn<S>(A(i, 0), B(0, j));
            for (Eigen::Index k = 1; k < p; ++k) acc = mx<S>(acc, mn<S>(A(i, k), B(k, j)));
            C(i, j) = acc;
        }
    if (cnt) {
        cnt->odot += std::uint64_t(m * n * p);
        cnt->oplus += std::uint64_t(m * n * (p - 1));
    }
}

}  // namespace detail

template <class DA, class DB>
Mat<typename DA::Scalar> mm_matmul(const Eigen::MatrixBase<DA>& A, const Eigen::MatrixBase<DB>& B,
                                   OpCount* cnt = nullptr)
{
    using S = typename DA::Scalar;
    if (A.cols() != B.rows() || A.cols() == 0)
        throw ShapeError("mm_matmul: inner dimensions " + std::to_string(A.cols()) + " vs " +
                         std::to_string(B.rows()));
    require_finite(A, "mm_matmul");
    require_finite(B, "mm_matmul");
    Mat<S> C(A.rows(), B.cols());
    detail::matmul_raw<S>(A, B, C, cnt);
    return C;
}

template <class S>
Vec<S> oplus(const Vec<S>& a, const Vec<S>& b)
{
    if (a.size() != b.size()) throw ShapeError("oplus: length mismatch");
    return a.binaryExpr(b, [](S x, S y) { return oplus(x, y); });
}

template <class S>
Vec<S> odot(const Vec<S>& a, const Vec<S>& b)
{
    if (a.size() != b.size()) throw ShapeError("odot: length mismatch");
    return a.binaryExpr(b, [](S x, S y) { return odot(x, y); });
}

namespace detail {

template <class S>
inline void compose_raw(const StepPair<S>& M1, const StepPair<S>& M2, StepPair<S>& out, OpCount* cnt)
{
    const Eigen::Index n = M1.A.rows();
    out.A.resize(n, n);
    out.b.resize(n);
    matmul_raw<S>(M2.A, M1.A, out.A, cnt);
    matmul_raw<S>(M2.A, M1.b, out.b, cnt);
    for (Eigen::Index i = 0; i < n; ++i) out.b(i) = mx<S>(out.b(i), M2.b(i));
    if (cnt) cnt->oplus += std::uint64_t(n);
}

template <class S>
inline void apply_raw(const StepPair<S>& M, const Vec<S>& x, Vec<S>& out, OpCount* cnt)
{
    const Eigen::Index n = M.A.rows();
    out.resize(n);
    matmul_raw<S>(M.A, x, out, cnt);
    for (Eigen::Index i = 0; i < n; ++i) out(i) = mx<S>(out(i), M.b(i));
    if (cnt) cnt->oplus += std::uint64_t(n);
}

}  // namespace detail

template <class S>
void check_pair(const StepPair<S>& M, const char* what)
{
    if (M.A.rows() != M.A.cols() || M.A.rows() == 0)
        throw ShapeError(std::string(what) + ": A must be square and non-empty");
    if (M.b.size() != M.A.rows()) throw ShapeError(std::string(what) + ": b length differs from A");
    require_finite(M.A, what);
    require_finite(M.b, what);
}

// <A1,b1> (*) <A2,b2> = <A2 (x) A1, (A2 (x) b1) (+) b2>: first M1, then M2
template <class S>
StepPair<S> compose(const StepPair<S>& M1, const StepPair<S>& M2, OpCount* cnt = nullptr)
{
    check_pair(M1, "compose");
    check_pair(M2, "compose");
    if (M1.dim() != M2.dim()) throw ShapeError("compose: dimension mismatch");
    StepPair<S> out;
    detail::compose_raw(M1, M2, out, cnt);
    return out;
}

template <class S>
StepPair<S> identity_element(const MonoidBounds<S>& bounds, Eigen::Index n)
{
    require_finite_scalar(bounds.v_min, "identity_element");
    require_finite_scalar(bounds.v_max, "identity_element");
    if (bounds.v_min > bounds.v_max) throw DomainError("identity_element: v_min > v_max");
    if (n < 1) throw DomainError("identity_element: n must be >= 1");
    StepPair<S> E;
    E.A = Mat<S>::Constant(n, n, bounds.v_min);
    E.A.diagonal().setConstant(bounds.v_max);
    E.b = Vec<S>::Constant(n, bounds.v_min);
    return E;
}

template <class S>
Vec<S> apply(const StepPair<S>& M, const Vec<S>& x, OpCount* cnt = nullptr)
{
    check_pair(M, "apply");
    if (x.size() != M.dim()) throw ShapeError("apply: state length differs from A");
    require_finite(x, "apply");
    Vec<S> out;
    detail::apply_raw(M, x, out, cnt);
    return out;
}

// Pairwise reductions; an odd group is folded as a triple at the end.
template <class S, class Op>
S tree_reduce(std::vector<S> v, Op op, std::uint64_t* cnt)
{
    if (v.empty()) throw DomainError("reduce: empty input");
    while (v.size() > 1) {
        const std::size_t n = v.size(), m = n / 2;
        std::vector<S> next(m);
        for (std::size_t i = 0; i < m; ++i) next[i] = op(v[2 * i], v[2 * i + 1]);
        if (cnt) *cnt += m;
        if (n % 2 == 1) {
            next[m - 1] = op(next[m - 1], v[n - 1]);
            if (cnt) *cnt += 1;
        }
        v.swap(next);
    }
    return v[0];
}

template <class S>
S parallel_max(std::vector<S> v, OpCount* cnt = nullptr)
{
    return tree_reduce(std::move(v), [](S a, S b) { return detail::mx<S>(a, b); },
                       cnt ? &cnt->oplus : nullptr);
}

template <class S>
S parallel_min(std::vector<S> v, OpCount* cnt = nullptr)
{
    return tree_reduce(std::move(v), [](S a, S b) { return detail::mn<S>(a, b); },
                       cnt ? &cnt->odot : nullptr);
}

template <class S>
bool same_values(const StepPair<S>& a, const StepPair<S>& b)
{
    return a.A.rows() == b.A.rows() && a.A.cols() == b.A.cols() && a.b.size() == b.b.size() &&
           (a.A.array() == b.A.array()).all() && (a.b.array() == b.b.array()).all();
}

}  // namespace mm
