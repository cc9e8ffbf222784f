#pragma once

// Dense numerical kernels used across the pipeline: a row-major matrix,
// a reproducible random stream, SPD inversion, the exact equality-constrained
// quadratic minimizer, and deterministic top-k selection.
//
// Everything is 64-bit floating point and free of shared state.

#include <algorithm>
#include <bit>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hcnr/errors.hpp"

namespace hcnr {

using Vector = std::vector<double>;

// ============================================================================
// MATRIX
// ============================================================================

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix diagonal(std::span<const double> diag) {
        Matrix m(diag.size(), diag.size());
        for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
        return m;
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.begin()->size();
        Matrix m(r, c);
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c) throw ContractViolation("Matrix::from_rows: ragged rows");
            std::copy(row.begin(), row.end(), m.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
            ++i;
        }
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept {
        assert(r < rows_ && c < cols_);
        return data_[r * cols_ + c];
    }
    double operator()(std::size_t r, std::size_t c) const noexcept {
        assert(r < rows_ && c < cols_);
        return data_[r * cols_ + c];
    }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    Vector column(std::size_t c) const {
        Vector out(rows_);
        for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
        return out;
    }

    Matrix transposed() const {
        Matrix t(cols_, rows_);
        for (std::size_t r = 0; r < rows_; ++r)
            for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
        return t;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ContractViolation(std::string(what) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
}

// C = A * B
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw ContractViolation("matmul: inner dimension mismatch");
    Matrix c(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* ci = c.row(i).data();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* bk = b.row(k).data();
            for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

// C = A^T * B
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw ContractViolation("matmul_tn: inner dimension mismatch");
    Matrix c(a.cols(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* bk = b.row(k).data();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            double* ci = c.row(i).data();
            for (std::size_t j = 0; j < n; ++j) ci[j] += aki * bk[j];
        }
    }
    return c;
}

// C = A * B^T (via an explicit transpose so the inner loop streams rows).
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw ContractViolation("matmul_nt: inner dimension mismatch");
    return matmul(a, b.transposed());
}

inline Vector matvec(const Matrix& a, std::span<const double> x) {
    if (a.cols() != x.size()) throw ContractViolation("matvec: dimension mismatch");
    Vector y(a.rows(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto r = a.row(i);
        double s = 0.0;
        for (std::size_t k = 0; k < x.size(); ++k) s += r[k] * x[k];
        y[i] = s;
    }
    return y;
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "subtract");
    Matrix c = a;
    auto cd = c.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < cd.size(); ++i) cd[i] -= bd[i];
    return c;
}

inline double frobenius_sq(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    return s;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

inline double mean_diagonal(const Matrix& m) {
    if (m.rows() == 0) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) s += m(i, i);
    return s / static_cast<double>(m.rows());
}

inline double trace(const Matrix& m) {
    double s = 0.0;
    for (std::size_t i = 0; i < std::min(m.rows(), m.cols()); ++i) s += m(i, i);
    return s;
}

// ============================================================================
// HASHING
// ============================================================================

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = kFnvOffset) noexcept {
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= kFnvPrime;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

// ============================================================================
// RANDOM STREAM
// ============================================================================

// SplitMix64 finalizer (Steele, Lea & Flood 2014).
inline constexpr std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Counter-based SplitMix64 stream: the i-th draw is mix(seed + (i+1)*golden).
// Named substreams are derived by hashing the name into the seed, so two
// stages never share randomness unless they share a name.
//
// Integer draws are platform independent; normal() goes through libm.
class RngStream {
public:
    static constexpr std::string_view algorithm = "splitmix64-counter";

    explicit RngStream(std::uint64_t seed) noexcept : seed_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t counter() const noexcept { return counter_; }

    RngStream split(std::string_view name) const noexcept {
        return RngStream(splitmix64_mix(seed_ ^ fnv1a64(name)) ^ 0x5851f42d4c957f2dULL);
    }

    std::uint64_t next_u64() noexcept {
        ++counter_;
        return splitmix64_mix(seed_ + counter_ * 0x9e3779b97f4a7c15ULL);
    }

    // Uniform in [0, 1).
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n); rejection sampling keeps it unbiased.
    std::size_t uniform_index(std::size_t n) {
        if (n == 0) throw ContractViolation("RngStream::uniform_index: empty range");
        const std::uint64_t bound = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % bound;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return static_cast<std::size_t>(x % bound);
    }

    // Box-Muller, one normal per call.
    double normal() noexcept {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = uniform_index(i);
            std::swap(items[i - 1], items[j]);
        }
    }

    // k distinct indices from [0, n), in draw order.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        if (k > n) throw ContractViolation("sample_without_replacement: k > n");
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + uniform_index(n - i);
            std::swap(idx[i], idx[j]);
        }
        idx.resize(k);
        return idx;
    }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

// Random SPD matrix A = G G^T / d + shift * I, used by tests and validators.
inline Matrix random_spd(std::size_t d, RngStream& rng, double shift = 0.1) {
    Matrix g(d, d);
    for (double& v : g.data()) v = rng.normal();
    Matrix a = matmul_nt(g, g);
    for (double& v : a.data()) v /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) a(i, i) += shift;
    return a;
}

// ============================================================================
// SPD INVERSION
// ============================================================================

inline bool is_symmetric(const Matrix& m, double rel_tol = 1e-12) {
    if (m.rows() != m.cols()) return false;
    double scale = 0.0;
    for (double v : m.data()) scale = std::max(scale, std::abs(v));
    const double tol = rel_tol * std::max(scale, 1.0);
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = i + 1; j < m.cols(); ++j)
            if (std::abs(m(i, j) - m(j, i)) > tol) return false;
    return true;
}

// Lower-triangular L with A = L L^T. Returns false if a pivot is not
// strictly positive.
inline bool cholesky_lower(const Matrix& a, Matrix& l) {
    const std::size_t n = a.rows();
    l = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double diag = a(j, j);
        for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
        if (!(diag > 0.0) || !std::isfinite(diag)) return false;
        const double ljj = std::sqrt(diag);
        l(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / ljj;
        }
    }
    return true;
}

// (M + lambda*I)^-1 through a Cholesky factorization. `label` names the
// layer in the error message when the damped matrix is not positive definite.
inline Matrix damped_spd_inverse(const Matrix& m, double lambda, std::string_view label = "matrix") {
    if (m.rows() != m.cols()) throw ContractViolation("damped_spd_inverse: matrix is not square");
    if (!is_symmetric(m)) throw ContractViolation("damped_spd_inverse: matrix is not symmetric");
    if (!(lambda >= 0.0) || !std::isfinite(lambda))
        throw ContractViolation("damped_spd_inverse: damping must be a finite nonnegative value");

    const std::size_t n = m.rows();
    Matrix damped = m;
    for (std::size_t i = 0; i < n; ++i) damped(i, i) += lambda;

    Matrix l;
    if (!cholesky_lower(damped, l))
        throw NumericalError("indefinite Hessian at " + std::string(label) +
                             ": Cholesky factorization failed after damping (lambda=" +
                             std::to_string(lambda) + ")");

    // Invert L by forward substitution, then A^-1 = L^-T L^-1.
    Matrix linv(n, n);
    for (std::size_t col = 0; col < n; ++col) {
        linv(col, col) = 1.0 / l(col, col);
        for (std::size_t i = col + 1; i < n; ++i) {
            double s = 0.0;
            for (std::size_t k = col; k < i; ++k) s -= l(i, k) * linv(k, col);
            linv(i, col) = s / l(i, i);
        }
    }
    Matrix inv = matmul_tn(linv, linv);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double s = 0.5 * (inv(i, j) + inv(j, i));
            inv(i, j) = s;
            inv(j, i) = s;
        }
    return inv;
}

// ============================================================================
// LINEAR SOLVE (partial-pivot Gaussian elimination)
// ============================================================================

// Solves A x = b. Throws NumericalError on a (numerically) singular pivot.
inline Vector solve_linear(Matrix a, Vector b) {
    const std::size_t n = a.rows();
    if (a.cols() != n || b.size() != n) throw ContractViolation("solve_linear: dimension mismatch");
    double scale = 0.0;
    for (double v : a.data()) scale = std::max(scale, std::abs(v));
    const double tiny = scale * 1e-14 * static_cast<double>(std::max<std::size_t>(n, 1));

    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
        if (!(std::abs(a(pivot, col)) > tiny))
            throw NumericalError("solve_linear: singular system at column " + std::to_string(col));
        if (pivot != col) {
            for (std::size_t c = 0; c < n; ++c) std::swap(a(col, c), a(pivot, c));
            std::swap(b[col], b[pivot]);
        }
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a(r, col) / a(col, col);
            if (f == 0.0) continue;
            for (std::size_t c = col; c < n; ++c) a(r, c) -= f * a(col, c);
            b[r] -= f * b[col];
        }
    }
    Vector x(n);
    for (std::size_t i = n; i-- > 0;) {
        double s = b[i];
        for (std::size_t c = i + 1; c < n; ++c) s -= a(i, c) * x[c];
        x[i] = s / a(i, i);
    }
    return x;
}

// argmin_v v^T H v subject to v[k] = delta. Eliminates v[k] and solves the
// reduced stationarity system H_ff v_f = -H_fk * delta directly; this is an
// independent route to the closed-form OBS compensation vector.
inline Vector constrained_quadratic_min(const Matrix& h, std::size_t fixed_index, double fixed_value) {
    const std::size_t d = h.rows();
    if (h.cols() != d) throw ContractViolation("constrained_quadratic_min: H must be square");
    if (fixed_index >= d) throw ContractViolation("constrained_quadratic_min: fixed index out of range");

    Vector v(d, 0.0);
    v[fixed_index] = fixed_value;
    if (d == 1) return v;

    Matrix reduced(d - 1, d - 1);
    Vector rhs(d - 1);
    auto map = [fixed_index](std::size_t i) { return i < fixed_index ? i : i + 1; };
    for (std::size_t i = 0; i + 1 < d; ++i) {
        for (std::size_t j = 0; j + 1 < d; ++j) reduced(i, j) = h(map(i), map(j));
        rhs[i] = -h(map(i), fixed_index) * fixed_value;
    }
    Vector free = solve_linear(std::move(reduced), std::move(rhs));
    for (std::size_t i = 0; i + 1 < d; ++i) v[map(i)] = free[i];
    return v;
}

// Closed-form single-coordinate OBS update: (delta / [H^-1]_kk) * H^-1[:, k].
inline Vector obs_compensation_vector(const Matrix& h_inv, std::size_t k, double delta) {
    if (k >= h_inv.rows()) throw ContractViolation("obs_compensation_vector: index out of range");
    const double pivot = h_inv(k, k);
    if (!(pivot > 0.0)) throw NumericalError("obs_compensation_vector: nonpositive [H^-1]_kk");
    Vector c = h_inv.column(k);
    for (double& v : c) v *= delta / pivot;
    return c;
}

// ============================================================================
// SELECTION
// ============================================================================

// Indices of the k largest scores, ordered by descending score then
// ascending index.
inline std::vector<std::size_t> stable_topk(std::span<const double> scores, std::size_t k) {
    if (k > scores.size()) throw ContractViolation("stable_topk: k exceeds number of scores");
    for (double s : scores)
        if (!std::isfinite(s)) throw ContractViolation("stable_topk: non-finite score");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (scores[a] != scores[b]) return scores[a] > scores[b];
                          return a < b;
                      });
    idx.resize(k);
    return idx;
}

}  // namespace hcnr
