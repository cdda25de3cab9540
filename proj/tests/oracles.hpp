#pragma once

// Independent reference implementations used only by tests. Everything here
// is deliberately written with plain loops over std::vector<double> (no
// Eigen, no shared code with the library) so it can serve as a second route
// for the algebra under test.

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

namespace oracle {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double gate_raw(const std::vector<double>& z, const std::vector<double>& w, double b) {
    if (z.size() != w.size()) throw std::runtime_error("oracle gate: length mismatch");
    double acc = b;
    for (std::size_t i = 0; i < z.size(); ++i) acc += w[i] * z[i];
    return acc;
}

// Softmax written the naive way (no max subtraction); inputs here are
// bounded so overflow is not a concern.
inline std::vector<double> softmax(const std::vector<double>& x) {
    std::vector<double> e(x.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        e[i] = std::exp(x[i]);
        sum += e[i];
    }
    for (auto& v : e) v /= sum;
    return e;
}

struct FusionResult {
    std::vector<double> fused;
    std::vector<double> weights;
};

// Direct evaluation of the gated fusion: weights = softmax(sigmoid(w_i.z_i + b_i)),
// fused = sum_i weights[i] * z_i.
inline FusionResult gated_fusion(const std::vector<std::vector<double>>& inputs,
                                 const std::vector<std::vector<double>>& gate_w,
                                 const std::vector<double>& gate_b, bool skip_sigmoid = false) {
    const std::size_t n = inputs.size();
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double raw = gate_raw(inputs[i], gate_w[i], gate_b[i]);
        scores[i] = skip_sigmoid ? raw : sigmoid(raw);
    }
    FusionResult r;
    r.weights = softmax(scores);
    r.fused.assign(inputs[0].size(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < inputs[0].size(); ++j) r.fused[j] += r.weights[i] * inputs[i][j];
    return r;
}

// Central finite differences of f at x, step h.
inline double central_diff(const std::function<double(double)>& f, double x, double h = 1e-5) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double rel_err(double a, double b, double floor = 1e-8) {
    const double scale = std::max({std::fabs(a), std::fabs(b), floor});
    return std::fabs(a - b) / scale;
}

// ---------------------------------------------------------------------------
// Reference cubic B-spline zoom along one axis (dense collocation solve +
// direct basis evaluation), mirror boundary. Independent of the production
// recursive-filter implementation.
// ---------------------------------------------------------------------------

// Cubic B-spline basis, piecewise evaluation.
inline double bspline3(double t) {
    const double a = std::fabs(t);
    if (a < 1.0) return 2.0 / 3.0 - a * a + 0.5 * a * a * a;
    if (a < 2.0) {
        const double b = 2.0 - a;
        return b * b * b / 6.0;
    }
    return 0.0;
}

// Mirror (whole-sample) index folding onto [0, n-1].
inline int mirror_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    int m = i % period;
    if (m < 0) m += period;
    return m < n ? m : period - m;
}

// Solve for interpolating B-spline coefficients with mirror folding by
// Gaussian elimination on the dense collocation system.
inline std::vector<double> bspline_coeffs_dense(const std::vector<double>& x) {
    const int n = int(x.size());
    if (n == 1) return x;
    std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
    for (int r = 0; r < n; ++r) {
        // f(r) = (c[r-1] + 4 c[r] + c[r+1]) / 6 with mirrored indices
        a[r][mirror_index(r - 1, n)] += 1.0 / 6.0;
        a[r][r] += 4.0 / 6.0;
        a[r][mirror_index(r + 1, n)] += 1.0 / 6.0;
    }
    std::vector<double> rhs = x;
    // plain Gaussian elimination with partial pivoting
    std::vector<int> piv(n);
    for (int i = 0; i < n; ++i) piv[i] = i;
    for (int col = 0; col < n; ++col) {
        int best = col;
        for (int r = col + 1; r < n; ++r)
            if (std::fabs(a[r][col]) > std::fabs(a[best][col])) best = r;
        std::swap(a[col], a[best]);
        std::swap(rhs[col], rhs[best]);
        for (int r = col + 1; r < n; ++r) {
            const double f = a[r][col] / a[col][col];
            if (f == 0.0) continue;
            for (int c = col; c < n; ++c) a[r][c] -= f * a[col][c];
            rhs[r] -= f * rhs[col];
        }
    }
    std::vector<double> c(n);
    for (int r = n - 1; r >= 0; --r) {
        double acc = rhs[r];
        for (int k = r + 1; k < n; ++k) acc -= a[r][k] * c[k];
        c[r] = acc / a[r][r];
    }
    return c;
}

// Evaluate the spline at arbitrary coordinate t (mirrored extension).
inline double bspline_eval(const std::vector<double>& coeffs, double t) {
    const int n = int(coeffs.size());
    if (n == 1) return coeffs[0];
    const int base = int(std::floor(t));
    double acc = 0.0;
    for (int k = base - 1; k <= base + 2; ++k)
        acc += coeffs[mirror_index(k, n)] * bspline3(t - k);
    return acc;
}

// Endpoint-aligned zoom of a 1-D profile to target length.
inline std::vector<double> reference_spline_zoom(const std::vector<double>& x, int target) {
    if (target < 1) throw std::runtime_error("oracle zoom: target must be >= 1");
    const int n = int(x.size());
    std::vector<double> out(target);
    if (n == 1) {
        for (auto& v : out) v = x[0];
        return out;
    }
    const std::vector<double> c = bspline_coeffs_dense(x);
    if (target == 1) {
        out[0] = bspline_eval(c, 0.5 * (n - 1));
        return out;
    }
    const double step = double(n - 1) / double(target - 1);
    for (int o = 0; o < target; ++o) out[o] = bspline_eval(c, o * step);
    return out;
}

// ---------------------------------------------------------------------------
// Student-t distribution via adaptive Simpson quadrature of the density.
// ---------------------------------------------------------------------------

inline double t_pdf(double x, int dof) {
    // gamma ratio via lgamma
    const double v = double(dof);
    const double lg = std::lgamma((v + 1.0) / 2.0) - std::lgamma(v / 2.0);
    const double norm = std::exp(lg) / std::sqrt(v * 3.14159265358979323846);
    return norm * std::pow(1.0 + x * x / v, -(v + 1.0) / 2.0);
}

inline double simpson(const std::function<double(double)>& f, double a, double b, int steps) {
    double h = (b - a) / steps;
    double acc = f(a) + f(b);
    for (int i = 1; i < steps; ++i) acc += f(a + i * h) * (i % 2 == 1 ? 4.0 : 2.0);
    return acc * h / 3.0;
}

// Two-sided p-value for |t| with the given degrees of freedom. The tail
// integral is taken in the substituted variable u = 1/x so the infinite
// upper limit maps to u = 0 with no truncation error.
inline double t_two_sided_p(double t_abs, int dof) {
    if (t_abs == 0.0) return 1.0;
    auto g = [dof](double u) {
        if (u == 0.0) return dof == 1 ? 1.0 / 3.14159265358979323846 : 0.0;
        const double x = 1.0 / u;
        return t_pdf(x, dof) * x * x;
    };
    const double tail = simpson(g, 0.0, 1.0 / t_abs, 20000);
    return 2.0 * tail;
}

// ---------------------------------------------------------------------------
// AUC by brute-force pairwise counting (ties count half).
// ---------------------------------------------------------------------------
inline double auc_bruteforce(const std::vector<double>& scores, const std::vector<int>& labels) {
    double wins = 0.0;
    long pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j])
                wins += 1.0;
            else if (scores[i] == scores[j])
                wins += 0.5;
        }
    }
    if (pairs == 0) throw std::runtime_error("oracle auc: need both classes");
    return wins / double(pairs);
}

}  // namespace oracle
