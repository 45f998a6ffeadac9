#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace deepqc {

/// Savitzky-Golay convolution weights for the centre of a window, indexed
/// from offset -half to +half.
struct SgKernel {
    std::size_t window = 0;
    int order = 0;
    int derivative = 0;
    std::vector<double> coefficients;

    std::size_t half() const { return window / 2; }
    double at(std::ptrdiff_t offset) const {
        return coefficients[static_cast<std::size_t>(offset + static_cast<std::ptrdiff_t>(half()))];
    }
};

/// Least-squares polynomial fit of `order` over `window` equally spaced
/// samples (unit spacing), evaluated at the centre. Derivative kernels carry
/// the d! factor so they return the d-th derivative per step^d.
inline SgKernel sg_kernel(std::size_t window, int order, int derivative) {
    if (window % 2 == 0 || window < 1) throw std::invalid_argument("sg_kernel: window must be odd");
    if (order < 0 || static_cast<std::size_t>(order) >= window) {
        throw std::invalid_argument("sg_kernel: need window > order >= 0");
    }
    if (derivative < 0 || derivative > order) throw std::invalid_argument("sg_kernel: need order >= derivative >= 0");

    const auto m = static_cast<Eigen::Index>(window);
    const auto p = static_cast<Eigen::Index>(order + 1);
    const auto half = m / 2;
    Eigen::MatrixXd a(m, p);
    for (Eigen::Index i = 0; i < m; ++i) {
        const double x = static_cast<double>(i - half);
        double pw = 1.0;
        for (Eigen::Index j = 0; j < p; ++j) {
            a(i, j) = pw;
            pw *= x;
        }
    }
    // Row `derivative` of the pseudo-inverse maps samples to that polynomial coefficient.
    const Eigen::MatrixXd pinv = a.colPivHouseholderQr().solve(Eigen::MatrixXd::Identity(m, m));
    double factorial = 1.0;
    for (int k = 2; k <= derivative; ++k) factorial *= k;

    SgKernel kernel{window, order, derivative, std::vector<double>(window)};
    for (Eigen::Index i = 0; i < m; ++i) kernel.coefficients[static_cast<std::size_t>(i)] = factorial * pinv(derivative, i);

    // Enforce the exact (anti)symmetry the fit has in exact arithmetic.
    const double sign = derivative % 2 == 0 ? 1.0 : -1.0;
    for (Eigen::Index k = 1; k <= half; ++k) {
        auto& lo = kernel.coefficients[static_cast<std::size_t>(half - k)];
        auto& hi = kernel.coefficients[static_cast<std::size_t>(half + k)];
        const double avg = 0.5 * (hi + sign * lo);
        hi = avg;
        lo = sign * avg;
    }
    if (derivative % 2 == 1) kernel.coefficients[static_cast<std::size_t>(half)] = 0.0;
    return kernel;
}

/// Convolves the kernel with `x`. Positions whose window runs past either end
/// or touches a NaN (missing) sample come out NaN. Symmetric pairs are summed
/// first, so a locally constant input yields exactly zero derivatives.
inline std::vector<double> sg_apply(std::span<const double> x, const SgKernel& kernel) {
    const std::size_t n = x.size(), h = kernel.half();
    std::vector<double> out(n, std::numeric_limits<double>::quiet_NaN());
    if (n < kernel.window) return out;
    const bool odd = kernel.derivative % 2 == 1;
    const double* w = kernel.coefficients.data() + h;
    for (std::size_t t = h; t + h < n; ++t) {
        double acc = odd ? 0.0 * x[t] : w[0] * x[t];  // 0 * NaN keeps a missing centre missing
        for (std::size_t k = 1; k <= h; ++k) {
            acc += odd ? w[k] * (x[t + k] - x[t - k]) : w[k] * (x[t + k] + x[t - k]);
        }
        out[t] = acc;
    }
    return out;
}

}  // namespace deepqc
