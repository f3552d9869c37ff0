#pragma once

#include <cmath>
#include <utility>
#include <vector>

namespace enkbf {

/// Ordinary least squares fit of y on x, with the coefficient of
/// determination. Callers pass log2-transformed points when fitting rates.
struct SlopeFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    std::vector<std::pair<double, double>> points;
};

inline SlopeFit fit_line(std::vector<std::pair<double, double>> points) {
    SlopeFit fit;
    fit.points = std::move(points);
    const std::size_t n = fit.points.size();
    if (n < 2) return fit;

    double sx = 0, sy = 0;
    for (const auto& [x, y] : fit.points) {
        sx += x;
        sy += y;
    }
    const double mx = sx / n;
    const double my = sy / n;
    double sxx = 0, sxy = 0, syy = 0;
    for (const auto& [x, y] : fit.points) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if (sxx == 0) return fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    fit.r_squared = syy > 0 ? (sxy * sxy) / (sxx * syy) : 1.0;
    return fit;
}

/// OLS on (log2 x, log2 y).
inline SlopeFit fit_loglog2(const std::vector<double>& xs, const std::vector<double>& ys) {
    std::vector<std::pair<double, double>> pts;
    pts.reserve(xs.size());
    for (std::size_t i = 0; i < xs.size() && i < ys.size(); ++i)
        pts.emplace_back(std::log2(xs[i]), std::log2(ys[i]));
    return fit_line(std::move(pts));
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double variance_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
}

/// Standard error of the sample mean.
inline double stderr_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    return std::sqrt(variance_of(v) / static_cast<double>(v.size()));
}

} // namespace enkbf
