#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "enkbf/errors.hpp"

namespace enkbf {

namespace detail {

inline constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

// Stafford mix13 finalizer, the same bijection splitmix64 uses.
inline std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

} // namespace detail

/// Mixes extra labels into a master seed; used to hand independent seeds to
/// nested estimators without spending stream path depth.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0) {
    return detail::mix64(detail::mix64(master ^ detail::kGamma) + a * detail::kGamma + b);
}

/// Counter-based random stream addressed by (master seed, path).
///
/// Streams form a tree: child(i) appends one path element. The same
/// (seed, path) always reproduces the same output sequence, and outputs of
/// distinct paths are decorrelated through the key hash, so replicates can
/// be generated in any order or concurrently with identical results.
class RngStream {
public:
    static constexpr std::size_t kMaxDepth = 8;

    RngStream() : key_(detail::mix64(detail::kGamma)), depth_(0) {}

    static RngStream derive(std::uint64_t master_seed, std::span<const std::uint64_t> path) {
        if (path.size() > kMaxDepth)
            throw PathTooDeep("rng stream path longer than " + std::to_string(kMaxDepth));
        RngStream s;
        s.key_ = detail::mix64(master_seed ^ detail::kGamma);
        s.depth_ = 0;
        for (std::uint64_t e : path) s = s.child(e);
        return s;
    }

    static RngStream derive(std::uint64_t master_seed,
                            std::initializer_list<std::uint64_t> path) {
        std::vector<std::uint64_t> p(path);
        return derive(master_seed, std::span<const std::uint64_t>(p));
    }

    /// Sub-stream obtained by appending `index` to the path.
    RngStream child(std::uint64_t index) const {
        if (depth_ >= kMaxDepth)
            throw PathTooDeep("rng stream path longer than " + std::to_string(kMaxDepth));
        RngStream s;
        s.key_ = detail::mix64(key_ + detail::mix64(index * detail::kGamma + 0x632BE59BD9B4E019ull));
        s.depth_ = depth_ + 1;
        s.counter_ = 0;
        s.has_spare_ = false;
        return s;
    }

    std::uint64_t next_u64() { return detail::mix64(key_ + (++counter_) * detail::kGamma); }

    /// Uniform draw on (0, 1].
    double next_uniform() {
        return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller; pairs are cached.
    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = next_uniform();
        const double u2 = next_uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    Eigen::VectorXd normal_vector(Eigen::Index n) {
        Eigen::VectorXd v(n);
        for (Eigen::Index i = 0; i < n; ++i) v[i] = next_normal();
        return v;
    }

    /// Row-major fill; row i is particle i's draw.
    Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols) {
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = next_normal();
        return m;
    }

    std::size_t depth() const { return depth_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    std::size_t depth_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace enkbf
