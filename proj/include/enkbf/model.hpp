#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "enkbf/errors.hpp"
#include "enkbf/rng.hpp"

namespace enkbf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline Matrix symmetrize(const Matrix& x) { return 0.5 * (x + x.transpose()); }

/// Symmetric PSD square root via eigendecomposition. Negative eigenvalues
/// (roundoff on PSD inputs) are clamped to zero.
inline Matrix symmetric_sqrt(const Matrix& a) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(a));
    Vector lam = es.eigenvalues().cwiseMax(0.0);
    return es.eigenvectors() * lam.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

/// Linear-Gaussian state-space model
///
///   dX_t = A X_t dt + R1^{1/2} dW_t
///   dY_t = C X_t dt + R2^{1/2} dV_t,    X_0 ~ N(m0, P0).
///
/// Derived quantities (square roots, S = C' R2^{-1} C, the R2 factorization)
/// are computed once at construction and reused by every filter step.
/// Immutable after construction; safe to share across threads by reference.
struct Model {
    int d_x = 0;
    int d_y = 0;
    Matrix A;
    Matrix C;
    Matrix R1;
    Matrix R2;
    Vector m0;
    Matrix P0;
    std::uint64_t seed = 0;

    // derived
    Matrix R1_sqrt;
    Matrix R2_sqrt;
    Matrix P0_sqrt;
    Matrix S;
    Eigen::LLT<Matrix> R2_llt;
    bool R2_spd = false;

    static Model create(Matrix A, Matrix C, Matrix R1, Matrix R2, Vector m0, Matrix P0,
                        std::uint64_t seed = 0) {
        Model m;
        m.d_x = static_cast<int>(A.rows());
        m.d_y = static_cast<int>(C.rows());
        m.A = std::move(A);
        m.C = std::move(C);
        m.R1 = std::move(R1);
        m.R2 = std::move(R2);
        m.m0 = std::move(m0);
        m.P0 = std::move(P0);
        m.seed = seed;
        if (m.A.cols() != m.d_x || m.C.cols() != m.d_x || m.R1.rows() != m.d_x ||
            m.R1.cols() != m.d_x || m.R2.rows() != m.d_y || m.R2.cols() != m.d_y ||
            m.m0.size() != m.d_x || m.P0.rows() != m.d_x || m.P0.cols() != m.d_x)
            throw DimensionMismatch("model matrices have inconsistent shapes");
        m.init_derived();
        return m;
    }

    /// Gain factor P C' R2^{-1} for a given covariance.
    Matrix gain(const Matrix& P) const {
        return R2_llt.solve(C * P.transpose()).transpose();
    }

private:
    void init_derived() {
        R1_sqrt = symmetric_sqrt(R1);
        R2_sqrt = symmetric_sqrt(R2);
        P0_sqrt = symmetric_sqrt(P0);
        R2_llt.compute(symmetrize(R2));
        R2_spd = (R2_llt.info() == Eigen::Success);
        S = R2_spd ? symmetrize(C.transpose() * R2_llt.solve(C)) : Matrix::Zero(d_x, d_x);
    }
};

/// Recipe for randomly generated stable test models.
struct ModelGenSpec {
    int d_x = 1;
    int d_y = 1;
    int block_size = 10;
    double stability_margin = 0.5;
    std::uint64_t seed = 0;
};

namespace detail {

// One dense block of the generator: A with negative-definite symmetric part,
// C ~ N(0,1)/sqrt(d_x), noise covariances I + 0.1 W W'/d.
struct ModelBlocks {
    Matrix A, C, R1, R2;
};

inline ModelBlocks random_blocks(int d_x, int d_y, double margin, RngStream& g) {
    ModelBlocks b;
    Matrix G = g.normal_matrix(d_x, d_x);
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(G));
    const double rho = es.eigenvalues().cwiseAbs().maxCoeff();
    b.A = G - (margin + rho) * Matrix::Identity(d_x, d_x);

    b.C = g.normal_matrix(d_y, d_x) / std::sqrt(static_cast<double>(d_x));

    Matrix W1 = g.normal_matrix(d_x, d_x);
    b.R1 = Matrix::Identity(d_x, d_x) + 0.1 * (W1 * W1.transpose()) / d_x;
    Matrix W2 = g.normal_matrix(d_y, d_y);
    b.R2 = Matrix::Identity(d_y, d_y) + 0.1 * (W2 * W2.transpose()) / d_y;
    return b;
}

} // namespace detail

/// Generates a random stable model. A's eigenvalues have real part at most
/// -stability_margin; above block_size the matrices are block-diagonal so
/// that high-dimensional instances stay well conditioned.
inline Model make_ou_model(const ModelGenSpec& spec) {
    if (spec.d_x < 1 || spec.d_y < 1)
        throw InvalidDimension("dimensions must be positive");
    if (spec.block_size < 1)
        throw InvalidDimension("block_size must be positive");

    const bool blocked = spec.d_x > spec.block_size;
    if (blocked && (spec.d_x % spec.block_size != 0 || spec.d_y % spec.block_size != 0))
        throw InvalidDimension("block_size must divide d_x and d_y");

    Matrix A = Matrix::Zero(spec.d_x, spec.d_x);
    Matrix C = Matrix::Zero(spec.d_y, spec.d_x);
    Matrix R1 = Matrix::Zero(spec.d_x, spec.d_x);
    Matrix R2 = Matrix::Zero(spec.d_y, spec.d_y);

    RngStream root = RngStream::derive(spec.seed, {0x6d6f64ull}); // "mod"
    if (!blocked) {
        RngStream g = root.child(0);
        auto b = detail::random_blocks(spec.d_x, spec.d_y, spec.stability_margin, g);
        A = b.A;
        C = b.C;
        R1 = b.R1;
        R2 = b.R2;
    } else {
        const int bs = spec.block_size;
        const int nx = spec.d_x / bs;
        const int ny = spec.d_y / bs;
        for (int k = 0; k < nx; ++k) {
            RngStream g = root.child(static_cast<std::uint64_t>(k));
            auto b = detail::random_blocks(bs, bs, spec.stability_margin, g);
            A.block(k * bs, k * bs, bs, bs) = b.A;
            R1.block(k * bs, k * bs, bs, bs) = b.R1;
            if (k < ny) {
                C.block(k * bs, k * bs, bs, bs) = b.C;
                R2.block(k * bs, k * bs, bs, bs) = b.R2;
            }
        }
        for (int k = nx; k < ny; ++k) {
            RngStream g = root.child(static_cast<std::uint64_t>(k));
            auto b = detail::random_blocks(bs, bs, spec.stability_margin, g);
            R2.block(k * bs, k * bs, bs, bs) = b.R2;
        }
    }

    Vector m0 = 6.0 * Vector::Ones(spec.d_x);
    Matrix P0 = Matrix::Identity(spec.d_x, spec.d_x);
    return Model::create(std::move(A), std::move(C), std::move(R1), std::move(R2),
                         std::move(m0), std::move(P0), spec.seed);
}

namespace detail {

inline bool is_spd(const Matrix& m, std::string* why) {
    if (m.rows() != m.cols()) {
        if (why) *why = "not square";
        return false;
    }
    if (!m.isApprox(m.transpose(), 1e-10)) {
        if (why) *why = "not symmetric";
        return false;
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(m), Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = es.eigenvalues().maxCoeff();
    if (!(lo > 1e-12 * std::max(hi, 0.0))) {
        if (why) *why = "not SPD";
        return false;
    }
    return true;
}

} // namespace detail

/// Checks every structural invariant of a Model. Empty result means valid.
inline std::vector<std::string> validate_model(const Model& m) {
    std::vector<std::string> report;
    auto mismatch = [&](const std::string& what) {
        report.push_back("dimension mismatch: " + what);
    };

    if (m.d_x < 1 || m.d_y < 1) report.push_back("dimensions must be positive");
    if (m.A.rows() != m.d_x || m.A.cols() != m.d_x) mismatch("A must be d_x x d_x");
    if (m.C.rows() != m.d_y || m.C.cols() != m.d_x) mismatch("C must be d_y x d_x");
    if (m.R1.rows() != m.d_x || m.R1.cols() != m.d_x) mismatch("R1 must be d_x x d_x");
    if (m.R2.rows() != m.d_y || m.R2.cols() != m.d_y) mismatch("R2 must be d_y x d_y");
    if (m.m0.size() != m.d_x) mismatch("m0 must have length d_x");
    if (m.P0.rows() != m.d_x || m.P0.cols() != m.d_x) mismatch("P0 must be d_x x d_x");
    if (!report.empty()) return report;

    std::string why;
    if (!detail::is_spd(m.R1, &why)) report.push_back("R1 " + why);
    if (!detail::is_spd(m.R2, &why)) report.push_back("R2 " + why);
    if (!detail::is_spd(m.P0, &why)) report.push_back("P0 " + why);

    auto sqrt_ok = [](const Matrix& root, const Matrix& target) {
        const double denom = std::max(target.norm(), 1e-300);
        return (root * root - target).norm() / denom < 1e-10;
    };
    if (!sqrt_ok(m.R1_sqrt, m.R1)) report.push_back("R1_sqrt^2 != R1");
    if (!sqrt_ok(m.R2_sqrt, m.R2)) report.push_back("R2_sqrt^2 != R2");
    if (!sqrt_ok(m.P0_sqrt, m.P0)) report.push_back("P0_sqrt^2 != P0");

    if (m.R2_spd) {
        Matrix S_ref = m.C.transpose() * m.R2_llt.solve(m.C);
        if ((m.S - symmetrize(S_ref)).norm() > 1e-10 * std::max(1.0, S_ref.norm()))
            report.push_back("S != C' R2^{-1} C");
        Eigen::SelfAdjointEigenSolver<Matrix> es(m.S, Eigen::EigenvaluesOnly);
        if (es.eigenvalues().minCoeff() < -1e-10 * std::max(1.0, m.S.norm()))
            report.push_back("S not PSD");
    }
    return report;
}

/// Largest real part over eig(A); stable generators keep this below
/// -stability_margin.
inline double max_real_eigenvalue(const Matrix& A) {
    Eigen::EigenSolver<Matrix> es(A, false);
    return es.eigenvalues().real().maxCoeff();
}

} // namespace enkbf
