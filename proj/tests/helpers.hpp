#pragma once

#include "enkbf/model.hpp"

namespace enkbf::test {

inline Model scalar_model(double a, double c, double r1, double r2, double m0 = 1.0,
                          double p0 = 1.0) {
    Matrix A(1, 1), C(1, 1), R1(1, 1), R2(1, 1), P0(1, 1);
    A << a;
    C << c;
    R1 << r1;
    R2 << r2;
    P0 << p0;
    Vector m(1);
    m << m0;
    return Model::create(A, C, R1, R2, m, P0);
}

inline Model small_model(int d, std::uint64_t seed) {
    ModelGenSpec spec;
    spec.d_x = d;
    spec.d_y = d;
    spec.seed = seed;
    return make_ou_model(spec);
}

/// d_x-dimensional model with zero observation operator: particles reduce to
/// independent OU copies.
inline Model gain_free_model(int d, double a = -1.0) {
    Matrix A = a * Matrix::Identity(d, d);
    Matrix C = Matrix::Zero(d, d);
    Matrix R1 = Matrix::Identity(d, d);
    Matrix R2 = Matrix::Identity(d, d);
    Vector m0 = 6.0 * Vector::Ones(d);
    Matrix P0 = Matrix::Identity(d, d);
    return Model::create(A, C, R1, R2, m0, P0);
}

} // namespace enkbf::test
