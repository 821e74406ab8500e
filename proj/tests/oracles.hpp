#pragma once

#include "lyapreg/grid_model.hpp"
#include "support.hpp"

#include <cmath>
#include <complex>
#include <random>
#include <vector>

namespace testing_support {

using cplx = std::complex<double>;
using lyapreg::AdmittanceMatrix;

// Independent residual: P − Σ B sin − Σ G cos evaluated term by term.
inline double balance_residual(const NetworkCase& c, const Vec& delta, const Vec& p) {
    double worst = 0.0;
    for (std::size_t i = 0; i < c.n_buses; ++i) {
        double r = p[i];
        for (std::size_t j = 0; j < c.n_buses; ++j) {
            if (i != j) {
                r -= c.B(i, j) * std::sin(delta[i] - delta[j]) + c.G(i, j) * std::cos(delta[i] - delta[j]);
            }
        }
        worst = std::max(worst, std::abs(r));
    }
    return worst;
}

// Gauss-Jordan inverse with partial pivoting.
inline std::vector<cplx> invert(std::vector<cplx> a, std::size_t n) {
    std::vector<cplx> inv(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        inv[i * n + i] = 1.0;
    }
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r) {
            if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) {
                piv = r;
            }
        }
        for (std::size_t k = 0; k < n; ++k) {
            std::swap(a[col * n + k], a[piv * n + k]);
            std::swap(inv[col * n + k], inv[piv * n + k]);
        }
        const cplx d = a[col * n + col];
        for (std::size_t k = 0; k < n; ++k) {
            a[col * n + k] /= d;
            inv[col * n + k] /= d;
        }
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col) {
                continue;
            }
            const cplx f = a[r * n + col];
            for (std::size_t k = 0; k < n; ++k) {
                a[r * n + k] -= f * a[col * n + k];
                inv[r * n + k] -= f * inv[col * n + k];
            }
        }
    }
    return inv;
}

inline std::vector<cplx> dense_kron_oracle(const AdmittanceMatrix& a) {
    const std::size_t g = a.n_generators;
    const std::size_t l = a.n_loads;
    const std::size_t t = g + l;
    std::vector<cplx> yll(l * l);
    for (std::size_t i = 0; i < l; ++i) {
        for (std::size_t j = 0; j < l; ++j) {
            yll[i * l + j] = a.y[(g + i) * t + g + j];
        }
    }
    const auto inv = l > 0 ? invert(yll, l) : std::vector<cplx>{};
    std::vector<cplx> red(g * g);
    for (std::size_t i = 0; i < g; ++i) {
        for (std::size_t j = 0; j < g; ++j) {
            cplx acc = a.y[i * t + j];
            for (std::size_t p = 0; p < l; ++p) {
                for (std::size_t q = 0; q < l; ++q) {
                    acc -= a.y[i * t + g + p] * inv[p * l + q] * a.y[(g + q) * t + j];
                }
            }
            red[i * g + j] = acc;
        }
    }
    return red;
}

// Bus admittance from line conductance/susceptance plus optional shunts.
inline AdmittanceMatrix from_lines(std::size_t gens, std::size_t loads, const Vec& b, const Vec& g, const Vec& shunt = {}) {
    const std::size_t t = gens + loads;
    AdmittanceMatrix a{gens, loads, std::vector<cplx>(t * t, 0.0)};
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j < t; ++j) {
            if (i == j) {
                continue;
            }
            const cplx line{g[i * t + j], -b[i * t + j]};
            a.y[i * t + j] = -line;
            a.y[i * t + i] += line;
        }
        if (!shunt.empty()) {
            a.y[i * t + i] += cplx{shunt[i], 0.0};
        }
    }
    return a;
}

inline Vec random_symmetric_lines(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
    Vec m(n * n, 0.0);
    std::uniform_real_distribution<double> d(lo, hi);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            m[i * n + j] = m[j * n + i] = d(rng);
        }
    }
    return m;
}


} // namespace testing_support
