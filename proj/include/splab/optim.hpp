#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace splab {

/// Adam with bias correction. Moments and the update are computed in f64;
/// parameters stay f32.
struct Adam {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    std::vector<double> m, v;
    std::uint64_t t = 0;

    void reset(std::size_t size) {
        m.assign(size, 0.0);
        v.assign(size, 0.0);
        t = 0;
    }

    /// One update over a flat parameter view. Call after accumulating the
    /// full gradient for the step.
    void step(float* params, const float* grads, std::size_t size) {
        if (m.size() != size) throw std::invalid_argument("Adam: state size mismatch");
        ++t;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < size; ++i) {
            const double g = grads[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            params[i] -= static_cast<float>(learning_rate * mhat / (std::sqrt(vhat) + eps));
        }
    }
};

}  // namespace splab
