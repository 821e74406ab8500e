#pragma once

#include "lyapreg/error.hpp"

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace lyapreg::grad {

/// lr(step) = initial · base^floor(step / every)
struct StepDecaySchedule {
    double initial = 1e-3;
    double base = 1.0;
    std::size_t every = 1;

    [[nodiscard]] double at(std::size_t step) const {
        const auto exponent = static_cast<double>(every == 0 ? 0 : step / every);
        return initial * std::pow(base, exponent);
    }
};

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adam over one flat parameter vector.
class Adam {
public:
    Adam(std::size_t n, StepDecaySchedule schedule, AdamOptions options = {})
        : schedule_(schedule), options_(options), m_(n, 0.0), v_(n, 0.0) {}

    void step(std::span<double> params, std::span<const double> grads) {
        if (params.size() != m_.size() || grads.size() != m_.size()) {
            throw ValidationError("Adam::step: size mismatch");
        }
        const double lr = schedule_.at(t_);
        ++t_;
        const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = options_.beta1 * m_[i] + (1.0 - options_.beta1) * grads[i];
            v_[i] = options_.beta2 * v_[i] + (1.0 - options_.beta2) * grads[i] * grads[i];
            const double m_hat = m_[i] / c1;
            const double v_hat = v_[i] / c2;
            params[i] -= lr * m_hat / (std::sqrt(v_hat) + options_.epsilon);
        }
    }

    [[nodiscard]] std::size_t steps() const { return t_; }
    [[nodiscard]] double current_lr() const { return schedule_.at(t_); }

private:
    StepDecaySchedule schedule_;
    AdamOptions options_;
    std::vector<double> m_;
    std::vector<double> v_;
    std::size_t t_ = 0;
};

} // namespace lyapreg::grad
