#include "sigstyle/backbone/schedule.hpp"

#include <cmath>
#include <string>

#include "sigstyle/errors.hpp"

namespace sigstyle {

NoiseSchedule::NoiseSchedule(std::vector<double> alpha_bar) : alpha_bar_(std::move(alpha_bar)) {
    if (alpha_bar_.empty()) throw ConfigError("noise schedule is empty");
    for (std::size_t i = 0; i < alpha_bar_.size(); ++i) {
        if (!(alpha_bar_[i] > 0.0 && alpha_bar_[i] <= 1.0)) throw ConfigError("alpha_bar outside (0, 1]");
        if (i > 0 && !(alpha_bar_[i] < alpha_bar_[i - 1])) {
            throw ConfigError("alpha_bar must be strictly decreasing (index " + std::to_string(i) + ")");
        }
    }
}

NoiseSchedule NoiseSchedule::scaled_linear(int n, double beta_start, double beta_end) {
    if (n < 2) throw ConfigError("schedule needs at least two steps");
    std::vector<double> ab(static_cast<std::size_t>(n));
    const double s0 = std::sqrt(beta_start), s1 = std::sqrt(beta_end);
    double prod = 1.0;
    for (int i = 0; i < n; ++i) {
        const double s = s0 + (s1 - s0) * i / (n - 1);
        prod *= 1.0 - s * s;
        ab[static_cast<std::size_t>(i)] = prod;
    }
    return NoiseSchedule(std::move(ab));
}

NoiseSchedule NoiseSchedule::linear(int n, double beta_start, double beta_end) {
    if (n < 2) throw ConfigError("schedule needs at least two steps");
    std::vector<double> ab(static_cast<std::size_t>(n));
    double prod = 1.0;
    for (int i = 0; i < n; ++i) {
        prod *= 1.0 - (beta_start + (beta_end - beta_start) * i / (n - 1));
        ab[static_cast<std::size_t>(i)] = prod;
    }
    return NoiseSchedule(std::move(ab));
}

void NoiseSchedule::check_timestep(int t) const {
    if (t < 0 || t >= num_train_steps()) {
        throw TimestepError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(num_train_steps()) +
                            ")");
    }
}

double NoiseSchedule::alpha_bar_at(int t) const {
    check_timestep(t);
    return alpha_bar_[static_cast<std::size_t>(t)];
}

}  // namespace sigstyle
