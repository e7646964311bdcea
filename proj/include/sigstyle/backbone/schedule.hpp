#pragma once

#include <vector>

namespace sigstyle {

// Cumulative signal coefficients of the forward noising process:
// z_t = sqrt(alpha_bar[t]) z_0 + sqrt(1 - alpha_bar[t]) eps.
class NoiseSchedule {
public:
    NoiseSchedule() = default;
    explicit NoiseSchedule(std::vector<double> alpha_bar);

    // The latent-diffusion "scaled linear" beta schedule.
    static NoiseSchedule scaled_linear(int num_train_steps, double beta_start = 0.00085, double beta_end = 0.012);
    static NoiseSchedule linear(int num_train_steps, double beta_start, double beta_end);

    int num_train_steps() const { return static_cast<int>(alpha_bar_.size()); }
    const std::vector<double>& alpha_bar() const { return alpha_bar_; }
    // Throws TimestepError when t is outside [0, num_train_steps).
    double alpha_bar_at(int t) const;
    void check_timestep(int t) const;

private:
    std::vector<double> alpha_bar_;
};

}  // namespace sigstyle
