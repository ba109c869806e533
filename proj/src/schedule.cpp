#include "difflab/schedule.hpp"

#include <cmath>

namespace difflab {

double NoiseSchedule::alpha(int t) const {
    if (t < 0 || t > total_steps)
        throw TensorError("schedule: timestep " + std::to_string(t) + " outside [0," +
                          std::to_string(total_steps) + "]");
    return alpha_bar[static_cast<size_t>(t)];
}

double NoiseSchedule::sqrt_alpha(int t) const { return std::sqrt(alpha(t)); }

double NoiseSchedule::sqrt_one_minus_alpha(int t) const { return std::sqrt(1.0 - alpha(t)); }

NoiseSchedule make_schedule(int total_steps, double beta_min, double beta_max) {
    if (total_steps < 1)
        throw TensorError("make_schedule: total_steps must be >= 1");
    if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
        throw TensorError("make_schedule: need 0 < beta_min <= beta_max < 1, got [" +
                          std::to_string(beta_min) + ", " + std::to_string(beta_max) + "]");
    NoiseSchedule s;
    s.total_steps = total_steps;
    s.beta_min = beta_min;
    s.beta_max = beta_max;
    s.alpha_bar.resize(static_cast<size_t>(total_steps) + 1);
    s.alpha_bar[0] = 1.0;
    double acc = 1.0;
    for (int t = 1; t <= total_steps; ++t) {
        double frac = total_steps == 1 ? 0.0
                                       : static_cast<double>(t - 1) / static_cast<double>(total_steps - 1);
        double beta = beta_min + (beta_max - beta_min) * frac;
        acc *= 1.0 - beta;
        s.alpha_bar[static_cast<size_t>(t)] = acc;
    }
    return s;
}

std::vector<int> timestep_path(int top, int steps) {
    if (top < 0) throw TensorError("timestep_path: negative endpoint");
    if (steps < 1) throw TensorError("timestep_path: steps must be >= 1");
    std::vector<int> path{0};
    for (int i = 1; i <= steps; ++i) {
        int t = static_cast<int>(std::lround(static_cast<double>(i) *
                                             static_cast<double>(top) /
                                             static_cast<double>(steps)));
        if (t > path.back()) path.push_back(t);
    }
    return path;
}

}  // namespace difflab
