#pragma once

#include <vector>

#include "difflab/tensor.hpp"

namespace difflab {

// Cumulative signal coefficients of a linear-beta forward process.
// alpha_bar[0] == 1 exactly and alpha_bar is strictly decreasing.
struct NoiseSchedule {
    int total_steps = 0;            // T
    double beta_min = 0.0;
    double beta_max = 0.0;
    std::vector<double> alpha_bar;  // length T+1

    double alpha(int t) const;        // bounds-checked alpha_bar[t]
    double sqrt_alpha(int t) const;
    double sqrt_one_minus_alpha(int t) const;
};

// Linear per-step beta interpolation between beta_min and beta_max,
// alpha_bar[t] = prod_{s<=t} (1 - beta_s).
NoiseSchedule make_schedule(int total_steps, double beta_min, double beta_max);

// Evenly spaced timestep subsequence 0 = t_0 < t_1 < ... < t_steps = top,
// rounded to integers and deduplicated (so the result may be shorter than
// steps+1 when steps > top).
std::vector<int> timestep_path(int top, int steps);

}  // namespace difflab
