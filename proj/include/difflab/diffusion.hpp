#pragma once

#include "difflab/schedule.hpp"
#include "difflab/tensor.hpp"

namespace difflab {

struct DenoiserModel;

struct LatentState {
    Tensor z;
    int t = 0;
};

// Classifier-free guidance configuration. The condition is applied while
// t / T lies inside [window_stop, window_start]; outside the window (or when
// condition is null or lambda is 0) the unconditional branch is used alone.
struct GuidanceSpec {
    double lambda = 10.0;
    double window_start = 1.0;  // fraction of T
    double window_stop = 0.0;   // fraction of T
    const Tensor* condition = nullptr;  // token matrix (n_tokens, cond_dim)
};

enum class GuidedSteps {
    kWindow,     // every step whose timestep falls in the window
    kFirstOnly,  // only the first denoising step after L
};

// z_L = sqrt(abar_L) z0 + sqrt(1 - abar_L) eps
Tensor forward_noise(Tape& tape, const Tensor& z0, int noise_level, const Tensor& eps,
                     const NoiseSchedule& s);

// eps_uncond + lambda * (eps_cond - eps_uncond)
Tensor cfg_combine(Tape& tape, const Tensor& eps_uncond, const Tensor& eps_cond,
                   double lambda);

// one deterministic DDIM update t -> t_prev (t_prev <= t) under fixed eps
Tensor ddim_denoise_step(Tape& tape, const Tensor& z_t, const Tensor& eps, int t,
                         int t_prev, const NoiseSchedule& s);

// exact inverse map t -> t_next (t_next >= t) under the same fixed eps
Tensor ddim_invert_step(Tape& tape, const Tensor& z_t, const Tensor& eps, int t,
                        int t_next, const NoiseSchedule& s);

// single-step clean estimate (z_L - sqrt(1 - abar_L) eps_tilde) / sqrt(abar_L),
// differentiable w.r.t. eps_tilde
Tensor predict_x0(Tape& tape, const Tensor& z_latent, const Tensor& eps_tilde,
                  int noise_level, const NoiseSchedule& s);

// Deterministic guided DDIM descent from state.t down to 0 over an evenly
// spaced timestep subsequence; returns the final clean-latent estimate.
Tensor sample_loop(const LatentState& state, const DenoiserModel& model,
                   const GuidanceSpec& guidance, int steps, const NoiseSchedule& s,
                   GuidedSteps mode = GuidedSteps::kWindow);

// Deterministic DDIM inversion of a clean latent (state.t == 0) up to noise
// level top, using unconditional predictions.
Tensor invert_loop(const LatentState& state, const DenoiserModel& model, int top,
                   int steps, const NoiseSchedule& s);

}  // namespace difflab
