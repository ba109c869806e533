#include "difflab/diffusion.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "difflab/models.hpp"

namespace difflab {

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw TensorError(std::string(op) + ": shape mismatch " +
                          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

bool guidance_active(const GuidanceSpec& g, int t, const NoiseSchedule& s) {
    if (g.condition == nullptr || g.lambda == 0.0) return false;
    if (g.window_stop < 0.0 || g.window_start > 1.0 ||
        g.window_stop > g.window_start) {
        throw TensorError("guidance window: need 0 <= stop <= start <= 1, got [" +
                          std::to_string(g.window_stop) + ", " +
                          std::to_string(g.window_start) + "]");
    }
    const double frac = static_cast<double>(t) / static_cast<double>(s.total_steps);
    return frac >= g.window_stop && frac <= g.window_start;
}

// eps prediction for one step of a no-grad loop, with CFG applied when the
// guidance window covers t.
Tensor loop_eps(Tape& tape, const DenoiserModel& model, const Tensor& z, int t,
                const GuidanceSpec& g, bool guided, const NoiseSchedule& s) {
    Tensor eps_u = denoiser_eval(model, tape, z, t, nullptr);
    if (!guided || !guidance_active(g, t, s)) return eps_u;
    Tensor eps_c = denoiser_eval(model, tape, z, t, g.condition);
    return cfg_combine(tape, eps_u, eps_c, g.lambda);
}

}  // namespace

Tensor forward_noise(Tape& tape, const Tensor& z0, int noise_level, const Tensor& eps,
                     const NoiseSchedule& s) {
    check_same_shape("forward_noise", z0, eps);
    return tape.add(tape.scale(z0, s.sqrt_alpha(noise_level)),
                    tape.scale(eps, s.sqrt_one_minus_alpha(noise_level)));
}

Tensor cfg_combine(Tape& tape, const Tensor& eps_uncond, const Tensor& eps_cond,
                   double lambda) {
    check_same_shape("cfg_combine", eps_uncond, eps_cond);
    if (lambda == 0.0) return eps_uncond;
    if (lambda == 1.0) return eps_cond;
    return tape.add_scaled(eps_uncond, tape.sub(eps_cond, eps_uncond), lambda);
}

Tensor ddim_denoise_step(Tape& tape, const Tensor& z_t, const Tensor& eps, int t,
                         int t_prev, const NoiseSchedule& s) {
    check_same_shape("ddim_denoise_step", z_t, eps);
    if (t_prev > t) {
        throw TensorError("ddim_denoise_step: t_prev " + std::to_string(t_prev) +
                          " > t " + std::to_string(t));
    }
    if (t_prev == t) return z_t;
    // clean estimate from the current latent, then re-noise to t_prev
    Tensor x0 = tape.scale(
        tape.sub(z_t, tape.scale(eps, s.sqrt_one_minus_alpha(t))),
        1.0 / s.sqrt_alpha(t));
    return tape.add(tape.scale(x0, s.sqrt_alpha(t_prev)),
                    tape.scale(eps, s.sqrt_one_minus_alpha(t_prev)));
}

Tensor ddim_invert_step(Tape& tape, const Tensor& z_t, const Tensor& eps, int t,
                        int t_next, const NoiseSchedule& s) {
    check_same_shape("ddim_invert_step", z_t, eps);
    if (t_next < t) {
        throw TensorError("ddim_invert_step: t_next " + std::to_string(t_next) +
                          " < t " + std::to_string(t));
    }
    if (t_next == t) return z_t;
    const double a_t = s.alpha(t);
    const double a_n = s.alpha(t_next);
    const double z_coef = std::sqrt(a_n / a_t);
    const double eps_coef =
        (std::sqrt(1.0 / a_n - 1.0) - std::sqrt(1.0 / a_t - 1.0)) * std::sqrt(a_n);
    return tape.add(tape.scale(z_t, z_coef), tape.scale(eps, eps_coef));
}

Tensor predict_x0(Tape& tape, const Tensor& z_latent, const Tensor& eps_tilde,
                  int noise_level, const NoiseSchedule& s) {
    check_same_shape("predict_x0", z_latent, eps_tilde);
    return tape.scale(
        tape.sub(z_latent,
                 tape.scale(eps_tilde, s.sqrt_one_minus_alpha(noise_level))),
        1.0 / s.sqrt_alpha(noise_level));
}

Tensor sample_loop(const LatentState& state, const DenoiserModel& model,
                   const GuidanceSpec& guidance, int steps, const NoiseSchedule& s,
                   GuidedSteps mode) {
    if (steps < 1) {
        throw TensorError("sample_loop: steps must be >= 1, got " +
                          std::to_string(steps));
    }
    if (state.t <= 0) return state.z;
    const std::vector<int> path = timestep_path(state.t, steps);
    Tensor z = state.z;
    for (std::size_t i = path.size() - 1; i > 0; --i) {
        Tape tape;
        const bool guided =
            (mode == GuidedSteps::kWindow) || (i == path.size() - 1);
        Tensor eps = loop_eps(tape, model, z, path[i], guidance, guided, s);
        z = ddim_denoise_step(tape, z, eps, path[i], path[i - 1], s).detach();
    }
    return z;
}

Tensor invert_loop(const LatentState& state, const DenoiserModel& model, int top,
                  int steps, const NoiseSchedule& s) {
    if (state.t != 0) {
        throw TensorError("invert_loop: expected a clean latent at t=0, got t=" +
                          std::to_string(state.t));
    }
    if (steps < 1) {
        throw TensorError("invert_loop: steps must be >= 1, got " +
                          std::to_string(steps));
    }
    if (top <= 0) return state.z;
    const std::vector<int> path = timestep_path(top, steps);
    Tensor z = state.z;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
        Tape tape;
        Tensor eps = denoiser_eval(model, tape, z, path[i], nullptr);
        z = ddim_invert_step(tape, z, eps, path[i], path[i + 1], s).detach();
    }
    return z;
}

}  // namespace difflab
