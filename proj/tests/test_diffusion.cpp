#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "difflab/diffusion.hpp"
#include "difflab/models.hpp"
#include "difflab/rng.hpp"
#include "difflab/schedule.hpp"
#include "helpers.hpp"

using namespace difflab;
using testutil::fd_check;
using testutil::rand_tensor;

namespace {

// straight-line scalar oracles for the closed-form updates
double oracle_denoise(double z, double eps, double a_t, double a_prev) {
    const double x0 = (z - std::sqrt(1.0 - a_t) * eps) / std::sqrt(a_t);
    return std::sqrt(a_prev) * x0 + std::sqrt(1.0 - a_prev) * eps;
}

double oracle_invert(double z, double eps, double a_t, double a_next) {
    return std::sqrt(a_next / a_t) * z +
           (std::sqrt(1.0 / a_next - 1.0) - std::sqrt(1.0 / a_t - 1.0)) *
               std::sqrt(a_next) * eps;
}

double oracle_predict(double z, double eps, double a_l) {
    return (z - std::sqrt(1.0 - a_l) * eps) / std::sqrt(a_l);
}

DenoiserModel tiny_denoiser(int latent_dim = 6, int n_classes = 2) {
    DenoiserConfig cfg;
    cfg.latent_dim = latent_dim;
    cfg.hidden = 10;
    cfg.blocks = 1;
    cfg.time_dim = 4;
    cfg.condition_dim = 3;
    cfg.n_classes = n_classes;
    Rng rng(99);
    DenoiserModel m = make_denoiser(cfg, rng);
    // off-zero condition rows so conditional and unconditional branches differ
    for (double& v : m.class_table.values()) v = rng.normal();
    for (double& v : m.null_embedding.values()) v = 0.1 * rng.normal();
    return m;
}

}  // namespace

TEST_CASE("single-step schedule is the bare beta product") {
    NoiseSchedule s = make_schedule(1, 0.5, 0.5);
    REQUIRE(s.alpha_bar.size() == 2);
    CHECK(s.alpha_bar[0] == 1.0);
    CHECK(s.alpha_bar[1] == 0.5);
}

TEST_CASE("cumulative coefficients start at one and strictly decrease") {
    for (int t_total : {1, 2, 17, 1000}) {
        NoiseSchedule s = make_schedule(t_total, 1e-4, 0.02);
        CHECK(s.alpha(0) == 1.0);
        for (int t = 1; t <= t_total; ++t) {
            CHECK(s.alpha(t) > 0.0);
            CHECK(s.alpha(t) < s.alpha(t - 1));
        }
    }
    CHECK_THROWS_AS(make_schedule(0, 1e-4, 0.02), TensorError);
    CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02), TensorError);
    CHECK_THROWS_AS(make_schedule(10, 0.03, 0.02), TensorError);
    CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0), TensorError);
}

TEST_CASE("thousand-step linear schedule matches the frozen golden product") {
    NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
    // independent cumulative product over the same beta line
    double acc = 1.0;
    for (int t = 1; t <= 1000; ++t) {
        const double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0;
        acc *= 1.0 - beta;
    }
    CHECK(std::abs(s.alpha(1000) - acc) / acc < 1e-13);
    const double golden = 4.0358297653756754e-05;
    CHECK(std::abs(s.alpha(1000) - golden) / golden < 1e-12);
}

TEST_CASE("timestep subsequences are evenly spaced, endpoint to endpoint") {
    CHECK(timestep_path(10, 5) == std::vector<int>{0, 2, 4, 6, 8, 10});
    CHECK(timestep_path(7, 1) == std::vector<int>{0, 7});
    CHECK(timestep_path(3, 9) == std::vector<int>{0, 1, 2, 3});  // dedup
    std::vector<int> p = timestep_path(400, 50);
    CHECK(p.front() == 0);
    CHECK(p.back() == 400);
    for (std::size_t i = 1; i < p.size(); ++i) CHECK(p[i] > p[i - 1]);
}

TEST_CASE("noising at level zero returns the clean latent bit for bit") {
    Rng rng(3);
    Tensor z0 = rand_tensor({2, 5}, rng, false);
    Tensor eps = rand_tensor({2, 5}, rng, false);
    NoiseSchedule s = make_schedule(10, 1e-4, 0.02);
    Tape tape;
    Tensor z = forward_noise(tape, z0, 0, eps, s);
    CHECK(z.values() == z0.values());
}

TEST_CASE("noising at a nearly fully decayed level approaches the noise") {
    Rng rng(4);
    Tensor z0 = rand_tensor({1, 6}, rng, false);
    Tensor eps = rand_tensor({1, 6}, rng, false);
    NoiseSchedule s = make_schedule(1, 0.999999, 0.999999);  // alpha_1 = 1e-6
    Tape tape;
    Tensor z = forward_noise(tape, z0, 1, eps, s);
    for (long i = 0; i < 6; ++i) {
        CHECK(std::abs(z.at(i) - eps.at(i)) < 5e-3);
    }
}

TEST_CASE("noising statistics match the closed-form moments") {
    NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
    const int level = 400;
    const double signal = s.sqrt_alpha(level);
    const double var = 1.0 - s.alpha(level);
    const int n = 10000;
    const long d = 4;

    Rng rng(17);
    Tensor z0 = rand_tensor({1, d}, rng, false);
    std::vector<double> sum(static_cast<std::size_t>(d), 0.0);
    std::vector<double> sum_sq(static_cast<std::size_t>(d), 0.0);
    for (int it = 0; it < n; ++it) {
        Tensor eps = rand_tensor({1, d}, rng, false);
        Tape tape;
        Tensor z = forward_noise(tape, z0, level, eps, s);
        for (long j = 0; j < d; ++j) {
            const double dev = z.at(j) - signal * z0.at(j);
            sum[static_cast<std::size_t>(j)] += dev;
            sum_sq[static_cast<std::size_t>(j)] += dev * dev;
        }
    }
    const double se = std::sqrt(var / n);
    for (long j = 0; j < d; ++j) {
        CHECK(std::abs(sum[static_cast<std::size_t>(j)] / n) < 3.0 * se);
        CHECK(std::abs(sum_sq[static_cast<std::size_t>(j)] / n - var) / var < 0.05);
    }
}

TEST_CASE("guidance combination endpoints are exact") {
    Rng rng(5);
    Tensor u = rand_tensor({3, 4}, rng, false);
    Tensor c = rand_tensor({3, 4}, rng, false);
    Tape tape;
    CHECK(cfg_combine(tape, u, c, 0.0).values() == u.values());
    CHECK(cfg_combine(tape, u, c, 1.0).values() == c.values());

    Tensor us = Tensor::from({1}, {0.1});
    Tensor cs = Tensor::from({1}, {0.3});
    CHECK(std::abs(cfg_combine(tape, us, cs, 10.0).value() - 2.1) < 1e-12);

    Tensor bad = Tensor::zeros({2, 2});
    CHECK_THROWS_AS(cfg_combine(tape, u, bad, 2.0), TensorError);
}

TEST_CASE("guidance combination is affine in the scale") {
    Rng rng(6);
    Tensor u = rand_tensor({2, 3}, rng, false);
    Tensor c = rand_tensor({2, 3}, rng, false);
    Tape tape;
    for (auto [l1, l2] : std::vector<std::pair<double, double>>{
             {2.0, 5.0}, {-3.0, 7.5}, {0.25, 0.5}, {-10.0, 10.0}}) {
        Tensor a = cfg_combine(tape, u, c, l1);
        Tensor b = cfg_combine(tape, u, c, l2);
        Tensor both = cfg_combine(tape, u, c, l1 + l2);
        for (long i = 0; i < u.numel(); ++i) {
            CHECK(std::abs(a.at(i) + b.at(i) - u.at(i) - both.at(i)) < 1e-12);
        }
    }
}

TEST_CASE("denoise and invert updates match their scalar oracles") {
    NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
    Rng rng(7);
    Tape tape;
    for (int trial = 0; trial < 200; ++trial) {
        const int t_hi = static_cast<int>(rng.randint(2, 1001));
        const int t_lo = static_cast<int>(rng.randint(1, t_hi));
        Tensor z = rand_tensor({1, 3}, rng, false);
        Tensor eps = rand_tensor({1, 3}, rng, false);
        Tensor dn = ddim_denoise_step(tape, z, eps, t_hi, t_lo, s);
        Tensor iv = ddim_invert_step(tape, z, eps, t_lo, t_hi, s);
        for (long i = 0; i < 3; ++i) {
            CHECK(std::abs(dn.at(i) - oracle_denoise(z.at(i), eps.at(i), s.alpha(t_hi),
                                                     s.alpha(t_lo))) <= 1e-12);
            CHECK(std::abs(iv.at(i) - oracle_invert(z.at(i), eps.at(i), s.alpha(t_lo),
                                                    s.alpha(t_hi))) <= 1e-12);
        }
    }
}

TEST_CASE("degenerate steps return the input unchanged") {
    NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
    Rng rng(8);
    Tensor z = rand_tensor({2, 2}, rng, false);
    Tensor eps = rand_tensor({2, 2}, rng, false);
    Tape tape;
    CHECK(ddim_denoise_step(tape, z, eps, 40, 40, s).values() == z.values());
    CHECK(ddim_invert_step(tape, z, eps, 40, 40, s).values() == z.values());
    CHECK_THROWS_AS(ddim_denoise_step(tape, z, eps, 10, 20, s), TensorError);
    CHECK_THROWS_AS(ddim_invert_step(tape, z, eps, 20, 10, s), TensorError);
    CHECK_THROWS_AS(ddim_denoise_step(tape, z, eps, 101, 0, s), TensorError);
}

TEST_CASE("inversion then denoising with shared noise is the identity") {
    NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
    Rng rng(9);
    Tape tape;
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int t = static_cast<int>(rng.randint(0, 1000));
        const int t_next = static_cast<int>(rng.randint(t + 1, 1001));
        Tensor z = rand_tensor({1, 4}, rng, false);
        Tensor eps = rand_tensor({1, 4}, rng, false);
        Tensor up = ddim_invert_step(tape, z, eps, t, t_next, s);
        Tensor back = ddim_denoise_step(tape, up, eps, t_next, t, s);
        for (long i = 0; i < 4; ++i) {
            worst = std::max(worst, std::abs(back.at(i) - z.at(i)));
        }
    }
    CHECK(worst <= 1e-10);
}

TEST_CASE("denoising all the way down with the true noise recovers the sample") {
    NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
    Rng rng(10);
    Tape tape;
    for (int level : {1, 40, 400, 1000}) {
        Tensor z0 = rand_tensor({2, 4}, rng, false);
        Tensor eps = rand_tensor({2, 4}, rng, false);
        Tensor noisy = forward_noise(tape, z0, level, eps, s);
        Tensor down = ddim_denoise_step(tape, noisy, eps, level, 0, s);
        Tensor pred = predict_x0(tape, noisy, eps, level, s);
        for (long i = 0; i < z0.numel(); ++i) {
            CHECK(std::abs(down.at(i) - z0.at(i)) <= 1e-10);
            CHECK(std::abs(pred.at(i) - z0.at(i)) <= 1e-10);
        }
    }
}

TEST_CASE("single-step prediction oracle and edge cases") {
    NoiseSchedule s = make_schedule(50, 1e-3, 0.05);
    Rng rng(11);
    Tape tape;
    Tensor z = rand_tensor({1, 5}, rng, false);
    Tensor eps = rand_tensor({1, 5}, rng, false);
    Tensor zero = Tensor::zeros({1, 5});

    Tensor p = predict_x0(tape, z, eps, 20, s);
    for (long i = 0; i < 5; ++i) {
        CHECK(std::abs(p.at(i) - oracle_predict(z.at(i), eps.at(i), s.alpha(20))) <=
              1e-12);
    }
    Tensor p0 = predict_x0(tape, z, zero, 20, s);
    for (long i = 0; i < 5; ++i) {
        CHECK(std::abs(p0.at(i) - z.at(i) / s.sqrt_alpha(20)) <=
              1e-15 * std::abs(z.at(i)));
    }
    CHECK(predict_x0(tape, z, eps, 0, s).values() == z.values());
}

TEST_CASE("single-step prediction is differentiable in the predicted noise") {
    NoiseSchedule s = make_schedule(50, 1e-3, 0.05);
    Rng rng(12);
    Tensor z = rand_tensor({2, 4}, rng, false);
    Tensor eps = rand_tensor({2, 4}, rng);
    Tensor target = rand_tensor({2, 4}, rng, false);
    auto fwd = [&](Tape& t) { return t.mse(predict_x0(t, z, eps, 25, s), target); };
    auto r = fd_check({eps}, fwd);
    CHECK(r.max_rel < 1e-4);
}

TEST_CASE("unguided sampling equals a hand-rolled unconditional loop") {
    DenoiserModel m = tiny_denoiser();
    NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
    Rng rng(13);
    Tensor z_l = rand_tensor({2, 6}, rng, false);
    const int level = 40;
    const int steps = 10;

    Tensor cond = rand_tensor({2, 3}, rng, false);
    GuidanceSpec zero_lambda{0.0, 1.0, 0.0, &cond};
    Tensor a = sample_loop({z_l, level}, m, zero_lambda, steps, s);

    GuidanceSpec empty_window{5.0, 0.0, 0.0, &cond};
    Tensor b = sample_loop({z_l, level}, m, empty_window, steps, s);

    // manual loop with unconditional predictions only
    std::vector<int> path = timestep_path(level, steps);
    Tensor z = z_l;
    for (std::size_t i = path.size() - 1; i > 0; --i) {
        Tape tape;
        Tensor eps = denoiser_eval(m, tape, z, path[i], nullptr);
        z = ddim_denoise_step(tape, z, eps, path[i], path[i - 1], s).detach();
    }
    CHECK(a.values() == z.values());
    CHECK(b.values() == z.values());
}

TEST_CASE("inversion loop edge cases and determinism") {
    DenoiserModel m = tiny_denoiser();
    NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
    Rng rng(14);
    Tensor z0 = rand_tensor({1, 6}, rng, false);

    CHECK(invert_loop({z0, 0}, m, 0, 5, s).values() == z0.values());

    // one step equals the bare update with the model's own prediction
    Tensor one = invert_loop({z0, 0}, m, 7, 1, s);
    Tape tape;
    Tensor eps = denoiser_eval(m, tape, z0, 0, nullptr);
    Tensor direct = ddim_invert_step(tape, z0, eps, 0, 7, s);
    CHECK(one.values() == direct.values());

    Tensor again = invert_loop({z0, 0}, m, 7, 1, s);
    CHECK(one.values() == again.values());

    CHECK_THROWS_AS(invert_loop({z0, 3}, m, 7, 1, s), TensorError);
    CHECK_THROWS_AS(invert_loop({z0, 0}, m, 7, 0, s), TensorError);
}

TEST_CASE("first-step-only guidance matches its manual equivalent") {
    DenoiserModel m = tiny_denoiser();
    NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
    Rng rng(15);
    Tensor z_l = rand_tensor({1, 6}, rng, false);
    Tensor cond = rand_tensor({2, 3}, rng, false);
    const int level = 60;
    const int steps = 6;
    GuidanceSpec g{4.0, 1.0, 0.0, &cond};

    Tensor got = sample_loop({z_l, level}, m, g, steps, s, GuidedSteps::kFirstOnly);

    std::vector<int> path = timestep_path(level, steps);
    Tensor z = z_l;
    for (std::size_t i = path.size() - 1; i > 0; --i) {
        Tape tape;
        Tensor eps_u = denoiser_eval(m, tape, z, path[i], nullptr);
        Tensor eps = eps_u;
        if (i == path.size() - 1) {
            Tensor eps_c = denoiser_eval(m, tape, z, path[i], &cond);
            eps = cfg_combine(tape, eps_u, eps_c, g.lambda);
        }
        z = ddim_denoise_step(tape, z, eps, path[i], path[i - 1], s).detach();
    }
    CHECK(got.values() == z.values());
}

TEST_CASE("window bounds are validated") {
    DenoiserModel m = tiny_denoiser();
    NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
    Rng rng(16);
    Tensor z_l = rand_tensor({1, 6}, rng, false);
    Tensor cond = rand_tensor({1, 3}, rng, false);
    GuidanceSpec bad{2.0, 0.3, 0.8, &cond};  // stop above start
    CHECK_THROWS_AS(sample_loop({z_l,50}, m, bad, 5, s), TensorError);
}

TEST_CASE("condition gradients flow through the full guided prediction") {
    // latent pipeline: condition tokens -> guided noise -> clean estimate ->
    // decoder -> classifier loss, differentiated w.r.t. the tokens only
    DenoiserConfig dc;
    dc.latent_dim = 4;
    dc.hidden = 8;
    dc.blocks = 1;
    dc.time_dim = 4;
    dc.condition_dim = 3;
    dc.n_classes = 2;
    Rng rng(18);
    DenoiserModel den = make_denoiser(dc, rng);
    for (double& v : den.class_table.values()) v = rng.normal();

    ClassifierConfig cc;
    cc.input_dim = 6;
    cc.hidden = 7;
    cc.feature_dim = 5;
    cc.n_classes = 2;
    ClassifierModel cls = make_classifier(cc, rng);
    Codec codec = make_learned_codec(6, 4, rng);

    NoiseSchedule s = make_schedule(50, 1e-3, 0.05);
    const int level = 20;
    Tensor z0 = rand_tensor({2, 4}, rng, false);
    Tensor eps = rand_tensor({2, 4}, rng, false);
    Tensor tokens = rand_tensor({2, 3}, rng, true, 0.4);
    Tensor onehot = Tensor::from({2, 2}, {1.0, 0.0, 1.0, 0.0});

    auto fwd = [&](Tape& t) {
        Tensor z_l = forward_noise(t, z0, level, eps, s);
        Tensor eps_u = denoiser_eval(den, t, z_l, level, nullptr);
        Tensor eps_c = denoiser_eval(den, t, z_l, level, &tokens);
        Tensor guided = cfg_combine(t, eps_u, eps_c, 7.5);
        Tensor z0_hat = predict_x0(t, z_l, guided, level, s);
        Tensor x_hat = codec_decode(codec, t, z0_hat);
        Tensor cls_loss = t.mse(classifier_logits(cls, t, x_hat), onehot);
        return t.add_scaled(cls_loss, t.mse(z0_hat, z0), 0.1);
    };
    auto r = fd_check({tokens}, fwd);
    CHECK(r.checked == 6);
    CHECK(r.max_rel < 1e-4);
}
