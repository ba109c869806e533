#pragma once

#include <cstdint>
#include <vector>

#include "difflab/serialize.hpp"
#include "difflab/tensor.hpp"

namespace difflab {

// Decoupled-weight-decay Adam. Parameters update as
//   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
// with bias-corrected moments. Gradients are left untouched by step().
//
// An optional per-parameter mask restricts the decay term (biases are the
// usual exclusion: letting them shrink drags the global-mean fit into the
// weight matrices and distorts the feature-geometry diagnostics).
class AdamW {
public:
    struct Options {
        double lr = 1e-2;
        double weight_decay = 0.0;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    AdamW(std::vector<Tensor> params, Options opts);
    // decay.size() must equal params.size(); false entries skip the decay term
    AdamW(std::vector<Tensor> params, Options opts, std::vector<std::uint8_t> decay);

    // one update over all parameters; throws if any grad buffer is missing
    void step();
    void zero_grad();

    long step_count() const { return step_count_; }
    const Options& options() const { return opts_; }
    Options& options() { return opts_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::vector<std::uint8_t> decay_;  // empty means decay everything
    Options opts_;
    long step_count_ = 0;
};

// decay mask from parameter names: everything except ".b" bias entries
std::vector<std::uint8_t> decay_mask(const NamedParams& params);

}  // namespace difflab
