#include "difflab/optim.hpp"

#include <cmath>

namespace difflab {

AdamW::AdamW(std::vector<Tensor> params, Options opts)
    : params_(std::move(params)), opts_(opts) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

AdamW::AdamW(std::vector<Tensor> params, Options opts, std::vector<std::uint8_t> decay)
    : AdamW(std::move(params), opts) {
    if (decay.size() != params_.size()) {
        throw TensorError("adamw: decay mask covers " + std::to_string(decay.size()) +
                          " parameters, expected " + std::to_string(params_.size()));
    }
    decay_ = std::move(decay);
}

void AdamW::step() {
    for (const Tensor& p : params_)
        if (!p.has_grad())
            throw TensorError("adamw: parameter " + shape_str(p.shape()) +
                              " has no gradient buffer; run backward or zero_grad first");
    ++step_count_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_count_));
    for (size_t k = 0; k < params_.size(); ++k) {
        auto& pv = params_[k].values();
        const auto& g = params_[k].grad();
        auto& m = m_[k];
        auto& v = v_[k];
        const double decay =
            (decay_.empty() || decay_[k]) ? opts_.weight_decay : 0.0;
        for (size_t i = 0; i < pv.size(); ++i) {
            m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g[i];
            v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
            double m_hat = m[i] / bc1;
            double v_hat = v[i] / bc2;
            pv[i] -= opts_.lr * (m_hat / (std::sqrt(v_hat) + opts_.eps) +
                                 decay * pv[i]);
        }
    }
}

void AdamW::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

std::vector<std::uint8_t> decay_mask(const NamedParams& params) {
    std::vector<std::uint8_t> mask;
    mask.reserve(params.size());
    for (const auto& np : params) {
        const std::string& name = np.first;
        const bool is_bias = name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0;
        mask.push_back(is_bias ? 0 : 1);
    }
    return mask;
}

}  // namespace difflab
