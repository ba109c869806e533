#pragma once

#include <cmath>
#include <string>

#include "difflab/rng.hpp"
#include "difflab/serialize.hpp"
#include "difflab/tensor.hpp"

namespace difflab {

// Dense layer y = x @ w + b with trainable parameters.
struct Linear {
    Tensor w;  // (in, out)
    Tensor b;  // (out)

    Linear() = default;

    // weights ~ N(0, gain^2 / in), biases zero
    Linear(int in, int out, Rng& rng, double gain = 1.0) {
        w = Tensor::zeros({in, out}, true);
        const double std_dev = gain / std::sqrt(static_cast<double>(in));
        std::vector<double>& wv = w.values();
        for (double& v : wv) v = rng.normal() * std_dev;
        b = Tensor::zeros({out}, true);
    }

    Tensor operator()(Tape& tape, const Tensor& x) const {
        return tape.affine(x, w, b);
    }

    void collect(NamedParams& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

}  // namespace difflab
