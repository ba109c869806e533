#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "difflab/rng.hpp"
#include "difflab/tensor.hpp"

namespace testutil {

// relative error with a pinned denominator floor, shared by every
// finite-difference assertion in the suite
inline double rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) /
           std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

struct FdResult {
    double max_rel = 0.0;
    long checked = 0;
};

// Central finite differences against tape gradients. `forward` must rebuild
// the same graph from the leaf values on any tape it is given.
template <typename Fwd>
FdResult fd_check(const std::vector<difflab::Tensor>& leaves, Fwd&& forward,
                  double h = 1e-5) {
    using difflab::Tape;
    using difflab::Tensor;

    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tensor loss = forward(tape);
        tape.backward(loss);
        for (const Tensor& leaf : leaves) analytic.push_back(leaf.grad());
    }

    FdResult result;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor leaf = leaves[li];
        for (long i = 0; i < leaf.numel(); ++i) {
            const double saved = leaf.values()[static_cast<std::size_t>(i)];
            double up = 0.0;
            double down = 0.0;
            {
                leaf.values()[static_cast<std::size_t>(i)] = saved + h;
                Tape tape;
                up = forward(tape).value();
            }
            {
                leaf.values()[static_cast<std::size_t>(i)] = saved - h;
                Tape tape;
                down = forward(tape).value();
            }
            leaf.values()[static_cast<std::size_t>(i)] = saved;
            const double fd = (up - down) / (2.0 * h);
            result.max_rel = std::max(
                result.max_rel, rel_err(analytic[li][static_cast<std::size_t>(i)], fd));
            ++result.checked;
        }
    }
    return result;
}

inline difflab::Tensor rand_tensor(difflab::Shape shape, difflab::Rng& rng,
                                   bool requires_grad = true, double scale = 1.0) {
    difflab::Tensor t = difflab::Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.values()) v = scale * rng.normal();
    return t;
}

// values bounded away from zero, for kink-free relu probing
inline difflab::Tensor rand_tensor_offzero(difflab::Shape shape, difflab::Rng& rng,
                                           bool requires_grad = true) {
    difflab::Tensor t = difflab::Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.values()) {
        const double mag = rng.uniform(0.2, 1.0);
        v = rng.uniform() < 0.5 ? -mag : mag;
    }
    return t;
}

struct RandomGraph {
    std::vector<difflab::Tensor> leaves;
    std::function<difflab::Tensor(difflab::Tape&)> forward;
};

// A seed-indexed family of small differentiable graphs cycling through the
// primitive set. relu appears only applied directly to off-zero leaves so the
// finite-difference probe never crosses its kink.
inline RandomGraph make_random_graph(std::uint64_t seed) {
    using difflab::Rng;
    using difflab::Tape;
    using difflab::Tensor;

    Rng rng(seed * 2654435761u + 13u);
    const long n = rng.randint(1, 5);
    const long d = rng.randint(2, 6);
    const long h = rng.randint(2, 7);
    const int variant = static_cast<int>(seed % 6);

    RandomGraph g;
    switch (variant) {
        case 0: {  // two-layer tanh regression: affine, tanh, mse
            Tensor x = rand_tensor({n, d}, rng);
            Tensor w1 = rand_tensor({d, h}, rng, true, 0.7);
            Tensor b1 = rand_tensor({h}, rng, true, 0.3);
            Tensor w2 = rand_tensor({h, d}, rng, true, 0.7);
            Tensor b2 = rand_tensor({d}, rng, true, 0.3);
            Tensor y = rand_tensor({n, d}, rng, false);
            g.leaves = {x, w1, b1, w2, b2};
            g.forward = [=](Tape& t) {
                Tensor hh = t.tanh(t.affine(x, w1, b1));
                return t.mse(t.affine(hh, w2, b2), y);
            };
            break;
        }
        case 1: {  // softmax, matmul, mul, mean with a row broadcast
            Tensor x = rand_tensor({n, d}, rng);
            Tensor w = rand_tensor({d, h}, rng);
            Tensor row = rand_tensor({h}, rng);
            g.leaves = {x, w, row};
            g.forward = [=, nn = n](Tape& t) {
                Tensor p = t.softmax(t.matmul(x, w));
                return t.mean(t.mul(p, t.broadcast(row, {nn, p.cols()})));
            };
            break;
        }
        case 2: {  // concat, slice, scale, add_scaled, sum
            Tensor a = rand_tensor({n, d}, rng);
            Tensor b = rand_tensor({n + 1, d}, rng);
            g.leaves = {a, b};
            g.forward = [=, nn = n](Tape& t) {
                Tensor cat = t.concat({a, b});
                Tensor head = t.slice(cat, 0, nn);
                Tensor tail = t.slice(cat, 1, nn + 1);
                return t.sum(t.add_scaled(t.scale(head, 1.75), tail, -0.4));
            };
            break;
        }
        case 3: {  // sub, mul, scalar broadcast, mean
            Tensor a = rand_tensor({n, d}, rng);
            Tensor b = rand_tensor({n, d}, rng);
            Tensor s = rand_tensor({}, rng);
            g.leaves = {a, b, s};
            g.forward = [=](Tape& t) {
                Tensor shifted = t.sub(a, t.broadcast(s, a.shape()));
                return t.mean(t.mul(shifted, b));
            };
            break;
        }
        case 4: {  // mean_rows pooling feeding a matmul chain
            Tensor tokens = rand_tensor({n + 1, d}, rng);
            Tensor w = rand_tensor({d, h}, rng);
            Tensor y = rand_tensor({1, h}, rng, false);
            g.leaves = {tokens, w};
            g.forward = [=](Tape& t) {
                Tensor pooled = t.mean_rows(tokens);
                return t.mse(t.tanh(t.matmul(pooled, w)), y);
            };
            break;
        }
        default: {  // relu directly on an off-zero leaf, then add + sum
            Tensor x = rand_tensor_offzero({n, d}, rng);
            Tensor w = rand_tensor({n, d}, rng);
            g.leaves = {x, w};
            g.forward = [=](Tape& t) {
                return t.sum(t.mul(t.relu(x), t.add(w, w)));
            };
            break;
        }
    }
    return g;
}

}  // namespace testutil
