#include "difflab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace difflab {

long shape_numel(const Shape& s) {
    long n = 1;
    for (long d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

namespace {

[[noreturn]] void fail(const char* op, const std::string& msg) {
    throw TensorError(std::string(op) + ": " + msg);
}

void check_rank_le2(const char* op, const Tensor& t) {
    if (t.shape().size() > 2) fail(op, "rank > 2 unsupported, got " + shape_str(t.shape()));
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

std::shared_ptr<detail::Node> new_leaf(Shape shape, bool requires_grad) {
    for (long d : shape)
        if (d <= 0) throw TensorError("tensor: nonpositive dimension in " + shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->values.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    if (requires_grad) n->grad.assign(n->values.size(), 0.0);
    return n;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return Tensor(new_leaf(std::move(shape), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = new_leaf(std::move(shape), requires_grad);
    std::fill(n->values.begin(), n->values.end(), value);
    return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    auto n = new_leaf(shape, requires_grad);
    if (static_cast<long>(values.size()) != shape_numel(shape))
        throw TensorError("tensor: " + std::to_string(values.size()) +
                          " values for shape " + shape_str(shape));
    n->values = std::move(values);
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value) {
    auto n = std::make_shared<detail::Node>();
    n->values.assign(1, value);
    return Tensor(std::move(n));
}

long Tensor::rows() const {
    const Shape& s = node_->shape;
    return s.empty() ? 1 : s[0];
}

long Tensor::cols() const {
    const Shape& s = node_->shape;
    if (s.size() >= 2) return s[1];
    return s.empty() ? 1 : s[0];
}

double Tensor::value() const {
    if (numel() != 1)
        throw TensorError("value: tensor " + shape_str(shape()) + " is not a scalar");
    return node_->values[0];
}

void Tensor::set_requires_grad(bool enable) {
    node_->requires_grad = enable;
    if (enable && node_->grad.empty()) node_->grad.assign(node_->values.size(), 0.0);
}

const std::vector<double>& Tensor::grad() const {
    if (node_->grad.empty()) throw TensorError("grad: no gradient buffer (requires_grad off?)");
    return node_->grad;
}

std::vector<double>& Tensor::grad() {
    if (node_->grad.empty()) throw TensorError("grad: no gradient buffer (requires_grad off?)");
    return node_->grad;
}

void Tensor::zero_grad() {
    node_->grad.assign(node_->values.size(), 0.0);
}

Tensor Tensor::clone() const {
    auto n = new_leaf(node_->shape, node_->requires_grad);
    n->values = node_->values;
    return Tensor(std::move(n));
}

Tensor Tensor::detach() const {
    auto n = new_leaf(node_->shape, false);
    n->values = node_->values;
    return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------
// Tape

Tensor Tape::make(Shape shape, bool requires_grad, const char* op,
                  std::vector<std::shared_ptr<detail::Node>> inputs) {
    auto n = std::make_shared<detail::Node>();
    n->values.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
    n->shape = std::move(shape);
    n->op = op;
    if (requires_grad) {
        n->requires_grad = true;
        n->grad.assign(n->values.size(), 0.0);
        n->inputs = std::move(inputs);
        n->tape = this;
        record_.push_back(n);
    }
    return Tensor(std::move(n));
}

namespace {

bool any_grad(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts)
        if (t->requires_grad()) return true;
    return false;
}

double* grad_of(detail::Node& n) { return n.grad.data(); }

}  // namespace

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    Tensor out = make(a.shape(), any_grad({&a, &b}), "add", {a.node_ptr(), b.node_ptr()});
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (out.requires_grad()) {
        out.node()->backward = [](detail::Node& n) {
            for (auto& in : n.inputs) {
                if (!in->requires_grad) continue;
                double* g = grad_of(*in);
                for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
            }
        };
    }
    return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    Tensor out = make(a.shape(), any_grad({&a, &b}), "mul", {a.node_ptr(), b.node_ptr()});
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (out.requires_grad()) {
        out.node()->backward = [](detail::Node& n) {
            detail::Node& a = *n.inputs[0];
            detail::Node& b = *n.inputs[1];
            if (a.requires_grad) {
                double* g = grad_of(a);
                for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * b.values[i];
            }
            if (b.requires_grad) {
                double* g = grad_of(b);
                for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * a.values[i];
            }
        };
    }
    return out;
}

namespace {

// C += A @ B, row-major (n,k)@(k,m)
void matmul_acc(double* c, const double* a, const double* b, long n, long k, long m) {
    for (long i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * m;
        for (long p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * m;
            for (long j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A @ B^T, A (n,m), B (k,m) -> C (n,k)
void matmul_acc_bt(double* c, const double* a, const double* b, long n, long m, long k) {
    for (long i = 0; i < n; ++i) {
        const double* arow = a + i * m;
        double* crow = c + i * k;
        for (long p = 0; p < k; ++p) {
            const double* brow = b + p * m;
            double acc = 0.0;
            for (long j = 0; j < m; ++j) acc += arow[j] * brow[j];
            crow[p] += acc;
        }
    }
}

// C += A^T @ B, A (n,k), B (n,m) -> C (k,m)
void matmul_acc_at(double* c, const double* a, const double* b, long n, long k, long m) {
    for (long i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * m;
        for (long p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * m;
            for (long j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        fail("matmul", "expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                           shape_str(b.shape()));
    long n = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], m = b.shape()[1];
    if (k != k2)
        fail("matmul", "inner dimensions differ " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
    Tensor out = make({n, m}, any_grad({&a, &b}), "matmul", {a.node_ptr(), b.node_ptr()});
    matmul_acc(out.values().data(), a.values().data(), b.values().data(), n, k, m);
    if (out.requires_grad()) {
        out.node()->backward = [n, k, m](detail::Node& nd) {
            detail::Node& a = *nd.inputs[0];
            detail::Node& b = *nd.inputs[1];
            if (a.requires_grad)
                matmul_acc_bt(grad_of(a), nd.grad.data(), b.values.data(), n, m, k);
            if (b.requires_grad)
                matmul_acc_at(grad_of(b), a.values.data(), nd.grad.data(), n, k, m);
        };
    }
    return out;
}

Tensor Tape::affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.shape().size() != 2 || w.shape().size() != 2 || b.shape().size() != 1)
        fail("affine", "expects x rank-2, w rank-2, b rank-1, got " + shape_str(x.shape()) +
                           ", " + shape_str(w.shape()) + ", " + shape_str(b.shape()));
    long n = x.shape()[0], in = x.shape()[1], in2 = w.shape()[0], out_dim = w.shape()[1];
    if (in != in2 || b.shape()[0] != out_dim)
        fail("affine", "incompatible shapes x" + shape_str(x.shape()) + " w" +
                           shape_str(w.shape()) + " b" + shape_str(b.shape()));
    Tensor out = make({n, out_dim}, any_grad({&x, &w, &b}), "affine",
                      {x.node_ptr(), w.node_ptr(), b.node_ptr()});
    auto& ov = out.values();
    const auto& bv = b.values();
    for (long i = 0; i < n; ++i)
        for (long j = 0; j < out_dim; ++j) ov[static_cast<size_t>(i * out_dim + j)] = bv[static_cast<size_t>(j)];
    matmul_acc(ov.data(), x.values().data(), w.values().data(), n, in, out_dim);
    if (out.requires_grad()) {
        out.node()->backward = [n, in, out_dim](detail::Node& nd) {
            detail::Node& x = *nd.inputs[0];
            detail::Node& w = *nd.inputs[1];
            detail::Node& b = *nd.inputs[2];
            if (x.requires_grad)
                matmul_acc_bt(grad_of(x), nd.grad.data(), w.values.data(), n, out_dim, in);
            if (w.requires_grad)
                matmul_acc_at(grad_of(w), x.values.data(), nd.grad.data(), n, in, out_dim);
            if (b.requires_grad) {
                double* g = grad_of(b);
                for (long i = 0; i < n; ++i)
                    for (long j = 0; j < out_dim; ++j) g[j] += nd.grad[static_cast<size_t>(i * out_dim + j)];
            }
        };
    }
    return out;
}

Tensor Tape::relu(const Tensor& x) {
    Tensor out = make(x.shape(), x.requires_grad(), "relu", {x.node_ptr()});
    const auto& xv = x.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    if (out.requires_grad()) {
        out.node()->backward = [](detail::Node& n) {
            detail::Node& x = *n.inputs[0];
            double* g = grad_of(x);
            for (size_t i = 0; i < n.grad.size(); ++i)
                if (x.values[i] > 0.0) g[i] += n.grad[i];
        };
    }
    return out;
}

Tensor Tape::tanh(const Tensor& x) {
    Tensor out = make(x.shape(), x.requires_grad(), "tanh", {x.node_ptr()});
    const auto& xv = x.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::tanh(xv[i]);
    if (out.requires_grad()) {
        out.node()->backward = [](detail::Node& n) {
            detail::Node& x = *n.inputs[0];
            double* g = grad_of(x);
            for (size_t i = 0; i < n.grad.size(); ++i)
                g[i] += n.grad[i] * (1.0 - n.values[i] * n.values[i]);
        };
    }
    return out;
}

Tensor Tape::softmax(const Tensor& x) {
    check_rank_le2("softmax", x);
    long cols = x.shape().size() == 2 ? x.shape()[1] : x.numel();
    long rows = x.numel() / cols;
    Tensor out = make(x.shape(), x.requires_grad(), "softmax", {x.node_ptr()});
    const auto& xv = x.values();
    auto& ov = out.values();
    for (long r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * cols;
        double* o = ov.data() + r * cols;
        double mx = in[0];
        for (long j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
        double total = 0.0;
        for (long j = 0; j < cols; ++j) {
            o[j] = std::exp(in[j] - mx);
            total += o[j];
        }
        for (long j = 0; j < cols; ++j) o[j] /= total;
    }
    if (out.requires_grad()) {
        out.node()->backward = [rows, cols](detail::Node& n) {
            detail::Node& x = *n.inputs[0];
            double* g = grad_of(x);
            for (long r = 0; r < rows; ++r) {
                const double* s = n.values.data() + r * cols;
                const double* gy = n.grad.data() + r * cols;
                double dot = 0.0;
                for (long j = 0; j < cols; ++j) dot += gy[j] * s[j];
                for (long j = 0; j < cols; ++j) g[r * cols + j] += s[j] * (gy[j] - dot);
            }
        };
    }
    return out;
}

Tensor Tape::sum(const Tensor& x) {
    Tensor out = make({}, x.requires_grad(), "sum", {x.node_ptr()});
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    out.values()[0] = acc;
    if (out.requires_grad()) {
        out.node()->backward = [](detail::Node& n) {
            detail::Node& x = *n.inputs[0];
            double* g = grad_of(x);
            double gy = n.grad[0];
            for (size_t i = 0; i < x.values.size(); ++i) g[i] += gy;
        };
    }
    return out;
}

Tensor Tape::mean(const Tensor& x) {
    Tensor out = make({}, x.requires_grad(), "mean", {x.node_ptr()});
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    const double inv_n = 1.0 / static_cast<double>(x.numel());
    out.values()[0] = acc * inv_n;
    if (out.requires_grad()) {
        out.node()->backward = [inv_n](detail::Node& n) {
            detail::Node& x = *n.inputs[0];
            double* g = grad_of(x);
            double gy = n.grad[0] * inv_n;
            for (size_t i = 0; i < x.values.size(); ++i) g[i] += gy;
        };
    }
    return out;
}

Tensor Tape::mse(const Tensor& a, const Tensor& b) {
    check_same_shape("mse", a, b);
    Tensor out = make({}, any_grad({&a, &b}), "mse", {a.node_ptr(), b.node_ptr()});
    const auto& av = a.values();
    const auto& bv = b.values();
    double acc = 0.0;
    for (size_t i = 0; i < av.size(); ++i) {
        double d = av[i] - bv[i];
        acc += d * d;
    }
    const double inv_n = 1.0 / static_cast<double>(a.numel());
    out.values()[0] = acc * inv_n;
    if (out.requires_grad()) {
        out.node()->backward = [inv_n](detail::Node& n) {
            detail::Node& a = *n.inputs[0];
            detail::Node& b = *n.inputs[1];
            double gy = n.grad[0] * 2.0 * inv_n;
            if (a.requires_grad) {
                double* g = grad_of(a);
                for (size_t i = 0; i < a.values.size(); ++i)
                    g[i] += gy * (a.values[i] - b.values[i]);
            }
            if (b.requires_grad) {
                double* g = grad_of(b);
                for (size_t i = 0; i < a.values.size(); ++i)
                    g[i] -= gy * (a.values[i] - b.values[i]);
            }
        };
    }
    return out;
}

Tensor Tape::concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) fail("concat", "empty input list");
    const Shape& first = parts[0].shape();
    if (first.empty()) fail("concat", "cannot concat scalars");
    Shape trailing(first.begin() + 1, first.end());
    long total_rows = 0;
    bool rg = false;
    std::vector<std::shared_ptr<detail::Node>> inputs;
    inputs.reserve(parts.size());
    for (const Tensor& p : parts) {
        if (p.shape().empty() ||
            Shape(p.shape().begin() + 1, p.shape().end()) != trailing)
            fail("concat", "incompatible part " + shape_str(p.shape()) + " vs " +
                               shape_str(first));
        total_rows += p.shape()[0];
        rg = rg || p.requires_grad();
        inputs.push_back(p.node_ptr());
    }
    Shape out_shape = first;
    out_shape[0] = total_rows;
    Tensor out = make(out_shape, rg, "concat", std::move(inputs));
    auto& ov = out.values();
    size_t offset = 0;
    for (const Tensor& p : parts) {
        std::copy(p.values().begin(), p.values().end(), ov.begin() + offset);
        offset += p.values().size();
    }
    if (out.requires_grad()) {
        out.node()->backward = [](detail::Node& n) {
            size_t offset = 0;
            for (auto& in : n.inputs) {
                if (in->requires_grad) {
                    double* g = grad_of(*in);
                    for (size_t i = 0; i < in->values.size(); ++i) g[i] += n.grad[offset + i];
                }
                offset += in->values.size();
            }
        };
    }
    return out;
}

Tensor Tape::slice(const Tensor& x, long begin, long end) {
    if (x.shape().empty()) fail("slice", "cannot slice a scalar");
    long rows = x.shape()[0];
    if (begin < 0 || end > rows || begin >= end)
        fail("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                          ") invalid for " + shape_str(x.shape()));
    Shape out_shape = x.shape();
    out_shape[0] = end - begin;
    long row_size = x.numel() / rows;
    Tensor out = make(out_shape, x.requires_grad(), "slice", {x.node_ptr()});
    const size_t from = static_cast<size_t>(begin * row_size);
    std::copy(x.values().begin() + from, x.values().begin() + from + out.numel(),
              out.values().begin());
    if (out.requires_grad()) {
        out.node()->backward = [from](detail::Node& n) {
            detail::Node& x = *n.inputs[0];
            double* g = grad_of(x);
            for (size_t i = 0; i < n.grad.size(); ++i) g[from + i] += n.grad[i];
        };
    }
    return out;
}

Tensor Tape::broadcast(const Tensor& x, const Shape& target) {
    const Shape& s = x.shape();
    enum class Mode { kCopy, kScalar, kRows } mode;
    if (s == target) {
        mode = Mode::kCopy;
    } else if (x.numel() == 1) {
        mode = Mode::kScalar;
    } else if (target.size() == 2 &&
               ((s.size() == 1 && s[0] == target[1]) ||
                (s.size() == 2 && s[0] == 1 && s[1] == target[1]))) {
        mode = Mode::kRows;
    } else {
        fail("broadcast", "cannot expand " + shape_str(s) + " to " + shape_str(target));
    }
    Tensor out = make(target, x.requires_grad(), "broadcast", {x.node_ptr()});
    auto& ov = out.values();
    const auto& xv = x.values();
    switch (mode) {
        case Mode::kCopy:
            std::copy(xv.begin(), xv.end(), ov.begin());
            break;
        case Mode::kScalar:
            std::fill(ov.begin(), ov.end(), xv[0]);
            break;
        case Mode::kRows: {
            long n = target[0], d = target[1];
            for (long i = 0; i < n; ++i)
                std::copy(xv.begin(), xv.end(), ov.begin() + i * d);
            break;
        }
    }
    if (out.requires_grad()) {
        out.node()->backward = [mode](detail::Node& n) {
            detail::Node& x = *n.inputs[0];
            double* g = grad_of(x);
            switch (mode) {
                case Mode::kCopy:
                    for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
                    break;
                case Mode::kScalar: {
                    double acc = 0.0;
                    for (double v : n.grad) acc += v;
                    g[0] += acc;
                    break;
                }
                case Mode::kRows: {
                    long n_rows = n.shape[0], d = n.shape[1];
                    for (long i = 0; i < n_rows; ++i)
                        for (long j = 0; j < d; ++j) g[j] += n.grad[static_cast<size_t>(i * d + j)];
                    break;
                }
            }
        };
    }
    return out;
}

Tensor Tape::scale(const Tensor& x, double c) {
    return mul(x, broadcast(Tensor::scalar(c), x.shape()));
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
    return add(a, scale(b, -1.0));
}

Tensor Tape::add_scaled(const Tensor& a, const Tensor& b, double c) {
    return add(a, scale(b, c));
}

Tensor Tape::mean_rows(const Tensor& x) {
    if (x.shape().size() != 2) fail("mean_rows", "expects rank-2, got " + shape_str(x.shape()));
    long n = x.shape()[0];
    Tensor weights = Tensor::full({1, n}, 1.0 / static_cast<double>(n));
    return matmul(weights, x);
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined()) throw TensorError("backward: undefined loss tensor");
    if (loss.numel() != 1)
        throw TensorError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (loss.node()->tape != this)
        throw TensorError("backward: loss was not produced by a forward pass on this tape");

    // mark everything the loss depends on; off-path grads stay untouched
    std::unordered_set<const detail::Node*> reachable;
    std::vector<const detail::Node*> stack{loss.node()};
    while (!stack.empty()) {
        const detail::Node* n = stack.back();
        stack.pop_back();
        if (!reachable.insert(n).second) continue;
        for (const auto& in : n->inputs) stack.push_back(in.get());
    }

    loss.node()->grad[0] += 1.0;
    for (auto it = record_.rbegin(); it != record_.rend(); ++it) {
        detail::Node* n = it->get();
        if (n->backward && reachable.count(n)) n->backward(*n);
    }
}

void Tape::zero_grads() {
    for (auto& n : record_) std::fill(n->grad.begin(), n->grad.end(), 0.0);
}

}  // namespace difflab
