#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace difflab {

using Shape = std::vector<long>;

long shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Tape;

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // allocated iff requires_grad
    bool requires_grad = false;
    const char* op = "leaf";
    const Tape* tape = nullptr;  // set when recorded by a tape
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    long numel() const { return static_cast<long>(values.size()); }
};

}  // namespace detail

// Dense float64 tensor. Copies are shallow handles onto shared storage; use
// clone() for an independent buffer. Gradients accumulate across uses and are
// cleared explicitly with zero_grad().
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    long numel() const { return node_->numel(); }
    long rows() const;
    long cols() const;

    const std::vector<double>& values() const { return node_->values; }
    std::vector<double>& values() { return node_->values; }
    double at(long i) const { return node_->values[static_cast<size_t>(i)]; }
    double at(long r, long c) const { return node_->values[static_cast<size_t>(r * cols() + c)]; }
    // value of a one-element tensor
    double value() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool enable);
    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const;
    std::vector<double>& grad();
    void zero_grad();

    // deep copy of values (and requires_grad flag); no tape history
    Tensor clone() const;
    // same values, requires_grad off, no tape history
    Tensor detach() const;

    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

    detail::Node* node() const { return node_.get(); }
    std::shared_ptr<detail::Node> node_ptr() const { return node_; }

private:
    friend class Tape;
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;
};

// Records differentiable primitives in execution order; replaying the record
// backward visits nodes in reverse topological order. Operations whose result
// does not require gradients are computed but not recorded, so inference-time
// graphs stay memory-free.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- primitives ----
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor matmul(const Tensor& a, const Tensor& b);
    // y = x @ w + b with b broadcast over rows
    Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);
    Tensor relu(const Tensor& x);
    Tensor tanh(const Tensor& x);
    // rank-1: over all entries; rank-2: per row
    Tensor softmax(const Tensor& x);
    Tensor sum(const Tensor& x);
    Tensor mean(const Tensor& x);
    Tensor mse(const Tensor& a, const Tensor& b);
    // along the first axis; trailing dimensions must agree
    Tensor concat(const std::vector<Tensor>& parts);
    // rows [begin, end) of the first axis
    Tensor slice(const Tensor& x, long begin, long end);
    // scalar -> any shape, (d) -> (n,d), (1,d) -> (n,d), identical shape -> copy
    Tensor broadcast(const Tensor& x, const Shape& target);

    // ---- composed helpers (no new primitives) ----
    Tensor scale(const Tensor& x, double c);
    Tensor sub(const Tensor& a, const Tensor& b);
    // a + c*b
    Tensor add_scaled(const Tensor& a, const Tensor& b, double c);
    // (n,d) -> (1,d) column means, via matmul with a constant row
    Tensor mean_rows(const Tensor& x);

    // Populates grad on every requires_grad tensor reachable from loss.
    // loss must be a scalar produced by operations recorded on this tape.
    void backward(const Tensor& loss);

    void clear() { record_.clear(); }
    size_t size() const { return record_.size(); }
    // zero the grad buffers of every recorded node
    void zero_grads();

private:
    Tensor make(Shape shape, bool requires_grad, const char* op,
                std::vector<std::shared_ptr<detail::Node>> inputs);

    std::vector<std::shared_ptr<detail::Node>> record_;
};

}  // namespace difflab
