#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// Every toy model in the project is expressed with these ops so that losses
// can be differentiated end to end (predictor -> one-step estimate -> decoder
// -> feature extractor -> cosine). Layout convention for images and latents
// is channel-planar: shape {C, H, W}, row-major.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace spurgen::ag {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t numel() const { return data_.size(); }
    int dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }
    std::span<double> span() { return data_; }
    std::span<const double> span() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double item() const;
    Tensor reshaped(Shape shape) const;
    bool all_finite() const;

private:
    Shape shape_;
    std::vector<double> data_;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad();
};

/// Handle to a node in the computation graph. Copies share the node.
class Var {
public:
    Var() = default;
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t numel() const { return node_->value.numel(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    double item() const { return node_->value.item(); }

    void zero_grad();
    const NodePtr& node() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    NodePtr node_;
};

/// Disables graph construction on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

Var constant(Tensor t);
Var parameter(Tensor t);

/// Accumulates d(root)/d(node) into every reachable node that requires grad.
/// The root must hold a single element.
void backward(const Var& root);

// Elementwise arithmetic. Shapes must match exactly unless noted.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var affine(const Var& a, double s, double shift);  // s * a + shift
Var silu(const Var& a);
Var tanh(const Var& a);
Var reshape(const Var& a, Shape shape);

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);
Var mse(const Var& pred, const Var& target);  // mean((pred - target)^2)

// Vector ops (rank-1 inputs).
Var concat(const Var& a, const Var& b);  // flat concatenation
Var linear(const Var& x, const Var& weight, const Var& bias);  // W[m,n] x[n] + b[m]
Var cosine(const Var& a, const Var& b, double eps_norm);

// Tensor ops on {C, H, W} maps.
Var conv2d(const Var& x, const Var& weight, const Var& bias);  // same padding, odd kernel
Var add_channel_bias(const Var& x, const Var& bias);           // bias[C] broadcast over HxW
Var concat_channels(const Var& a, const Var& b);
Var avg_pool2(const Var& x);
Var upsample2(const Var& x);
Var global_mean_pool(const Var& x);  // {C,H,W} -> {C}

// Sequence ops.
Var embedding(const Var& table, std::span<const int> ids);  // table[V,E] -> {L,E}
Var mean_rows(const Var& x);                                  // {L,E} -> {E}

Var softmax_cross_entropy(const Var& logits, int label);

}  // namespace spurgen::ag
