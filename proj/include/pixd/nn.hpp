#pragma once

#include <array>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "pixd/rng.hpp"
#include "pixd/tensor.hpp"

namespace pixd::nn {

struct Parameter {
    Tensor value;
    Tensor grad;  // allocated on first accumulation

    void ensure_grad() {
        if (grad.numel() != value.numel()) grad = Tensor::zeros(value.shape());
    }
    void zero_grad() {
        if (grad.numel() > 0) grad.fill(0.0);
    }
};

struct NamedParam {
    std::string name;
    Parameter* param;
};

/// Named tensors for checkpointing: parameters plus buffers (running stats).
struct NamedTensor {
    std::string name;
    Tensor* tensor;
};

/// Per-layer cost ledger. FLOPs convention: 2 per multiply-accumulate for
/// conv/deconv/linear, per-element counts for normalization, activations,
/// pooling and residual adds.
struct CostSheet {
    struct Item {
        std::string name;
        int64_t params = 0;
        int64_t flops = 0;
    };
    std::vector<Item> items;

    void add(const std::string& name, int64_t params, int64_t flops) { items.push_back({name, params, flops}); }
    int64_t total_params() const {
        int64_t s = 0;
        for (const auto& it : items) s += it.params;
        return s;
    }
    int64_t total_flops() const {
        int64_t s = 0;
        for (const auto& it : items) s += it.flops;
        return s;
    }
};

using Chw = std::array<int64_t, 3>;

class Layer {
public:
    virtual ~Layer() = default;

    /// `training` selects batch-norm statistics; `record` keeps whatever the
    /// backward pass needs. Non-recording forwards leave the layer untouched
    /// apart from batch-norm running-stat updates in training mode.
    virtual Tensor forward(const Tensor& x, bool training, bool record) = 0;

    /// Must follow a recording forward. Accumulates parameter gradients and
    /// returns the gradient w.r.t. the layer input.
    virtual Tensor backward(const Tensor& grad_out) = 0;

    virtual void collect_params(const std::string& prefix, std::vector<NamedParam>& out) { (void)prefix, (void)out; }
    virtual void collect_state(const std::string& prefix, std::vector<NamedTensor>& out) { (void)prefix, (void)out; }

    /// Static shape/cost propagation for an input of (C,H,W), batch size 1.
    virtual void account(const std::string& prefix, CostSheet& sheet, Chw& chw) const = 0;
};

using LayerPtr = std::unique_ptr<Layer>;

// ---------------------------------------------------------------------------
// primitive tensor ops

void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, Scalar alpha, const Scalar* a, int64_t lda,
          const Scalar* b, int64_t ldb, Scalar beta, Scalar* c, int64_t ldc);

/// col has (C*kh*kw) rows by (grid_h*grid_w) cols; grid positions walk the
/// stride lattice with the given top/left padding.
void im2col(const Scalar* im, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t sh, int64_t sw,
            int64_t pt, int64_t pl, int64_t grid_h, int64_t grid_w, Scalar* col);
void col2im_add(const Scalar* col, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t sh, int64_t sw,
                int64_t pt, int64_t pl, int64_t grid_h, int64_t grid_w, Scalar* im);

/// Channel shuffle: output channel j reads input channel (j % groups) * (C/groups) + j / groups.
Tensor channel_shuffle(const Tensor& x, int64_t groups);

Tensor concat_channels(const Tensor& a, const Tensor& b);
std::pair<Tensor, Tensor> split_channels(const Tensor& x, int64_t first);

/// PyTorch-style adaptive average pooling (forward only; used to align
/// teacher maps whose gradient is never needed).
Tensor adaptive_avg_pool(const Tensor& x, int64_t out_h, int64_t out_w);

void set_compute_threads(int threads);

// ---------------------------------------------------------------------------
// layers

class Conv2d : public Layer {
public:
    Conv2d(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride, int64_t pad, int64_t groups = 1,
           bool bias = false)
        : Conv2d(in_ch, out_ch, kernel, stride, pad, pad, pad, pad, groups, bias) {}
    Conv2d(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride, int64_t pad_t, int64_t pad_l, int64_t pad_b,
           int64_t pad_r, int64_t groups, bool bias);

    void init(Rng& rng);
    Tensor forward(const Tensor& x, bool training, bool record) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect_params(const std::string& prefix, std::vector<NamedParam>& out) override;
    void collect_state(const std::string& prefix, std::vector<NamedTensor>& out) override;
    void account(const std::string& prefix, CostSheet& sheet, Chw& chw) const override;

    Parameter weight;  // (out, in/groups, k, k)
    Parameter bias_p;  // (out) when has_bias

    int64_t in_ch, out_ch, k, stride, pad_t, pad_l, pad_b, pad_r, groups;
    bool has_bias;

private:
    std::array<int64_t, 2> out_hw(int64_t h, int64_t w) const;
    Tensor saved_input_;
};

class ConvTranspose2d : public Layer {
public:
    ConvTranspose2d(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride, int64_t groups = 1);

    void init(Rng& rng);
    Tensor forward(const Tensor& x, bool training, bool record) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect_params(const std::string& prefix, std::vector<NamedParam>& out) override;
    void collect_state(const std::string& prefix, std::vector<NamedTensor>& out) override;
    void account(const std::string& prefix, CostSheet& sheet, Chw& chw) const override;

    Parameter weight;  // (in, out/groups, k, k)
    int64_t in_ch, out_ch, k, stride, groups;

private:
    Tensor saved_input_;
};

class BatchNorm2d : public Layer {
public:
    explicit BatchNorm2d(int64_t ch, double eps = 1e-5, double momentum = 0.1);

    Tensor forward(const Tensor& x, bool training, bool record) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect_params(const std::string& prefix, std::vector<NamedParam>& out) override;
    void collect_state(const std::string& prefix, std::vector<NamedTensor>& out) override;
    void account(const std::string& prefix, CostSheet& sheet, Chw& chw) const override;

    Parameter weight;  // gamma
    Parameter bias_p;  // beta
    Tensor running_mean, running_var;
    int64_t ch;
    double eps, momentum;

private:
    Tensor saved_xhat_;
    std::vector<Scalar> saved_invstd_;
    bool saved_training_ = false;
    int64_t saved_count_ = 0;
};

class ReLU : public Layer {
public:
    Tensor forward(const Tensor& x, bool training, bool record) override;
    Tensor backward(const Tensor& grad_out) override;
    void account(const std::string& prefix, CostSheet& sheet, Chw& chw) const override;

private:
    std::vector<char> saved_mask_;
    Shape saved_shape_;
};

class MaxPool2d : public Layer {
public:
    MaxPool2d(int64_t kernel, int64_t stride, int64_t pad);

    Tensor forward(const Tensor& x, bool training, bool record) override;
    Tensor backward(const Tensor& grad_out) override;
    void account(const std::string& prefix, CostSheet& sheet, Chw& chw) const override;

    int64_t k, stride, pad;

private:
    std::vector<int64_t> saved_argmax_;
    Shape saved_in_shape_;
};

class GlobalAvgPool : public Layer {
public:
    Tensor forward(const Tensor& x, bool training, bool record) override;
    Tensor backward(const Tensor& grad_out) override;
    void account(const std::string& prefix, CostSheet& sheet, Chw& chw) const override;

private:
    Shape saved_in_shape_;
};

/// (N,C,1,1) -> (N,C)
class Flatten : public Layer {
public:
    Tensor forward(const Tensor& x, bool training, bool record) override;
    Tensor backward(const Tensor& grad_out) override;
    void account(const std::string& prefix, CostSheet& sheet, Chw& chw) const override;

private:
    Shape saved_in_shape_;
};

class Linear : public Layer {
public:
    Linear(int64_t in_f, int64_t out_f, bool bias = true);

    void init(Rng& rng);
    Tensor forward(const Tensor& x, bool training, bool record) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect_params(const std::string& prefix, std::vector<NamedParam>& out) override;
    void collect_state(const std::string& prefix, std::vector<NamedTensor>& out) override;
    void account(const std::string& prefix, CostSheet& sheet, Chw& chw) const override;

    Parameter weight;  // (out, in)
    Parameter bias_p;
    int64_t in_f, out_f;
    bool has_bias;

private:
    Tensor saved_input_;
};

class ChannelShuffle : public Layer {
public:
    explicit ChannelShuffle(int64_t groups) : groups(groups) {}

    Tensor forward(const Tensor& x, bool training, bool record) override;
    Tensor backward(const Tensor& grad_out) override;
    void account(const std::string& prefix, CostSheet& sheet, Chw& chw) const override;

    int64_t groups;

private:
    int64_t saved_channels_ = 0;
};

class Identity : public Layer {
public:
    Tensor forward(const Tensor& x, bool, bool) override { return x; }
    Tensor backward(const Tensor& grad_out) override { return grad_out; }
    void account(const std::string&, CostSheet&, Chw&) const override {}
};

// ---------------------------------------------------------------------------
// containers

class Sequential : public Layer {
public:
    Sequential() = default;

    template <typename L, typename... Args>
    L* emplace(Args&&... args) {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L* raw = layer.get();
        children_.push_back(std::move(layer));
        return raw;
    }
    void push(LayerPtr layer) { children_.push_back(std::move(layer)); }

    Tensor forward(const Tensor& x, bool training, bool record) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect_params(const std::string& prefix, std::vector<NamedParam>& out) override;
    void collect_state(const std::string& prefix, std::vector<NamedTensor>& out) override;
    void account(const std::string& prefix, CostSheet& sheet, Chw& chw) const override;

    size_t size() const { return children_.size(); }
    Layer* child(size_t i) { return children_[i].get(); }

private:
    std::vector<LayerPtr> children_;
};

/// y = relu(main(x) + shortcut(x)); shortcut empty means identity.
class Residual : public Layer {
public:
    Residual(std::unique_ptr<Sequential> main, std::unique_ptr<Sequential> shortcut)
        : main_(std::move(main)), shortcut_(std::move(shortcut)) {}

    Tensor forward(const Tensor& x, bool training, bool record) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect_params(const std::string& prefix, std::vector<NamedParam>& out) override;
    void collect_state(const std::string& prefix, std::vector<NamedTensor>& out) override;
    void account(const std::string& prefix, CostSheet& sheet, Chw& chw) const override;

private:
    std::unique_ptr<Sequential> main_;
    std::unique_ptr<Sequential> shortcut_;  // may be null
    ReLU relu_;
};

/// ShuffleNetV2 unit. stride 1 splits channels in half and transforms the
/// second half; stride 2 runs both branches on the full input.
class ShuffleUnit : public Layer {
public:
    ShuffleUnit(std::unique_ptr<Sequential> branch1, std::unique_ptr<Sequential> branch2, int64_t stride,
                int64_t split)
        : branch1_(std::move(branch1)), branch2_(std::move(branch2)), stride_(stride), split_(split) {}

    Tensor forward(const Tensor& x, bool training, bool record) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect_params(const std::string& prefix, std::vector<NamedParam>& out) override;
    void collect_state(const std::string& prefix, std::vector<NamedTensor>& out) override;
    void account(const std::string& prefix, CostSheet& sheet, Chw& chw) const override;

private:
    std::unique_ptr<Sequential> branch1_;  // null for stride 1
    std::unique_ptr<Sequential> branch2_;
    int64_t stride_;
    int64_t split_;
};

// ---------------------------------------------------------------------------

class SGD {
public:
    SGD(std::vector<NamedParam> params, double momentum, double weight_decay)
        : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {}

    void zero_grad();
    /// v = mu*v + (g + wd*w); w -= lr*v
    void step(double lr);
    size_t step_count() const { return steps_; }

private:
    std::vector<NamedParam> params_;
    double momentum_, weight_decay_;
    std::vector<Tensor> momentum_bufs_;
    size_t steps_ = 0;
};

// init helpers
void kaiming_normal_fan_out(Tensor& w, int64_t fan_out, Rng& rng);
void uniform_init(Tensor& w, double bound, Rng& rng);

}  // namespace pixd::nn
