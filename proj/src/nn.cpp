#include "pixd/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include <cblas.h>

extern "C" void openblas_set_num_threads(int);

namespace pixd::nn {

void set_compute_threads(int threads) { openblas_set_num_threads(threads); }

void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, Scalar alpha, const Scalar* a, int64_t lda,
          const Scalar* b, int64_t ldb, Scalar beta, Scalar* c, int64_t ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b,
                static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

void im2col(const Scalar* im, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t sh, int64_t sw,
            int64_t pt, int64_t pl, int64_t grid_h, int64_t grid_w, Scalar* col) {
    const int64_t grid = grid_h * grid_w;
    for (int64_t ch = 0; ch < c; ++ch) {
        const Scalar* src = im + ch * h * w;
        for (int64_t ki = 0; ki < kh; ++ki) {
            for (int64_t kj = 0; kj < kw; ++kj) {
                Scalar* dst = col + ((ch * kh + ki) * kw + kj) * grid;
                for (int64_t gi = 0; gi < grid_h; ++gi) {
                    int64_t ih = gi * sh - pt + ki;
                    if (ih < 0 || ih >= h) {
                        std::memset(dst + gi * grid_w, 0, sizeof(Scalar) * static_cast<size_t>(grid_w));
                        continue;
                    }
                    for (int64_t gj = 0; gj < grid_w; ++gj) {
                        int64_t iw = gj * sw - pl + kj;
                        dst[gi * grid_w + gj] = (iw < 0 || iw >= w) ? 0.0 : src[ih * w + iw];
                    }
                }
            }
        }
    }
}

void col2im_add(const Scalar* col, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t sh, int64_t sw,
                int64_t pt, int64_t pl, int64_t grid_h, int64_t grid_w, Scalar* im) {
    const int64_t grid = grid_h * grid_w;
    for (int64_t ch = 0; ch < c; ++ch) {
        Scalar* dst = im + ch * h * w;
        for (int64_t ki = 0; ki < kh; ++ki) {
            for (int64_t kj = 0; kj < kw; ++kj) {
                const Scalar* src = col + ((ch * kh + ki) * kw + kj) * grid;
                for (int64_t gi = 0; gi < grid_h; ++gi) {
                    int64_t ih = gi * sh - pt + ki;
                    if (ih < 0 || ih >= h) continue;
                    for (int64_t gj = 0; gj < grid_w; ++gj) {
                        int64_t iw = gj * sw - pl + kj;
                        if (iw < 0 || iw >= w) continue;
                        dst[ih * w + iw] += src[gi * grid_w + gj];
                    }
                }
            }
        }
    }
}

Tensor channel_shuffle(const Tensor& x, int64_t groups) {
    if (x.dim() != 4) throw std::invalid_argument("channel_shuffle expects NCHW");
    int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    if (c % groups != 0) throw std::invalid_argument("channel_shuffle: channels not divisible by groups");
    Tensor out(x.shape());
    const int64_t per = c / groups;
    const int64_t hw = h * w;
    for (int64_t ni = 0; ni < n; ++ni) {
        for (int64_t j = 0; j < c; ++j) {
            int64_t src = (j % groups) * per + j / groups;
            std::memcpy(out.data() + (ni * c + j) * hw, x.data() + (ni * c + src) * hw,
                        sizeof(Scalar) * static_cast<size_t>(hw));
        }
    }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    int64_t n = a.size(0), ca = a.size(1), cb = b.size(1), h = a.size(2), w = a.size(3);
    if (b.size(0) != n || b.size(2) != h || b.size(3) != w)
        throw std::invalid_argument("concat_channels: spatial/batch mismatch");
    Tensor out({n, ca + cb, h, w});
    const int64_t hw = h * w;
    for (int64_t ni = 0; ni < n; ++ni) {
        std::memcpy(out.data() + ni * (ca + cb) * hw, a.data() + ni * ca * hw,
                    sizeof(Scalar) * static_cast<size_t>(ca * hw));
        std::memcpy(out.data() + (ni * (ca + cb) + ca) * hw, b.data() + ni * cb * hw,
                    sizeof(Scalar) * static_cast<size_t>(cb * hw));
    }
    return out;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& x, int64_t first) {
    int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    Tensor a({n, first, h, w});
    Tensor b({n, c - first, h, w});
    const int64_t hw = h * w;
    for (int64_t ni = 0; ni < n; ++ni) {
        std::memcpy(a.data() + ni * first * hw, x.data() + ni * c * hw, sizeof(Scalar) * static_cast<size_t>(first * hw));
        std::memcpy(b.data() + ni * (c - first) * hw, x.data() + (ni * c + first) * hw,
                    sizeof(Scalar) * static_cast<size_t>((c - first) * hw));
    }
    return {std::move(a), std::move(b)};
}

Tensor adaptive_avg_pool(const Tensor& x, int64_t out_h, int64_t out_w) {
    int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    Tensor out({n, c, out_h, out_w});
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ci = 0; ci < c; ++ci) {
            const Scalar* src = x.data() + (ni * c + ci) * h * w;
            Scalar* dst = out.data() + (ni * c + ci) * out_h * out_w;
            for (int64_t oi = 0; oi < out_h; ++oi) {
                int64_t h0 = oi * h / out_h;
                int64_t h1 = ((oi + 1) * h + out_h - 1) / out_h;
                for (int64_t oj = 0; oj < out_w; ++oj) {
                    int64_t w0 = oj * w / out_w;
                    int64_t w1 = ((oj + 1) * w + out_w - 1) / out_w;
                    Scalar s = 0.0;
                    for (int64_t ih = h0; ih < h1; ++ih)
                        for (int64_t iw = w0; iw < w1; ++iw) s += src[ih * w + iw];
                    dst[oi * out_w + oj] = s / static_cast<Scalar>((h1 - h0) * (w1 - w0));
                }
            }
        }
    return out;
}

void kaiming_normal_fan_out(Tensor& w, int64_t fan_out, Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(fan_out));
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal(0.0, std);
}

void uniform_init(Tensor& w, double bound, Rng& rng) {
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-bound, bound);
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride, int64_t pad_t, int64_t pad_l,
               int64_t pad_b, int64_t pad_r, int64_t groups, bool bias)
    : in_ch(in_ch), out_ch(out_ch), k(kernel), stride(stride), pad_t(pad_t), pad_l(pad_l), pad_b(pad_b), pad_r(pad_r),
      groups(groups), has_bias(bias) {
    if (in_ch % groups != 0 || out_ch % groups != 0)
        throw std::invalid_argument("conv: channels not divisible by groups");
    weight.value = Tensor({out_ch, in_ch / groups, k, k});
    if (has_bias) bias_p.value = Tensor({out_ch});
}

void Conv2d::init(Rng& rng) {
    kaiming_normal_fan_out(weight.value, out_ch * k * k, rng);
    if (has_bias) {
        double bound = 1.0 / std::sqrt(static_cast<double>(in_ch / groups * k * k));
        uniform_init(bias_p.value, bound, rng);
    }
}

std::array<int64_t, 2> Conv2d::out_hw(int64_t h, int64_t w) const {
    int64_t ho = (h + pad_t + pad_b - k) / stride + 1;
    int64_t wo = (w + pad_l + pad_r - k) / stride + 1;
    if (ho < 1 || wo < 1) throw std::invalid_argument("conv: output collapses below 1x1");
    return {ho, wo};
}

Tensor Conv2d::forward(const Tensor& x, bool /*training*/, bool record) {
    if (x.size(1) != in_ch) throw std::invalid_argument("conv: channel mismatch");
    const int64_t n = x.size(0), h = x.size(2), w = x.size(3);
    auto [ho, wo] = out_hw(h, w);
    const int64_t grid = ho * wo;
    const int64_t cin_g = in_ch / groups, cout_g = out_ch / groups;
    const int64_t kk = k * k;

    Tensor out({n, out_ch, ho, wo});
    std::vector<Scalar> col(static_cast<size_t>(in_ch * kk * grid));
    for (int64_t ni = 0; ni < n; ++ni) {
        im2col(x.data() + ni * in_ch * h * w, in_ch, h, w, k, k, stride, stride, pad_t, pad_l, ho, wo, col.data());
        for (int64_t g = 0; g < groups; ++g) {
            gemm(false, false, cout_g, grid, cin_g * kk, 1.0, weight.value.data() + g * cout_g * cin_g * kk,
                 cin_g * kk, col.data() + g * cin_g * kk * grid, grid, 0.0,
                 out.data() + (ni * out_ch + g * cout_g) * grid, grid);
        }
        if (has_bias) {
            for (int64_t c = 0; c < out_ch; ++c) {
                Scalar b = bias_p.value[c];
                Scalar* dst = out.data() + (ni * out_ch + c) * grid;
                for (int64_t i = 0; i < grid; ++i) dst[i] += b;
            }
        }
    }
    if (record) saved_input_ = x;
    return out;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
    const Tensor& x = saved_input_;
    const int64_t n = x.size(0), h = x.size(2), w = x.size(3);
    const int64_t ho = grad_out.size(2), wo = grad_out.size(3);
    const int64_t grid = ho * wo;
    const int64_t cin_g = in_ch / groups, cout_g = out_ch / groups;
    const int64_t kk = k * k;

    weight.ensure_grad();
    if (has_bias) bias_p.ensure_grad();

    Tensor dx(x.shape());
    std::vector<Scalar> col(static_cast<size_t>(in_ch * kk * grid));
    std::vector<Scalar> dcol(static_cast<size_t>(in_ch * kk * grid));
    for (int64_t ni = 0; ni < n; ++ni) {
        im2col(x.data() + ni * in_ch * h * w, in_ch, h, w, k, k, stride, stride, pad_t, pad_l, ho, wo, col.data());
        const Scalar* gout = grad_out.data() + ni * out_ch * grid;
        for (int64_t g = 0; g < groups; ++g) {
            // dW += gout * col^T
            gemm(false, true, cout_g, cin_g * kk, grid, 1.0, gout + g * cout_g * grid, grid,
                 col.data() + g * cin_g * kk * grid, grid, 1.0, weight.grad.data() + g * cout_g * cin_g * kk,
                 cin_g * kk);
            // dcol = W^T * gout
            gemm(true, false, cin_g * kk, grid, cout_g, 1.0, weight.value.data() + g * cout_g * cin_g * kk,
                 cin_g * kk, gout + g * cout_g * grid, grid, 0.0, dcol.data() + g * cin_g * kk * grid, grid);
        }
        col2im_add(dcol.data(), in_ch, h, w, k, k, stride, stride, pad_t, pad_l, ho, wo,
                   dx.data() + ni * in_ch * h * w);
        if (has_bias) {
            for (int64_t c = 0; c < out_ch; ++c) {
                Scalar s = 0.0;
                const Scalar* src = gout + c * grid;
                for (int64_t i = 0; i < grid; ++i) s += src[i];
                bias_p.grad[c] += s;
            }
        }
    }
    return dx;
}

void Conv2d::collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".weight", &weight});
    if (has_bias) out.push_back({prefix + ".bias", &bias_p});
}

void Conv2d::collect_state(const std::string& prefix, std::vector<NamedTensor>& out) {
    out.push_back({prefix + ".weight", &weight.value});
    if (has_bias) out.push_back({prefix + ".bias", &bias_p.value});
}

void Conv2d::account(const std::string& prefix, CostSheet& sheet, Chw& chw) const {
    auto [ho, wo] = out_hw(chw[1], chw[2]);
    int64_t params = weight.value.numel() + (has_bias ? out_ch : 0);
    int64_t macs = out_ch * ho * wo * (in_ch / groups) * k * k;
    int64_t flops = 2 * macs + (has_bias ? out_ch * ho * wo : 0);
    sheet.add(prefix, params, flops);
    chw = {out_ch, ho, wo};
}

// ---------------------------------------------------------------------------
// ConvTranspose2d

ConvTranspose2d::ConvTranspose2d(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride, int64_t groups)
    : in_ch(in_ch), out_ch(out_ch), k(kernel), stride(stride), groups(groups) {
    if (in_ch % groups != 0 || out_ch % groups != 0)
        throw std::invalid_argument("deconv: channels not divisible by groups");
    weight.value = Tensor({in_ch, out_ch / groups, k, k});
}

void ConvTranspose2d::init(Rng& rng) { kaiming_normal_fan_out(weight.value, (out_ch / groups) * k * k, rng); }

Tensor ConvTranspose2d::forward(const Tensor& x, bool /*training*/, bool record) {
    if (x.size(1) != in_ch) throw std::invalid_argument("deconv: channel mismatch");
    const int64_t n = x.size(0), h = x.size(2), w = x.size(3);
    const int64_t ho = (h - 1) * stride + k, wo = (w - 1) * stride + k;
    const int64_t cin_g = in_ch / groups, cout_g = out_ch / groups;
    const int64_t kk = k * k;
    const int64_t grid = h * w;

    Tensor out({n, out_ch, ho, wo});
    std::vector<Scalar> col(static_cast<size_t>(cout_g * kk * grid));
    for (int64_t ni = 0; ni < n; ++ni) {
        for (int64_t g = 0; g < groups; ++g) {
            // col = W_g^T * x_g, then scatter into the upsampled map
            gemm(true, false, cout_g * kk, grid, cin_g, 1.0, weight.value.data() + g * cin_g * cout_g * kk,
                 cout_g * kk, x.data() + (ni * in_ch + g * cin_g) * grid, grid, 0.0, col.data(), grid);
            Scalar* dst = out.data() + (ni * out_ch + g * cout_g) * ho * wo;
            // dst region is already zeroed by the Tensor constructor
            col2im_add(col.data(), cout_g, ho, wo, k, k, stride, stride, 0, 0, h, w, dst);
        }
    }
    if (record) saved_input_ = x;
    return out;
}

Tensor ConvTranspose2d::backward(const Tensor& grad_out) {
    const Tensor& x = saved_input_;
    const int64_t n = x.size(0), h = x.size(2), w = x.size(3);
    const int64_t ho = grad_out.size(2), wo = grad_out.size(3);
    const int64_t cin_g = in_ch / groups, cout_g = out_ch / groups;
    const int64_t kk = k * k;
    const int64_t grid = h * w;

    weight.ensure_grad();
    Tensor dx(x.shape());
    std::vector<Scalar> gcol(static_cast<size_t>(cout_g * kk * grid));
    for (int64_t ni = 0; ni < n; ++ni) {
        for (int64_t g = 0; g < groups; ++g) {
            im2col(grad_out.data() + (ni * out_ch + g * cout_g) * ho * wo, cout_g, ho, wo, k, k, stride, stride, 0, 0,
                   h, w, gcol.data());
            // dx_g = W_g * gcol
            gemm(false, false, cin_g, grid, cout_g * kk, 1.0, weight.value.data() + g * cin_g * cout_g * kk,
                 cout_g * kk, gcol.data(), grid, 0.0, dx.data() + (ni * in_ch + g * cin_g) * grid, grid);
            // dW_g += x_g * gcol^T
            gemm(false, true, cin_g, cout_g * kk, grid, 1.0, x.data() + (ni * in_ch + g * cin_g) * grid, grid,
                 gcol.data(), grid, 1.0, weight.grad.data() + g * cin_g * cout_g * kk, cout_g * kk);
        }
    }
    return dx;
}

void ConvTranspose2d::collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".weight", &weight});
}

void ConvTranspose2d::collect_state(const std::string& prefix, std::vector<NamedTensor>& out) {
    out.push_back({prefix + ".weight", &weight.value});
}

void ConvTranspose2d::account(const std::string& prefix, CostSheet& sheet, Chw& chw) const {
    int64_t h = chw[1], w = chw[2];
    int64_t ho = (h - 1) * stride + k, wo = (w - 1) * stride + k;
    int64_t macs = h * w * in_ch * (out_ch / groups) * k * k;
    sheet.add(prefix, weight.value.numel(), 2 * macs);
    chw = {out_ch, ho, wo};
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(int64_t ch, double eps, double momentum) : ch(ch), eps(eps), momentum(momentum) {
    weight.value = Tensor::full({ch}, 1.0);
    bias_p.value = Tensor({ch});
    running_mean = Tensor({ch});
    running_var = Tensor::full({ch}, 1.0);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training, bool record) {
    const int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    if (c != ch) throw std::invalid_argument("batchnorm: channel mismatch");
    const int64_t hw = h * w;
    const int64_t count = n * hw;

    Tensor out(x.shape());
    Tensor xhat(record ? x.shape() : Shape{0});
    std::vector<Scalar> invstd(static_cast<size_t>(c));

    for (int64_t ci = 0; ci < c; ++ci) {
        Scalar mean, var;
        if (training) {
            Scalar s = 0.0, s2 = 0.0;
            for (int64_t ni = 0; ni < n; ++ni) {
                const Scalar* src = x.data() + (ni * c + ci) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    s += src[i];
                    s2 += src[i] * src[i];
                }
            }
            mean = s / static_cast<Scalar>(count);
            var = s2 / static_cast<Scalar>(count) - mean * mean;
            if (var < 0.0) var = 0.0;
            Scalar unbiased = count > 1 ? var * static_cast<Scalar>(count) / static_cast<Scalar>(count - 1) : var;
            running_mean[ci] = (1.0 - momentum) * running_mean[ci] + momentum * mean;
            running_var[ci] = (1.0 - momentum) * running_var[ci] + momentum * unbiased;
        } else {
            mean = running_mean[ci];
            var = running_var[ci];
        }
        const Scalar istd = 1.0 / std::sqrt(var + eps);
        invstd[static_cast<size_t>(ci)] = istd;
        const Scalar g = weight.value[ci], b = bias_p.value[ci];
        for (int64_t ni = 0; ni < n; ++ni) {
            const Scalar* src = x.data() + (ni * c + ci) * hw;
            Scalar* dst = out.data() + (ni * c + ci) * hw;
            Scalar* xh = record ? xhat.data() + (ni * c + ci) * hw : nullptr;
            for (int64_t i = 0; i < hw; ++i) {
                Scalar norm = (src[i] - mean) * istd;
                if (xh) xh[i] = norm;
                dst[i] = g * norm + b;
            }
        }
    }
    if (record) {
        saved_xhat_ = std::move(xhat);
        saved_invstd_ = std::move(invstd);
        saved_training_ = training;
        saved_count_ = count;
    }
    return out;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out) {
    const int64_t n = grad_out.size(0), c = grad_out.size(1), hw = grad_out.size(2) * grad_out.size(3);
    weight.ensure_grad();
    bias_p.ensure_grad();

    Tensor dx(grad_out.shape());
    const Scalar count = static_cast<Scalar>(saved_count_);
    for (int64_t ci = 0; ci < c; ++ci) {
        Scalar sum_g = 0.0, sum_gx = 0.0;
        for (int64_t ni = 0; ni < n; ++ni) {
            const Scalar* g = grad_out.data() + (ni * c + ci) * hw;
            const Scalar* xh = saved_xhat_.data() + (ni * c + ci) * hw;
            for (int64_t i = 0; i < hw; ++i) {
                sum_g += g[i];
                sum_gx += g[i] * xh[i];
            }
        }
        weight.grad[ci] += sum_gx;
        bias_p.grad[ci] += sum_g;

        const Scalar gamma = weight.value[ci];
        const Scalar istd = saved_invstd_[static_cast<size_t>(ci)];
        if (saved_training_) {
            const Scalar norm = gamma * istd / count;
            for (int64_t ni = 0; ni < n; ++ni) {
                const Scalar* g = grad_out.data() + (ni * c + ci) * hw;
                const Scalar* xh = saved_xhat_.data() + (ni * c + ci) * hw;
                Scalar* d = dx.data() + (ni * c + ci) * hw;
                for (int64_t i = 0; i < hw; ++i) d[i] = norm * (count * g[i] - sum_g - xh[i] * sum_gx);
            }
        } else {
            const Scalar scale = gamma * istd;
            for (int64_t ni = 0; ni < n; ++ni) {
                const Scalar* g = grad_out.data() + (ni * c + ci) * hw;
                Scalar* d = dx.data() + (ni * c + ci) * hw;
                for (int64_t i = 0; i < hw; ++i) d[i] = scale * g[i];
            }
        }
    }
    return dx;
}

void BatchNorm2d::collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias_p});
}

void BatchNorm2d::collect_state(const std::string& prefix, std::vector<NamedTensor>& out) {
    out.push_back({prefix + ".weight", &weight.value});
    out.push_back({prefix + ".bias", &bias_p.value});
    out.push_back({prefix + ".running_mean", &running_mean});
    out.push_back({prefix + ".running_var", &running_var});
}

void BatchNorm2d::account(const std::string& prefix, CostSheet& sheet, Chw& chw) const {
    sheet.add(prefix, 2 * ch, 2 * chw[0] * chw[1] * chw[2]);
}

// ---------------------------------------------------------------------------
// ReLU

Tensor ReLU::forward(const Tensor& x, bool /*training*/, bool record) {
    Tensor out(x.shape());
    if (record) {
        saved_mask_.assign(static_cast<size_t>(x.numel()), 0);
        saved_shape_ = x.shape();
    }
    for (int64_t i = 0; i < x.numel(); ++i) {
        bool pos = x[i] > 0.0;
        out[i] = pos ? x[i] : 0.0;
        if (record && pos) saved_mask_[static_cast<size_t>(i)] = 1;
    }
    return out;
}

Tensor ReLU::backward(const Tensor& grad_out) {
    Tensor dx(grad_out.shape());
    for (int64_t i = 0; i < grad_out.numel(); ++i)
        dx[i] = saved_mask_[static_cast<size_t>(i)] ? grad_out[i] : 0.0;
    return dx;
}

void ReLU::account(const std::string& prefix, CostSheet& sheet, Chw& chw) const {
    sheet.add(prefix, 0, chw[0] * chw[1] * chw[2]);
}

// ---------------------------------------------------------------------------
// MaxPool2d

MaxPool2d::MaxPool2d(int64_t kernel, int64_t stride, int64_t pad) : k(kernel), stride(stride), pad(pad) {}

Tensor MaxPool2d::forward(const Tensor& x, bool /*training*/, bool record) {
    const int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    const int64_t ho = (h + 2 * pad - k) / stride + 1;
    const int64_t wo = (w + 2 * pad - k) / stride + 1;
    Tensor out({n, c, ho, wo});
    if (record) {
        saved_argmax_.assign(static_cast<size_t>(out.numel()), 0);
        saved_in_shape_ = x.shape();
    }
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ci = 0; ci < c; ++ci) {
            const Scalar* src = x.data() + (ni * c + ci) * h * w;
            Scalar* dst = out.data() + (ni * c + ci) * ho * wo;
            for (int64_t oi = 0; oi < ho; ++oi)
                for (int64_t oj = 0; oj < wo; ++oj) {
                    Scalar best = -1e300;
                    int64_t best_idx = -1;
                    for (int64_t ki = 0; ki < k; ++ki) {
                        int64_t ih = oi * stride - pad + ki;
                        if (ih < 0 || ih >= h) continue;
                        for (int64_t kj = 0; kj < k; ++kj) {
                            int64_t iw = oj * stride - pad + kj;
                            if (iw < 0 || iw >= w) continue;
                            Scalar v = src[ih * w + iw];
                            if (v > best) {
                                best = v;
                                best_idx = ih * w + iw;
                            }
                        }
                    }
                    dst[oi * wo + oj] = best;
                    if (record)
                        saved_argmax_[static_cast<size_t>((ni * c + ci) * ho * wo + oi * wo + oj)] =
                            (ni * c + ci) * h * w + best_idx;
                }
        }
    return out;
}

Tensor MaxPool2d::backward(const Tensor& grad_out) {
    Tensor dx(saved_in_shape_);
    for (int64_t i = 0; i < grad_out.numel(); ++i) dx[saved_argmax_[static_cast<size_t>(i)]] += grad_out[i];
    return dx;
}

void MaxPool2d::account(const std::string& prefix, CostSheet& sheet, Chw& chw) const {
    int64_t ho = (chw[1] + 2 * pad - k) / stride + 1;
    int64_t wo = (chw[2] + 2 * pad - k) / stride + 1;
    sheet.add(prefix, 0, chw[0] * ho * wo * k * k);
    chw = {chw[0], ho, wo};
}

// ---------------------------------------------------------------------------
// GlobalAvgPool

Tensor GlobalAvgPool::forward(const Tensor& x, bool /*training*/, bool record) {
    const int64_t n = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
    Tensor out({n, c, 1, 1});
    for (int64_t i = 0; i < n * c; ++i) {
        Scalar s = 0.0;
        const Scalar* src = x.data() + i * hw;
        for (int64_t j = 0; j < hw; ++j) s += src[j];
        out[i] = s / static_cast<Scalar>(hw);
    }
    if (record) saved_in_shape_ = x.shape();
    return out;
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out) {
    Tensor dx(saved_in_shape_);
    const int64_t hw = saved_in_shape_[2] * saved_in_shape_[3];
    const Scalar inv = 1.0 / static_cast<Scalar>(hw);
    for (int64_t i = 0; i < grad_out.numel(); ++i) {
        Scalar g = grad_out[i] * inv;
        Scalar* dst = dx.data() + i * hw;
        for (int64_t j = 0; j < hw; ++j) dst[j] = g;
    }
    return dx;
}

void GlobalAvgPool::account(const std::string& prefix, CostSheet& sheet, Chw& chw) const {
    sheet.add(prefix, 0, chw[0] * chw[1] * chw[2] + chw[0]);
    chw = {chw[0], 1, 1};
}

// ---------------------------------------------------------------------------
// Flatten

Tensor Flatten::forward(const Tensor& x, bool /*training*/, bool record) {
    if (record) saved_in_shape_ = x.shape();
    return x.reshaped({x.size(0), x.numel() / x.size(0)});
}

Tensor Flatten::backward(const Tensor& grad_out) { return grad_out.reshaped(saved_in_shape_); }

void Flatten::account(const std::string&, CostSheet&, Chw& chw) const { chw = {chw[0] * chw[1] * chw[2], 1, 1}; }

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(int64_t in_f, int64_t out_f, bool bias) : in_f(in_f), out_f(out_f), has_bias(bias) {
    weight.value = Tensor({out_f, in_f});
    if (has_bias) bias_p.value = Tensor({out_f});
}

void Linear::init(Rng& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(in_f));
    uniform_init(weight.value, bound, rng);
    if (has_bias) uniform_init(bias_p.value, bound, rng);
}

Tensor Linear::forward(const Tensor& x, bool /*training*/, bool record) {
    if (x.dim() != 2 || x.size(1) != in_f) throw std::invalid_argument("linear: shape mismatch");
    const int64_t n = x.size(0);
    Tensor out({n, out_f});
    gemm(false, true, n, out_f, in_f, 1.0, x.data(), in_f, weight.value.data(), in_f, 0.0, out.data(), out_f);
    if (has_bias)
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < out_f; ++j) out(i, j) += bias_p.value[j];
    if (record) saved_input_ = x;
    return out;
}

Tensor Linear::backward(const Tensor& grad_out) {
    const Tensor& x = saved_input_;
    const int64_t n = x.size(0);
    weight.ensure_grad();
    if (has_bias) bias_p.ensure_grad();

    gemm(true, false, out_f, in_f, n, 1.0, grad_out.data(), out_f, x.data(), in_f, 1.0, weight.grad.data(), in_f);
    if (has_bias)
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < out_f; ++j) bias_p.grad[j] += grad_out(i, j);

    Tensor dx({n, in_f});
    gemm(false, false, n, in_f, out_f, 1.0, grad_out.data(), out_f, weight.value.data(), in_f, 0.0, dx.data(), in_f);
    return dx;
}

void Linear::collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".weight", &weight});
    if (has_bias) out.push_back({prefix + ".bias", &bias_p});
}

void Linear::collect_state(const std::string& prefix, std::vector<NamedTensor>& out) {
    out.push_back({prefix + ".weight", &weight.value});
    if (has_bias) out.push_back({prefix + ".bias", &bias_p.value});
}

void Linear::account(const std::string& prefix, CostSheet& sheet, Chw& chw) const {
    int64_t params = weight.value.numel() + (has_bias ? out_f : 0);
    int64_t flops = 2 * in_f * out_f + (has_bias ? out_f : 0);
    sheet.add(prefix, params, flops);
    chw = {out_f, 1, 1};
}

// ---------------------------------------------------------------------------
// ChannelShuffle

Tensor ChannelShuffle::forward(const Tensor& x, bool /*training*/, bool record) {
    if (record) saved_channels_ = x.size(1);
    return channel_shuffle(x, groups);
}

Tensor ChannelShuffle::backward(const Tensor& grad_out) {
    // the inverse of shuffle(g) is shuffle(C/g)
    return channel_shuffle(grad_out, saved_channels_ / groups);
}

void ChannelShuffle::account(const std::string&, CostSheet&, Chw&) const {}

// ---------------------------------------------------------------------------
// Sequential

Tensor Sequential::forward(const Tensor& x, bool training, bool record) {
    Tensor cur = x;
    for (auto& child : children_) cur = child->forward(cur, training, record);
    return cur;
}

Tensor Sequential::backward(const Tensor& grad_out) {
    Tensor cur = grad_out;
    for (auto it = children_.rbegin(); it != children_.rend(); ++it) cur = (*it)->backward(cur);
    return cur;
}

void Sequential::collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
    for (size_t i = 0; i < children_.size(); ++i) children_[i]->collect_params(prefix + "." + std::to_string(i), out);
}

void Sequential::collect_state(const std::string& prefix, std::vector<NamedTensor>& out) {
    for (size_t i = 0; i < children_.size(); ++i) children_[i]->collect_state(prefix + "." + std::to_string(i), out);
}

void Sequential::account(const std::string& prefix, CostSheet& sheet, Chw& chw) const {
    for (size_t i = 0; i < children_.size(); ++i) children_[i]->account(prefix + "." + std::to_string(i), sheet, chw);
}

// ---------------------------------------------------------------------------
// Residual

Tensor Residual::forward(const Tensor& x, bool training, bool record) {
    Tensor main_out = main_->forward(x, training, record);
    Tensor short_out = shortcut_ ? shortcut_->forward(x, training, record) : x;
    main_out.add_(short_out);
    return relu_.forward(main_out, training, record);
}

Tensor Residual::backward(const Tensor& grad_out) {
    Tensor g = relu_.backward(grad_out);
    Tensor dx = main_->backward(g);
    if (shortcut_) {
        dx.add_(shortcut_->backward(g));
    } else {
        dx.add_(g);
    }
    return dx;
}

void Residual::collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
    main_->collect_params(prefix + ".main", out);
    if (shortcut_) shortcut_->collect_params(prefix + ".shortcut", out);
}

void Residual::collect_state(const std::string& prefix, std::vector<NamedTensor>& out) {
    main_->collect_state(prefix + ".main", out);
    if (shortcut_) shortcut_->collect_state(prefix + ".shortcut", out);
}

void Residual::account(const std::string& prefix, CostSheet& sheet, Chw& chw) const {
    Chw main_chw = chw;
    main_->account(prefix + ".main", sheet, main_chw);
    if (shortcut_) {
        Chw short_chw = chw;
        shortcut_->account(prefix + ".shortcut", sheet, short_chw);
    }
    // add + relu
    sheet.add(prefix + ".add", 0, 2 * main_chw[0] * main_chw[1] * main_chw[2]);
    chw = main_chw;
}

// ---------------------------------------------------------------------------
// ShuffleUnit

Tensor ShuffleUnit::forward(const Tensor& x, bool training, bool record) {
    Tensor merged;
    if (stride_ == 1) {
        auto [x1, x2] = split_channels(x, split_);
        Tensor b2 = branch2_->forward(x2, training, record);
        merged = concat_channels(x1, b2);
    } else {
        Tensor b1 = branch1_->forward(x, training, record);
        Tensor b2 = branch2_->forward(x, training, record);
        merged = concat_channels(b1, b2);
    }
    return channel_shuffle(merged, 2);
}

Tensor ShuffleUnit::backward(const Tensor& grad_out) {
    const int64_t c = grad_out.size(1);
    Tensor g = channel_shuffle(grad_out, c / 2);  // inverse of shuffle(2)
    if (stride_ == 1) {
        auto [g1, g2] = split_channels(g, split_);
        Tensor dx2 = branch2_->backward(g2);
        return concat_channels(g1, dx2);
    }
    auto [g1, g2] = split_channels(g, c / 2);
    Tensor dx = branch1_->backward(g1);
    dx.add_(branch2_->backward(g2));
    return dx;
}

void ShuffleUnit::collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
    if (branch1_) branch1_->collect_params(prefix + ".branch1", out);
    branch2_->collect_params(prefix + ".branch2", out);
}

void ShuffleUnit::collect_state(const std::string& prefix, std::vector<NamedTensor>& out) {
    if (branch1_) branch1_->collect_state(prefix + ".branch1", out);
    branch2_->collect_state(prefix + ".branch2", out);
}

void ShuffleUnit::account(const std::string& prefix, CostSheet& sheet, Chw& chw) const {
    if (stride_ == 1) {
        Chw b2 = {chw[0] - split_, chw[1], chw[2]};
        branch2_->account(prefix + ".branch2", sheet, b2);
        chw = {split_ + b2[0], b2[1], b2[2]};
    } else {
        Chw b1 = chw, b2 = chw;
        branch1_->account(prefix + ".branch1", sheet, b1);
        branch2_->account(prefix + ".branch2", sheet, b2);
        chw = {b1[0] + b2[0], b1[1], b1[2]};
    }
}

// ---------------------------------------------------------------------------
// SGD

void SGD::zero_grad() {
    for (auto& np : params_) np.param->zero_grad();
}

void SGD::step(double lr) {
    if (momentum_bufs_.empty()) momentum_bufs_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        Parameter& p = *params_[i].param;
        if (p.grad.numel() == 0) continue;  // never touched by backward
        Tensor& buf = momentum_bufs_[i];
        if (buf.numel() != p.value.numel()) buf = Tensor::zeros(p.value.shape());
        for (int64_t j = 0; j < p.value.numel(); ++j) {
            Scalar g = p.grad[j] + weight_decay_ * p.value[j];
            buf[j] = momentum_ * buf[j] + g;
            p.value[j] -= lr * buf[j];
        }
    }
    ++steps_;
}

}  // namespace pixd::nn
