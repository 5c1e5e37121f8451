#pragma once

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace pixd {

using Scalar = double;
using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + ")";
}

/// Dense row-major tensor. NCHW for feature maps, (rows, cols) for matrices.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}
    Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
    Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
            throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, Scalar v) { return Tensor(std::move(shape), v); }

    bool defined() const { return !shape_.empty() || !data_.empty(); }
    const Shape& shape() const { return shape_; }
    int64_t dim() const { return static_cast<int64_t>(shape_.size()); }
    int64_t size(int64_t i) const { return shape_.at(static_cast<size_t>(i)); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }
    std::vector<Scalar>& vec() { return data_; }
    const std::vector<Scalar>& vec() const { return data_; }

    Scalar& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    Scalar operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    Scalar& operator()(int64_t i, int64_t j) {
        assert(dim() == 2);
        return data_[static_cast<size_t>(i * shape_[1] + j)];
    }
    Scalar operator()(int64_t i, int64_t j) const {
        assert(dim() == 2);
        return data_[static_cast<size_t>(i * shape_[1] + j)];
    }
    Scalar& operator()(int64_t n, int64_t c, int64_t h, int64_t w) {
        assert(dim() == 4);
        return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    Scalar operator()(int64_t n, int64_t c, int64_t h, int64_t w) const {
        assert(dim() == 4);
        return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }

    Tensor reshaped(Shape new_shape) const {
        if (shape_numel(new_shape) != numel())
            throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape));
        Tensor t;
        t.shape_ = std::move(new_shape);
        t.data_ = data_;
        return t;
    }

    void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

    void add_(const Tensor& other, Scalar scale = 1.0) {
        if (other.numel() != numel())
            throw std::invalid_argument("add_: size mismatch " + shape_str(shape_) + " vs " + shape_str(other.shape_));
        const Scalar* o = other.data();
        for (int64_t i = 0; i < numel(); ++i) data_[static_cast<size_t>(i)] += scale * o[i];
    }

    void scale_(Scalar s) {
        for (auto& v : data_) v *= s;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

private:
    Shape shape_;
    std::vector<Scalar> data_;
};

/// Ordered per-stage feature maps from one forward pass (M entries).
struct FeatureSet {
    std::vector<Tensor> maps;

    int64_t stages() const { return static_cast<int64_t>(maps.size()); }
    std::vector<int64_t> element_counts() const {
        std::vector<int64_t> n;
        n.reserve(maps.size());
        for (const auto& m : maps) n.push_back(m.numel());
        return n;
    }
};

inline bool all_finite(const Tensor& t) {
    for (int64_t i = 0; i < t.numel(); ++i)
        if (!std::isfinite(t[i])) return false;
    return true;
}

}  // namespace pixd
