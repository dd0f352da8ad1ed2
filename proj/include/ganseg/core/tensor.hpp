#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ganseg/core/errors.hpp"

namespace ganseg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

/// Dense row-major tensor. The last axis is the channel axis throughout the
/// library; volumes are (B, H, W, D, C).
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(numel(shape_), fill) {}

    static Tensor from(Shape shape, std::vector<T> data) {
        if (numel(shape) != data.size())
            throw shape_error("Tensor::from: " + to_string(shape) + " does not hold " +
                              std::to_string(data.size()) + " elements");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(data);
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    T min() const { return *std::min_element(data_.begin(), data_.end()); }
    T max() const { return *std::max_element(data_.begin(), data_.end()); }

    T sum() const {
        T acc = T(0);
        for (const T& v : data_) acc += v;
        return acc;
    }

    /// Flat offset of a 5-d index; used by readable test code, hot loops index directly.
    std::size_t offset(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3,
                       std::size_t i4) const {
        return (((i0 * shape_[1] + i1) * shape_[2] + i2) * shape_[3] + i3) * shape_[4] + i4;
    }

    T& at(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3, std::size_t i4) {
        return data_[offset(i0, i1, i2, i3, i4)];
    }
    const T& at(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3,
                std::size_t i4) const {
        return data_[offset(i0, i1, i2, i3, i4)];
    }

    Tensor<T> reshaped(Shape new_shape) const {
        if (numel(new_shape) != size())
            throw shape_error("reshape " + to_string(shape_) + " -> " + to_string(new_shape));
        Tensor<T> out;
        out.shape_ = std::move(new_shape);
        out.data_ = data_;
        return out;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::size_t i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (!a.same_shape(b))
        throw shape_error(std::string(what) + ": shape mismatch " + to_string(a.shape()) +
                          " vs " + to_string(b.shape()));
}

} // namespace ganseg
