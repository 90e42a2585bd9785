#include "mocl/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

#include "mocl/error.hpp"

namespace mocl {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    MOCL_EXPECT(!shape_.empty(), "tensor shape must have at least one axis");
    data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    MOCL_EXPECT(!shape_.empty(), "tensor shape must have at least one axis");
    MOCL_EXPECT(data_.size() == shape_size(shape_),
                "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                    shape_str(shape_));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
    return Tensor({rows, cols}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
    MOCL_EXPECT(axis < shape_.size(),
                "axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
    return shape_[axis];
}

double Tensor::item() const {
    MOCL_EXPECT(data_.size() == 1, "item() requires a single-element tensor, got " + shape_str(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    MOCL_EXPECT(shape_size(shape) == data_.size(),
                "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

std::uint64_t Tensor::hash() const {
    ContentHasher h;
    h.update(*this);
    return h.digest();
}

void ContentHasher::update(const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        state_ ^= p[i];
        state_ *= 0x100000001b3ULL;
    }
}

void ContentHasher::update(const Tensor& t) {
    for (std::size_t e : t.shape()) update(static_cast<std::uint64_t>(e));
    update(t.data().data(), t.size() * sizeof(double));
}

std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace mocl
