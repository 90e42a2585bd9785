#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mocl {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of doubles. Value type; copies are deep.
class Tensor {
 public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
    static Tensor vector(std::initializer_list<double> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const;

    /// Rows/cols of a rank-2 tensor.
    std::size_t rows() const { return dim(0); }
    std::size_t cols() const { return dim(1); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    double item() const;

    /// Same data, different shape of equal size.
    Tensor reshaped(Shape shape) const;

    bool all_finite() const;

    /// 64-bit FNV-1a over shape and raw value bytes.
    std::uint64_t hash() const;

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

 private:
    Shape shape_;
    std::vector<double> data_;
};

std::string hash_hex(std::uint64_t h);

/// Incremental FNV-1a, used to fold several tensors into one content hash.
class ContentHasher {
 public:
    void update(const void* bytes, std::size_t n);
    void update(const Tensor& t);
    void update(std::uint64_t v) { update(&v, sizeof v); }
    std::uint64_t digest() const noexcept { return state_; }

 private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

}  // namespace mocl
