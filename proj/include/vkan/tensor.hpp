#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace vkan {

enum class DType : std::uint8_t { F32 = 0, F64 = 1, U8 = 2, I64 = 3 };

const char* dtype_name(DType dt);
std::size_t dtype_size(DType dt);

/// Dense row-major n-dimensional array. Rank-0 scalars use an empty shape
/// and hold exactly one element. Every dimension must be >= 1.
class Tensor {
public:
    Tensor();  // f32 rank-0 zero
    Tensor(DType dtype, std::vector<std::int64_t> shape);  // zero-filled

    static Tensor zeros(DType dtype, std::vector<std::int64_t> shape);
    static Tensor full(DType dtype, std::vector<std::int64_t> shape, double value);
    static Tensor scalar(DType dtype, double value);
    static Tensor from_f32(std::vector<float> data, std::vector<std::int64_t> shape);
    static Tensor from_f64(std::vector<double> data, std::vector<std::int64_t> shape);
    static Tensor from_u8(std::vector<std::uint8_t> data, std::vector<std::int64_t> shape);
    static Tensor from_i64(std::vector<std::int64_t> data, std::vector<std::int64_t> shape);

    DType dtype() const { return dtype_; }
    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::int64_t dim(std::size_t i) const;
    std::int64_t numel() const { return numel_; }

    template <typename T>
    std::span<T> data();
    template <typename T>
    std::span<const T> data() const;

    const void* raw_data() const;
    void* raw_data();
    std::size_t byte_size() const { return static_cast<std::size_t>(numel_) * dtype_size(dtype_); }

    /// Element read converted to double (slow path; tests and diagnostics).
    double scalar_at(std::int64_t flat_index) const;
    double scalar() const;  // requires numel() == 1

    Tensor astype(DType dt) const;
    Tensor reshaped(std::vector<std::int64_t> new_shape) const;  // same numel, copies metadata only

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    using Storage = std::variant<std::vector<float>, std::vector<double>,
                                 std::vector<std::uint8_t>, std::vector<std::int64_t>>;

private:
    void validate_shape() const;

    DType dtype_;
    std::vector<std::int64_t> shape_;
    std::int64_t numel_ = 1;
    Storage data_;
};

std::int64_t shape_numel(const std::vector<std::int64_t>& shape);
std::string shape_str(const std::vector<std::int64_t>& shape);

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::F32; }
template <>
constexpr DType dtype_of<double>() { return DType::F64; }
template <>
constexpr DType dtype_of<std::uint8_t>() { return DType::U8; }
template <>
constexpr DType dtype_of<std::int64_t>() { return DType::I64; }

template <typename T>
std::span<T> Tensor::data() {
    return std::span<T>(std::get<std::vector<T>>(data_));
}

template <typename T>
std::span<const T> Tensor::data() const {
    return std::span<const T>(std::get<std::vector<T>>(data_));
}

/// Calls f with a value of the tensor's float scalar type (float or double).
/// Throws for integer dtypes.
template <typename F>
decltype(auto) dispatch_float(DType dt, F&& f) {
    switch (dt) {
        case DType::F32: return f(float{});
        case DType::F64: return f(double{});
        default: break;
    }
    throw std::invalid_argument(std::string("expected a float tensor, got ") + dtype_name(dt));
}

}  // namespace vkan
