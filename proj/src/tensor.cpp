#include "vkan/tensor.hpp"

#include <numeric>
#include <sstream>
#include <stdexcept>

namespace vkan {

const char* dtype_name(DType dt) {
    switch (dt) {
        case DType::F32: return "f32";
        case DType::F64: return "f64";
        case DType::U8: return "u8";
        case DType::I64: return "i64";
    }
    return "?";
}

std::size_t dtype_size(DType dt) {
    switch (dt) {
        case DType::F32: return 4;
        case DType::F64: return 8;
        case DType::U8: return 1;
        case DType::I64: return 8;
    }
    return 0;
}

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                           std::multiplies<std::int64_t>());
}

std::string shape_str(const std::vector<std::int64_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

Tensor::Storage make_storage(DType dt, std::int64_t n) {
    switch (dt) {
        case DType::F32: return std::vector<float>(static_cast<std::size_t>(n), 0.0f);
        case DType::F64: return std::vector<double>(static_cast<std::size_t>(n), 0.0);
        case DType::U8: return std::vector<std::uint8_t>(static_cast<std::size_t>(n), 0);
        case DType::I64: return std::vector<std::int64_t>(static_cast<std::size_t>(n), 0);
    }
    throw std::invalid_argument("unknown dtype");
}

}  // namespace

Tensor::Tensor() : dtype_(DType::F32), shape_{}, numel_(1), data_(std::vector<float>(1, 0.0f)) {}

Tensor::Tensor(DType dtype, std::vector<std::int64_t> shape)
    : dtype_(dtype), shape_(std::move(shape)), numel_(shape_numel(shape_)),
      data_(make_storage(dtype, shape_numel(shape_))) {
    validate_shape();
}

void Tensor::validate_shape() const {
    for (auto d : shape_) {
        if (d < 1) {
            throw std::invalid_argument("tensor dimensions must be >= 1, got shape " +
                                        shape_str(shape_));
        }
    }
}

Tensor Tensor::zeros(DType dtype, std::vector<std::int64_t> shape) {
    return Tensor(dtype, std::move(shape));
}

Tensor Tensor::full(DType dtype, std::vector<std::int64_t> shape, double value) {
    Tensor t(dtype, std::move(shape));
    const auto n = static_cast<std::size_t>(t.numel_);
    switch (dtype) {
        case DType::F32: std::get<std::vector<float>>(t.data_).assign(n, static_cast<float>(value)); break;
        case DType::F64: std::get<std::vector<double>>(t.data_).assign(n, value); break;
        case DType::U8: std::get<std::vector<std::uint8_t>>(t.data_).assign(n, static_cast<std::uint8_t>(value)); break;
        case DType::I64: std::get<std::vector<std::int64_t>>(t.data_).assign(n, static_cast<std::int64_t>(value)); break;
    }
    return t;
}

Tensor Tensor::scalar(DType dtype, double value) { return full(dtype, {}, value); }

Tensor Tensor::from_f32(std::vector<float> data, std::vector<std::int64_t> shape) {
    Tensor t;
    t.dtype_ = DType::F32;
    t.shape_ = std::move(shape);
    t.numel_ = shape_numel(t.shape_);
    t.validate_shape();
    if (static_cast<std::int64_t>(data.size()) != t.numel_) {
        throw std::invalid_argument("data size does not match shape " + shape_str(t.shape_));
    }
    t.data_ = std::move(data);
    return t;
}

Tensor Tensor::from_f64(std::vector<double> data, std::vector<std::int64_t> shape) {
    Tensor t;
    t.dtype_ = DType::F64;
    t.shape_ = std::move(shape);
    t.numel_ = shape_numel(t.shape_);
    t.validate_shape();
    if (static_cast<std::int64_t>(data.size()) != t.numel_) {
        throw std::invalid_argument("data size does not match shape " + shape_str(t.shape_));
    }
    t.data_ = std::move(data);
    return t;
}

Tensor Tensor::from_u8(std::vector<std::uint8_t> data, std::vector<std::int64_t> shape) {
    Tensor t;
    t.dtype_ = DType::U8;
    t.shape_ = std::move(shape);
    t.numel_ = shape_numel(t.shape_);
    t.validate_shape();
    if (static_cast<std::int64_t>(data.size()) != t.numel_) {
        throw std::invalid_argument("data size does not match shape " + shape_str(t.shape_));
    }
    t.data_ = std::move(data);
    return t;
}

Tensor Tensor::from_i64(std::vector<std::int64_t> data, std::vector<std::int64_t> shape) {
    Tensor t;
    t.dtype_ = DType::I64;
    t.shape_ = std::move(shape);
    t.numel_ = shape_numel(t.shape_);
    t.validate_shape();
    if (static_cast<std::int64_t>(data.size()) != t.numel_) {
        throw std::invalid_argument("data size does not match shape " + shape_str(t.shape_));
    }
    t.data_ = std::move(data);
    return t;
}

std::int64_t Tensor::dim(std::size_t i) const {
    if (i >= shape_.size()) {
        throw std::out_of_range("dim index " + std::to_string(i) + " out of range for shape " +
                                shape_str(shape_));
    }
    return shape_[i];
}

const void* Tensor::raw_data() const {
    return std::visit([](const auto& v) -> const void* { return v.data(); }, data_);
}

void* Tensor::raw_data() {
    return std::visit([](auto& v) -> void* { return v.data(); }, data_);
}

double Tensor::scalar_at(std::int64_t i) const {
    if (i < 0 || i >= numel_) {
        throw std::out_of_range("flat index out of range");
    }
    const auto idx = static_cast<std::size_t>(i);
    return std::visit([idx](const auto& v) -> double { return static_cast<double>(v[idx]); }, data_);
}

double Tensor::scalar() const {
    if (numel_ != 1) {
        throw std::invalid_argument("scalar() requires a single-element tensor, got shape " +
                                    shape_str(shape_));
    }
    return scalar_at(0);
}

Tensor Tensor::astype(DType dt) const {
    if (dt == dtype_) return *this;
    Tensor out(dt, shape_);
    for (std::int64_t i = 0; i < numel_; ++i) {
        const double v = scalar_at(i);
        const auto idx = static_cast<std::size_t>(i);
        switch (dt) {
            case DType::F32: out.data<float>()[idx] = static_cast<float>(v); break;
            case DType::F64: out.data<double>()[idx] = v; break;
            case DType::U8: out.data<std::uint8_t>()[idx] = static_cast<std::uint8_t>(v); break;
            case DType::I64: out.data<std::int64_t>()[idx] = static_cast<std::int64_t>(v); break;
        }
    }
    return out;
}

Tensor Tensor::reshaped(std::vector<std::int64_t> new_shape) const {
    if (shape_numel(new_shape) != numel_) {
        throw std::invalid_argument("reshape from " + shape_str(shape_) + " to " +
                                    shape_str(new_shape) + " changes element count");
    }
    Tensor t = *this;
    t.shape_ = std::move(new_shape);
    t.validate_shape();
    return t;
}

}  // namespace vkan
