#include "guidpaint/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "guidpaint/error.hpp"

namespace guidpaint {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Validation: return "validation";
        case ErrorKind::NotFound: return "not_found";
        case ErrorKind::Conflict: return "conflict";
        case ErrorKind::TooLarge: return "too_large";
        case ErrorKind::Unsupported: return "unsupported";
        case ErrorKind::Runtime: return "runtime";
    }
    return "unknown";
}

std::string to_string(const Shape& s) {
    return std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" + std::to_string(s.width);
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape), data_(shape.numel(), fill) {
    require(shape.channels > 0 && shape.height > 0 && shape.width > 0, "tensor dimensions must be positive");
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(shape), data_(std::move(values)) {
    require(shape.channels > 0 && shape.height > 0 && shape.width > 0, "tensor dimensions must be positive");
    require(data_.size() == shape.numel(), "tensor value count does not match shape " + to_string(shape));
}

Tensor Tensor::vector(std::vector<double> values) {
    const int n = static_cast<int>(values.size());
    return Tensor(Shape{1, 1, n}, std::move(values));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        fail(ErrorKind::Validation,
             std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
}

Tensor& Tensor::operator+=(const Tensor& o) {
    check_same_shape(*this, o, "add");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& o) {
    check_same_shape(*this, o, "subtract");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
}

Tensor& Tensor::axpy(double s, const Tensor& o) {
    check_same_shape(*this, o, "axpy");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
    return *this;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, double s) { return a *= s; }
Tensor operator*(double s, Tensor a) { return a *= s; }

Tensor hadamard(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "hadamard");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

Tensor clamp(Tensor a, double lo, double hi) {
    for (double& v : a.values()) v = std::clamp(v, lo, hi);
    return a;
}

double dot(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double squared_norm(const Tensor& a) { return dot(a, a); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

bool all_finite(const Tensor& a) {
    return std::all_of(a.values().begin(), a.values().end(), [](double v) { return std::isfinite(v); });
}

std::uint64_t checksum(std::span<const double> values) {
    std::uint64_t h = 1469598103934665603ULL;
    for (double v : values) {
        unsigned char bytes[sizeof(double)];
        std::memcpy(bytes, &v, sizeof(double));
        for (unsigned char b : bytes) {
            h ^= b;
            h *= 1099511628211ULL;
        }
    }
    return h;
}

}  // namespace guidpaint
