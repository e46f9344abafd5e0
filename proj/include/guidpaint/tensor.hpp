#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace guidpaint {

struct Shape {
    int channels = 1;
    int height = 1;
    int width = 1;

    std::size_t numel() const {
        return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
               static_cast<std::size_t>(width);
    }
    std::size_t plane() const { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }

    bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& s);

/// Dense C×H×W array of doubles. Used for images, noise, gradients and
/// low-dimensional points alike (a 2-D point is a 1×1×2 tensor).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor vector(std::vector<double> values);

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(int c, int y, int x) { return data_[index(c, y, x)]; }
    double at(int c, int y, int x) const { return data_[index(c, y, x)]; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    Tensor& operator+=(const Tensor& o);
    Tensor& operator-=(const Tensor& o);
    Tensor& operator*=(double s);
    /// this += s * o
    Tensor& axpy(double s, const Tensor& o);

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    std::size_t index(int c, int y, int x) const {
        return (static_cast<std::size_t>(c) * static_cast<std::size_t>(shape_.height) + static_cast<std::size_t>(y)) *
                   static_cast<std::size_t>(shape_.width) +
               static_cast<std::size_t>(x);
    }

    Shape shape_{0, 0, 0};
    std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double s);
Tensor operator*(double s, Tensor a);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor clamp(Tensor a, double lo, double hi);

double dot(const Tensor& a, const Tensor& b);
double squared_norm(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& a);

void check_same_shape(const Tensor& a, const Tensor& b, const char* what);

/// FNV-1a over the raw bytes of the values; used for bitwise-identity checks.
std::uint64_t checksum(std::span<const double> values);
inline std::uint64_t checksum(const Tensor& t) { return checksum(t.values()); }

}  // namespace guidpaint
