#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "guidpaint/tensor.hpp"

namespace guidpaint {

/// Binary mask, 1 = known pixel, 0 = unknown. Stored single-channel or with
/// the image's channel count; broadcast() expands to an image shape.
class Mask {
public:
    Mask() = default;
    explicit Mask(Tensor values);

    static Mask ones(Shape shape) { return Mask(Tensor(shape, 1.0)); }
    static Mask zeros(Shape shape) { return Mask(Tensor(shape, 0.0)); }

    const Tensor& values() const { return values_; }
    const Shape& shape() const { return values_.shape(); }
    std::size_t known_count() const;

    bool compatible_with(const Shape& image) const;
    Tensor broadcast(const Shape& image) const;
    /// 1 - M
    Mask inverted() const;

private:
    Tensor values_;
};

enum class MaskKind { Expand, Half, Square };

MaskKind parse_mask_kind(std::string_view name);
const char* to_string(MaskKind kind);

/// Expand keeps the central H/2 × W/2 block, Half keeps the left W/2 columns,
/// Square hides the central H/2 × W/2 block.
Mask make_benchmark_mask(MaskKind kind, int height, int width);

struct ToyDataset {
    std::vector<Tensor> images;
    std::vector<int> labels;  // 0 = disc, 1 = cross
    std::uint64_t seed = 0;
    int size = 0;

    std::uint64_t checksum() const;
    nlohmann::json manifest() const;
};

inline constexpr int kDiscLabel = 0;
inline constexpr int kCrossLabel = 1;
const char* toy_label_name(int label);

/// Seeded grayscale discs and crosses in [-1, 1], alternating classes.
ToyDataset make_toy_dataset(int n, int size, std::uint64_t seed);

// 8-bit conversion: v8 = round((v + 1) * 127.5)
std::uint8_t to_byte(double v);
double from_byte(std::uint8_t v);
/// Snap values onto the 8-bit grid so in-memory data matches what a file holds.
Tensor quantize(const Tensor& image);

std::vector<std::uint8_t> encode_png(const Tensor& image);
Tensor decode_png(const std::vector<std::uint8_t>& bytes);

/// PNG (8-bit gray or RGB) or portable graymap chosen by extension (.pgm).
Tensor load_image(const std::filesystem::path& path);
void save_image(const Tensor& image, const std::filesystem::path& path);

/// Mask files: 255 = known, 0 = unknown.
Mask load_mask(const std::filesystem::path& path);
Mask decode_mask_png(const std::vector<std::uint8_t>& bytes);
void save_mask(const Mask& mask, const std::filesystem::path& path);
Tensor mask_to_image(const Mask& mask);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace guidpaint
