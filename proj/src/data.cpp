#include "guidpaint/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include "guidpaint/error.hpp"

namespace guidpaint {

// ---------------------------------------------------------------------------
// Mask

Mask::Mask(Tensor values) : values_(std::move(values)) {
    for (double v : values_.values()) require(v == 0.0 || v == 1.0, "mask values must be 0 or 1");
}

std::size_t Mask::known_count() const {
    return static_cast<std::size_t>(std::count(values_.values().begin(), values_.values().end(), 1.0));
}

bool Mask::compatible_with(const Shape& image) const {
    const auto& s = values_.shape();
    return s.height == image.height && s.width == image.width &&
           (s.channels == 1 || s.channels == image.channels);
}

Tensor Mask::broadcast(const Shape& image) const {
    if (!compatible_with(image)) {
        fail(ErrorKind::Validation,
             "mask shape " + to_string(values_.shape()) + " does not broadcast to image shape " + to_string(image));
    }
    if (values_.shape() == image) return values_;
    Tensor out(image);
    for (int c = 0; c < image.channels; ++c) {
        for (int y = 0; y < image.height; ++y) {
            for (int x = 0; x < image.width; ++x) out.at(c, y, x) = values_.at(0, y, x);
        }
    }
    return out;
}

Mask Mask::inverted() const {
    Tensor inv(values_.shape());
    for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = 1.0 - values_[i];
    return Mask(std::move(inv));
}

MaskKind parse_mask_kind(std::string_view name) {
    if (name == "expand") return MaskKind::Expand;
    if (name == "half") return MaskKind::Half;
    if (name == "square") return MaskKind::Square;
    fail(ErrorKind::Validation, "unknown mask kind '" + std::string(name) + "' (expected expand, half or square)");
}

const char* to_string(MaskKind kind) {
    switch (kind) {
        case MaskKind::Expand: return "expand";
        case MaskKind::Half: return "half";
        case MaskKind::Square: return "square";
    }
    return "?";
}

Mask make_benchmark_mask(MaskKind kind, int height, int width) {
    require(height > 0 && width > 0, "mask dimensions must be positive");
    require(height % 2 == 0 && width % 2 == 0, "benchmark masks need even dimensions");
    Tensor m(Shape{1, height, width});
    const int y0 = height / 4;
    const int x0 = width / 4;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const bool centre = y >= y0 && y < y0 + height / 2 && x >= x0 && x < x0 + width / 2;
            bool known = false;
            switch (kind) {
                case MaskKind::Expand: known = centre; break;
                case MaskKind::Half: known = x < width / 2; break;
                case MaskKind::Square: known = !centre; break;
            }
            m.at(0, y, x) = known ? 1.0 : 0.0;
        }
    }
    return Mask(std::move(m));
}

// ---------------------------------------------------------------------------
// Toy dataset

const char* toy_label_name(int label) {
    switch (label) {
        case kDiscLabel: return "disc";
        case kCrossLabel: return "cross";
        default: return "unknown";
    }
}

namespace {

// 4x4 supersampled coverage mapped to [-1, 1].
template <typename Inside>
Tensor rasterize(int size, Inside inside) {
    Tensor img(Shape{1, size, size});
    constexpr int kSub = 4;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            int hits = 0;
            for (int sy = 0; sy < kSub; ++sy) {
                for (int sx = 0; sx < kSub; ++sx) {
                    const double px = x + (sx + 0.5) / kSub;
                    const double py = y + (sy + 0.5) / kSub;
                    if (inside(px, py)) ++hits;
                }
            }
            img.at(0, y, x) = 2.0 * hits / (kSub * kSub) - 1.0;
        }
    }
    return quantize(img);
}

}  // namespace

ToyDataset make_toy_dataset(int n, int size, std::uint64_t seed) {
    require(n >= 2, "toy dataset needs at least two images");
    require(size >= 8, "toy images must be at least 8x8");
    ToyDataset ds;
    ds.seed = seed;
    ds.size = size;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double S = size;

    for (int i = 0; i < n; ++i) {
        const int label = i % 2;
        if (label == kDiscLabel) {
            const double r = S * (0.18 + 0.12 * unit(rng));
            const double cx = r + 1.0 + (S - 2.0 * r - 2.0) * unit(rng);
            const double cy = r + 1.0 + (S - 2.0 * r - 2.0) * unit(rng);
            ds.images.push_back(rasterize(size, [=](double px, double py) {
                return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
            }));
        } else {
            const double arm = S * (0.25 + 0.12 * unit(rng));
            const double half_width = S * (0.07 + 0.04 * unit(rng));
            const double cx = arm + 1.0 + (S - 2.0 * arm - 2.0) * unit(rng);
            const double cy = arm + 1.0 + (S - 2.0 * arm - 2.0) * unit(rng);
            ds.images.push_back(rasterize(size, [=](double px, double py) {
                const double dx = std::abs(px - cx);
                const double dy = std::abs(py - cy);
                return (dx <= half_width && dy <= arm) || (dy <= half_width && dx <= arm);
            }));
        }
        ds.labels.push_back(label);
    }
    return ds;
}

std::uint64_t ToyDataset::checksum() const {
    std::vector<double> all;
    for (std::size_t i = 0; i < images.size(); ++i) {
        all.push_back(labels[i]);
        all.insert(all.end(), images[i].values().begin(), images[i].values().end());
    }
    return guidpaint::checksum(all);
}

nlohmann::json ToyDataset::manifest() const {
    nlohmann::json items = nlohmann::json::array();
    for (std::size_t i = 0; i < images.size(); ++i) {
        items.push_back({{"id", i}, {"label", labels[i]}, {"name", toy_label_name(labels[i])}});
    }
    return {{"generator", "toy_shapes"},
            {"seed", seed},
            {"size", size},
            {"count", images.size()},
            {"checksum", std::to_string(checksum())},
            {"items", items}};
}

// ---------------------------------------------------------------------------
// 8-bit conversion and files

std::uint8_t to_byte(double v) {
    const double scaled = std::round((v + 1.0) * 127.5);
    return static_cast<std::uint8_t>(std::clamp(scaled, 0.0, 255.0));
}

double from_byte(std::uint8_t v) { return v / 127.5 - 1.0; }

Tensor quantize(const Tensor& image) {
    Tensor out(image.shape());
    for (std::size_t i = 0; i < image.size(); ++i) out[i] = from_byte(to_byte(image[i]));
    return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::NotFound, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::Runtime, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace {

// Interleaved HWC bytes <-> planar CHW tensor.
Tensor from_interleaved(const std::vector<std::uint8_t>& px, int channels, int height, int width) {
    Tensor out(Shape{channels, height, width});
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            for (int c = 0; c < channels; ++c) {
                out.at(c, y, x) = from_byte(px[(static_cast<std::size_t>(y) * width + x) * channels + c]);
            }
        }
    }
    return out;
}

std::vector<std::uint8_t> to_interleaved(const Tensor& img) {
    const auto& s = img.shape();
    std::vector<std::uint8_t> px(s.numel());
    for (int y = 0; y < s.height; ++y) {
        for (int x = 0; x < s.width; ++x) {
            for (int c = 0; c < s.channels; ++c) {
                px[(static_cast<std::size_t>(y) * s.width + x) * s.channels + c] = to_byte(img.at(c, y, x));
            }
        }
    }
    return px;
}

bool is_pgm(const std::filesystem::path& path) {
    auto ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".pgm";
}

Tensor decode_pgm(const std::vector<std::uint8_t>& bytes) {
    std::string text(bytes.begin(), bytes.end());
    std::istringstream in(text);
    std::string magic;
    in >> magic;
    require(magic == "P2" || magic == "P5", "not a portable graymap");
    auto next_int = [&in]() {
        in >> std::ws;
        while (in.peek() == '#') {
            std::string comment;
            std::getline(in, comment);
            in >> std::ws;
        }
        int v = -1;
        in >> v;
        return v;
    };
    const int width = next_int();
    const int height = next_int();
    const int maxval = next_int();
    require(width > 0 && height > 0, "graymap has invalid dimensions");
    if (maxval != 255) fail(ErrorKind::Validation, "unsupported graymap bit depth (maxval " + std::to_string(maxval) + ")");
    std::vector<std::uint8_t> px(static_cast<std::size_t>(width) * height);
    if (magic == "P2") {
        for (auto& p : px) {
            const int v = next_int();
            require(v >= 0 && v <= 255, "graymap sample out of range");
            p = static_cast<std::uint8_t>(v);
        }
    } else {
        in.get();
        in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
        require(in.gcount() == static_cast<std::streamsize>(px.size()), "truncated graymap");
    }
    return from_interleaved(px, 1, height, width);
}

std::vector<std::uint8_t> encode_pgm(const Tensor& img) {
    require(img.shape().channels == 1, "graymap output needs a single channel");
    std::ostringstream out;
    out << "P2\n" << img.shape().width << ' ' << img.shape().height << "\n255\n";
    const auto px = to_interleaved(img);
    for (int y = 0; y < img.shape().height; ++y) {
        for (int x = 0; x < img.shape().width; ++x) {
            out << static_cast<int>(px[static_cast<std::size_t>(y) * img.shape().width + x])
                << (x + 1 < img.shape().width ? ' ' : '\n');
        }
    }
    const auto s = out.str();
    return {s.begin(), s.end()};
}

}  // namespace

Tensor decode_png(const std::vector<std::uint8_t>& bytes) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
        fail(ErrorKind::Validation, std::string("cannot decode PNG: ") + image.message);
    }
    const auto format = image.format;
    if (format & PNG_FORMAT_FLAG_LINEAR) {
        png_image_free(&image);
        fail(ErrorKind::Validation, "16-bit PNG is not supported; only 8-bit images are accepted");
    }
    if (format & PNG_FORMAT_FLAG_ALPHA) {
        png_image_free(&image);
        fail(ErrorKind::Validation, "PNG images with an alpha channel are not supported");
    }
    const int channels = (format & PNG_FORMAT_FLAG_COLOR) ? 3 : 1;
    image.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, px.data(), 0, nullptr)) {
        fail(ErrorKind::Validation, std::string("cannot decode PNG: ") + image.message);
    }
    return from_interleaved(px, channels, static_cast<int>(image.height), static_cast<int>(image.width));
}

std::vector<std::uint8_t> encode_png(const Tensor& img) {
    const auto& s = img.shape();
    require(s.channels == 1 || s.channels == 3, "PNG output needs 1 or 3 channels");
    const auto px = to_interleaved(img);
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(s.width);
    image.height = static_cast<png_uint_32>(s.height);
    image.format = s.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, px.data(), 0, nullptr)) {
        fail(ErrorKind::Runtime, std::string("PNG encoding failed: ") + image.message);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, px.data(), 0, nullptr)) {
        fail(ErrorKind::Runtime, std::string("PNG encoding failed: ") + image.message);
    }
    out.resize(size);
    return out;
}

Tensor load_image(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return is_pgm(path) ? decode_pgm(bytes) : decode_png(bytes);
}

void save_image(const Tensor& image, const std::filesystem::path& path) {
    write_file(path, is_pgm(path) ? encode_pgm(image) : encode_png(image));
}

namespace {

Mask mask_from_image(const Tensor& img) {
    const auto& s = img.shape();
    Tensor m(Shape{1, s.height, s.width});
    for (int y = 0; y < s.height; ++y) {
        for (int x = 0; x < s.width; ++x) {
            const std::uint8_t v = to_byte(img.at(0, y, x));
            for (int c = 1; c < s.channels; ++c) {
                require(to_byte(img.at(c, y, x)) == v, "mask pixels must be gray");
            }
            if (v != 0 && v != 255) {
                fail(ErrorKind::Validation, "mask pixels must be 0 (unknown) or 255 (known), found " +
                                                std::to_string(static_cast<int>(v)));
            }
            m.at(0, y, x) = v == 255 ? 1.0 : 0.0;
        }
    }
    return Mask(std::move(m));
}

}  // namespace

Tensor mask_to_image(const Mask& mask) {
    Tensor img(mask.shape());
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = mask.values()[i] == 1.0 ? 1.0 : -1.0;
    return img;
}

Mask load_mask(const std::filesystem::path& path) { return mask_from_image(load_image(path)); }

Mask decode_mask_png(const std::vector<std::uint8_t>& bytes) { return mask_from_image(decode_png(bytes)); }

void save_mask(const Mask& mask, const std::filesystem::path& path) { save_image(mask_to_image(mask), path); }

}  // namespace guidpaint
