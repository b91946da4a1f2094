#pragma once

#include "spurgen/autograd.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace spurgen {

/// RGB image with values in [0,1], stored channel-planar as {3, H, W}.
class ImageTensor {
public:
    ImageTensor() = default;
    /// Validates shape, finiteness and range.
    explicit ImageTensor(ag::Tensor pixels);

    static ImageTensor filled(int height, int width, double r, double g, double b);

    int height() const { return pixels_.dim(1); }
    int width() const { return pixels_.dim(2); }
    double at(int c, int y, int x) const { return pixels_[(static_cast<std::size_t>(c) * height() + y) * width() + x]; }

    const ag::Tensor& tensor() const { return pixels_; }
    ag::Var var() const { return ag::constant(pixels_); }

    /// Snaps every value to the nearest of the 256 levels k/255.
    ImageTensor quantized() const;

    bool operator==(const ImageTensor& other) const { return pixels_.data() == other.pixels_.data() && pixels_.shape() == other.pixels_.shape(); }

private:
    ag::Tensor pixels_;
};

/// Latent code {c, h, w}; finite values, no range constraint.
class LatentTensor {
public:
    LatentTensor() = default;
    explicit LatentTensor(ag::Tensor values);

    const ag::Tensor& tensor() const { return values_; }
    ag::Tensor& tensor() { return values_; }
    const ag::Shape& shape() const { return values_.shape(); }
    ag::Var var() const { return ag::constant(values_); }

private:
    ag::Tensor values_;
};

/// Clamps to [0,1] then quantizes to 8-bit levels. Used for every image that
/// leaves a model so that raster round-trips are exact.
ImageTensor to_image(const ag::Tensor& chw);

// Binary PPM (P6, maxval 255).
void write_ppm(const std::filesystem::path& path, const ImageTensor& image);
ImageTensor read_ppm(const std::filesystem::path& path);

/// Tiles images row-major into one sheet with a 1-pixel white gutter.
ImageTensor contact_sheet(std::span<const ImageTensor> images, int columns);

}  // namespace spurgen
