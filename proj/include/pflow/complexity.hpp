#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pflow/autodiff.hpp"
#include "pflow/sample.hpp"

namespace pflow {

// 8-bit image, channels interleaved (PNG order).
struct QuantizedImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;  // 1 (grayscale) or 3 (RGB)
  std::vector<std::uint8_t> pixels;

  bool operator==(const QuantizedImage&) const = default;
};

// [-1, 1] -> {0..255} via (x + 1) / 2 * 255, rounded half to even and
// clamped.
QuantizedImage quantize(std::span<const double> values, const ImageShape& shape);

struct PngOptions {
  int deflate_level = 9;
  // Per-row filter choice: adaptive picks the filter with the smallest sum
  // of absolute (signed) residuals; otherwise the given fixed type 0..4.
  bool adaptive_filter = true;
  int fixed_filter = 0;
};

std::vector<std::uint8_t> encode_png(const QuantizedImage& img, const PngOptions& opts = {});
// Accepts 8-bit grayscale/RGB, non-interlaced. Throws std::runtime_error on
// anything else or on corrupt data.
QuantizedImage decode_png(std::span<const std::uint8_t> bytes);

// size(PNG(x)) / D. Throws std::invalid_argument for samples without an
// image shape.
double complexity_png(const Sample& x, const PngOptions& opts = {});

// Orthonormal 2-D DCT-II applied to every channel; same layout as the input.
std::vector<double> dct2(std::span<const double> values, const ImageShape& shape);
ad::Var dct2(const ad::Var& x, const ImageShape& shape);

// Squared norm of the DCT coefficients with both frequency indices in the
// upper half, summed over channels. Height and width must be even.
double hf_energy(std::span<const double> values, const ImageShape& shape);
ad::Var hf_energy(const ad::Var& x, const ImageShape& shape);

// Separable Gaussian blur with 2 * (kernel_size / 2) + 1 taps and
// sigma = kernel_size / 4, half-sample symmetric boundary extension.
std::vector<double> gaussian_filter2d(std::span<const double> values, const ImageShape& shape,
                                      std::size_t kernel_size);

}  // namespace pflow
