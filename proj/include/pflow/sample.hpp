#pragma once

#include <cstddef>
#include <optional>
#include <vector>

namespace pflow {

// Channels-first image layout: value index = (c * height + y) * width + x.
struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return channels * height * width; }
  bool operator==(const ImageShape&) const = default;
};

struct Sample {
  std::vector<double> values;
  std::optional<ImageShape> shape;  // Set for image-shaped samples.
};

}  // namespace pflow
