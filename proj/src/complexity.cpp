#include "pflow/complexity.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <stdexcept>
#include <string>

namespace pflow {

namespace {

void check_shape(std::span<const double> values, const ImageShape& shape) {
  if (shape.size() == 0 || values.size() != shape.size()) {
    throw std::invalid_argument("values do not match the image shape");
  }
}

}  // namespace

QuantizedImage quantize(std::span<const double> values, const ImageShape& shape) {
  check_shape(values, shape);
  QuantizedImage img{shape.height, shape.width, shape.channels, {}};
  img.pixels.resize(shape.size());
  const std::size_t plane = shape.height * shape.width;
  for (std::size_t c = 0; c < shape.channels; ++c) {
    for (std::size_t p = 0; p < plane; ++p) {
      // nearbyint honours the default round-to-nearest-even mode.
      const double v = std::nearbyint((values[c * plane + p] + 1.0) * 0.5 * 255.0);
      img.pixels[p * shape.channels + c] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  }
  return img;
}

// --- PNG -------------------------------------------------------------------

namespace {

constexpr std::array<std::uint8_t, 8> kSignature = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4], std::span<const std::uint8_t> data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const uLong crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_be32(out, static_cast<std::uint32_t>(crc));
}

std::uint8_t paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<std::uint8_t>(a);
  if (pb <= pc) return static_cast<std::uint8_t>(b);
  return static_cast<std::uint8_t>(c);
}

// Predictor for byte i of a row, given the previous row (zeros for row 0).
std::uint8_t predict(int type, const std::uint8_t* row, const std::uint8_t* prev, std::size_t i,
                     std::size_t bpp) {
  const int a = i >= bpp ? row[i - bpp] : 0;
  const int b = prev[i];
  const int c = i >= bpp ? prev[i - bpp] : 0;
  switch (type) {
    case 1: return static_cast<std::uint8_t>(a);
    case 2: return static_cast<std::uint8_t>(b);
    case 3: return static_cast<std::uint8_t>((a + b) / 2);
    case 4: return paeth(a, b, c);
    default: return 0;
  }
}

}  // namespace

std::vector<std::uint8_t> encode_png(const QuantizedImage& img, const PngOptions& opts) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("PNG needs 1 or 3 channels");
  if (img.height == 0 || img.width == 0) throw std::invalid_argument("PNG image is empty");
  if (img.pixels.size() != img.height * img.width * img.channels) {
    throw std::invalid_argument("pixel buffer does not match image dimensions");
  }
  const std::size_t bpp = img.channels;
  const std::size_t stride = img.width * bpp;
  std::vector<std::uint8_t> raw;
  raw.reserve(img.height * (stride + 1));
  std::vector<std::uint8_t> zeros(stride, 0);
  std::vector<std::uint8_t> best(stride), cand(stride);
  for (std::size_t y = 0; y < img.height; ++y) {
    const std::uint8_t* row = img.pixels.data() + y * stride;
    const std::uint8_t* prev = y == 0 ? zeros.data() : row - stride;
    int chosen = opts.adaptive_filter ? 0 : opts.fixed_filter;
    long best_cost = -1;
    for (int type = 0; type < 5; ++type) {
      if (!opts.adaptive_filter && type != opts.fixed_filter) continue;
      long cost = 0;
      for (std::size_t i = 0; i < stride; ++i) {
        cand[i] = static_cast<std::uint8_t>(row[i] - predict(type, row, prev, i, bpp));
        cost += std::abs(static_cast<int>(static_cast<std::int8_t>(cand[i])));
      }
      if (best_cost < 0 || cost < best_cost) {
        best_cost = cost;
        chosen = type;
        best.swap(cand);
      }
    }
    raw.push_back(static_cast<std::uint8_t>(chosen));
    raw.insert(raw.end(), best.begin(), best.end());
  }

  // Filtered rows compress better with Z_FILTERED, as libpng does.
  const bool filtered = opts.adaptive_filter || opts.fixed_filter != 0;
  z_stream zs{};
  if (deflateInit2(&zs, opts.deflate_level, Z_DEFLATED, 15, 8,
                   filtered ? Z_FILTERED : Z_DEFAULT_STRATEGY) != Z_OK) {
    throw std::runtime_error("deflate init failed");
  }
  std::vector<std::uint8_t> z(deflateBound(&zs, static_cast<uLong>(raw.size())));
  zs.next_in = raw.data();
  zs.avail_in = static_cast<uInt>(raw.size());
  zs.next_out = z.data();
  zs.avail_out = static_cast<uInt>(z.size());
  const int rc = deflate(&zs, Z_FINISH);
  z.resize(zs.total_out);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw std::runtime_error("deflate failed");

  std::vector<std::uint8_t> out(kSignature.begin(), kSignature.end());
  std::vector<std::uint8_t> ihdr;
  put_be32(ihdr, static_cast<std::uint32_t>(img.width));
  put_be32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.push_back(8);                                    // bit depth
  ihdr.push_back(img.channels == 1 ? 0 : 2);            // colour type
  ihdr.insert(ihdr.end(), {0, 0, 0});                   // compression, filter, interlace
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", z);
  put_chunk(out, "IEND", {});
  return out;
}

QuantizedImage decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kSignature.size() || !std::equal(kSignature.begin(), kSignature.end(), bytes.begin())) {
    throw std::runtime_error("not a PNG stream");
  }
  QuantizedImage img;
  std::vector<std::uint8_t> zdata;
  bool have_header = false, done = false;
  std::size_t at = kSignature.size();
  while (!done) {
    if (at + 12 > bytes.size()) throw std::runtime_error("truncated PNG chunk");
    const std::uint32_t len = get_be32(bytes, at);
    if (at + 12 + len > bytes.size()) throw std::runtime_error("truncated PNG chunk");
    const std::string type(reinterpret_cast<const char*>(bytes.data() + at + 4), 4);
    const std::uint8_t* data = bytes.data() + at + 8;
    const uLong crc = crc32(0L, bytes.data() + at + 4, static_cast<uInt>(len + 4));
    if (crc != get_be32(bytes, at + 8 + len)) throw std::runtime_error("PNG CRC mismatch in " + type);
    if (type == "IHDR") {
      if (len != 13) throw std::runtime_error("bad IHDR");
      img.width = get_be32(bytes, at + 8);
      img.height = get_be32(bytes, at + 12);
      const int depth = data[8], colour = data[9];
      if (depth != 8 || (colour != 0 && colour != 2) || data[10] != 0 || data[11] != 0 || data[12] != 0) {
        throw std::runtime_error("unsupported PNG format");
      }
      img.channels = colour == 0 ? 1 : 3;
      have_header = true;
    } else if (type == "IDAT") {
      zdata.insert(zdata.end(), data, data + len);
    } else if (type == "IEND") {
      done = true;
    }
    at += 12 + len;
  }
  if (!have_header) throw std::runtime_error("PNG without IHDR");

  const std::size_t bpp = img.channels;
  const std::size_t stride = img.width * bpp;
  std::vector<std::uint8_t> raw(img.height * (stride + 1));
  uLongf rlen = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &rlen, zdata.data(), static_cast<uLong>(zdata.size())) != Z_OK ||
      rlen != raw.size()) {
    throw std::runtime_error("corrupt PNG image data");
  }
  img.pixels.resize(img.height * stride);
  std::vector<std::uint8_t> zeros(stride, 0);
  for (std::size_t y = 0; y < img.height; ++y) {
    const int type = raw[y * (stride + 1)];
    if (type > 4) throw std::runtime_error("bad PNG filter type");
    const std::uint8_t* src = raw.data() + y * (stride + 1) + 1;
    std::uint8_t* row = img.pixels.data() + y * stride;
    const std::uint8_t* prev = y == 0 ? zeros.data() : row - stride;
    for (std::size_t i = 0; i < stride; ++i) {
      row[i] = static_cast<std::uint8_t>(src[i] + predict(type, row, prev, i, bpp));
    }
  }
  return img;
}

double complexity_png(const Sample& x, const PngOptions& opts) {
  if (!x.shape) throw std::invalid_argument("complexity is only defined for image-shaped samples");
  return static_cast<double>(encode_png(quantize(x.values, *x.shape), opts).size()) /
         static_cast<double>(x.shape->size());
}

// --- DCT -------------------------------------------------------------------

namespace {

// Orthonormal DCT-II matrix, row u = frequency.
std::vector<double> dct_matrix(std::size_t n) {
  std::vector<double> m(n * n);
  for (std::size_t u = 0; u < n; ++u) {
    const double a = std::sqrt((u == 0 ? 1.0 : 2.0) / static_cast<double>(n));
    for (std::size_t x = 0; x < n; ++x) {
      m[u * n + x] = a * std::cos(std::numbers::pi * (2.0 * static_cast<double>(x) + 1.0) *
                                  static_cast<double>(u) / (2.0 * static_cast<double>(n)));
    }
  }
  return m;
}

// Rows of the full (block-diagonal over channels) 2-D DCT operator. When
// `high_only` is set, only rows with both frequencies >= half size.
std::vector<double> dct_operator(const ImageShape& s, bool high_only, std::size_t& rows) {
  const auto ch = dct_matrix(s.height);
  const auto cw = dct_matrix(s.width);
  const std::size_t n = s.size();
  const std::size_t plane = s.height * s.width;
  const std::size_t u0 = high_only ? s.height / 2 : 0;
  const std::size_t v0 = high_only ? s.width / 2 : 0;
  rows = s.channels * (s.height - u0) * (s.width - v0);
  std::vector<double> m(rows * n, 0.0);
  std::size_t r = 0;
  for (std::size_t c = 0; c < s.channels; ++c) {
    for (std::size_t u = u0; u < s.height; ++u) {
      for (std::size_t v = v0; v < s.width; ++v, ++r) {
        double* row = m.data() + r * n + c * plane;
        for (std::size_t y = 0; y < s.height; ++y)
          for (std::size_t x = 0; x < s.width; ++x) row[y * s.width + x] = ch[u * s.height + y] * cw[v * s.width + x];
      }
    }
  }
  return m;
}

void check_even(const ImageShape& s) {
  if (s.height % 2 != 0 || s.width % 2 != 0) {
    throw std::invalid_argument("high-frequency energy needs even image dimensions");
  }
}

}  // namespace

std::vector<double> dct2(std::span<const double> values, const ImageShape& s) {
  check_shape(values, s);
  const auto ch = dct_matrix(s.height);
  const auto cw = dct_matrix(s.width);
  const std::size_t plane = s.height * s.width;
  std::vector<double> out(values.size(), 0.0), tmp(plane);
  for (std::size_t c = 0; c < s.channels; ++c) {
    const double* in = values.data() + c * plane;
    double* dst = out.data() + c * plane;
    // Rows first (along width), then columns.
    for (std::size_t y = 0; y < s.height; ++y)
      for (std::size_t v = 0; v < s.width; ++v) {
        double acc = 0.0;
        for (std::size_t x = 0; x < s.width; ++x) acc += cw[v * s.width + x] * in[y * s.width + x];
        tmp[y * s.width + v] = acc;
      }
    for (std::size_t u = 0; u < s.height; ++u)
      for (std::size_t v = 0; v < s.width; ++v) {
        double acc = 0.0;
        for (std::size_t y = 0; y < s.height; ++y) acc += ch[u * s.height + y] * tmp[y * s.width + v];
        dst[u * s.width + v] = acc;
      }
  }
  return out;
}

ad::Var dct2(const ad::Var& x, const ImageShape& s) {
  if (x.size() != s.size()) throw ad::ShapeError("values do not match the image shape");
  std::size_t rows = 0;
  auto m = dct_operator(s, false, rows);
  return ad::matvec(x.tape()->constant(std::move(m), rows, s.size()), x);
}

double hf_energy(std::span<const double> values, const ImageShape& s) {
  check_even(s);
  const auto coeffs = dct2(values, s);
  double e = 0.0;
  for (std::size_t c = 0; c < s.channels; ++c)
    for (std::size_t u = s.height / 2; u < s.height; ++u)
      for (std::size_t v = s.width / 2; v < s.width; ++v) {
        const double k = coeffs[(c * s.height + u) * s.width + v];
        e += k * k;
      }
  return e;
}

ad::Var hf_energy(const ad::Var& x, const ImageShape& s) {
  check_even(s);
  if (x.size() != s.size()) throw ad::ShapeError("values do not match the image shape");
  std::size_t rows = 0;
  auto m = dct_operator(s, true, rows);
  const ad::Var high = ad::matvec(x.tape()->constant(std::move(m), rows, s.size()), x);
  return ad::dot(high, high);
}

// --- Gaussian filter -------------------------------------------------------

namespace {

// Half-sample symmetric extension: ... c b a | a b c ... | c b a ...
std::size_t reflect(long i, std::size_t n) {
  const long period = 2 * static_cast<long>(n);
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<long>(n) ? m : period - 1 - m);
}

}  // namespace

std::vector<double> gaussian_filter2d(std::span<const double> values, const ImageShape& s,
                                      std::size_t kernel_size) {
  check_shape(values, s);
  if (kernel_size == 0) throw std::invalid_argument("kernel size must be at least 1");
  const long radius = static_cast<long>(kernel_size / 2);
  const double sigma = static_cast<double>(kernel_size) / 4.0;
  std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
  double norm = 0.0;
  for (long k = -radius; k <= radius; ++k) {
    const double w = std::exp(-0.5 * static_cast<double>(k * k) / (sigma * sigma));
    taps[static_cast<std::size_t>(k + radius)] = w;
    norm += w;
  }
  for (double& w : taps) w /= norm;

  const std::size_t plane = s.height * s.width;
  std::vector<double> out(values.size()), tmp(plane);
  for (std::size_t c = 0; c < s.channels; ++c) {
    const double* in = values.data() + c * plane;
    for (std::size_t y = 0; y < s.height; ++y)
      for (std::size_t x = 0; x < s.width; ++x) {
        double acc = 0.0;
        for (long k = -radius; k <= radius; ++k)
          acc += taps[static_cast<std::size_t>(k + radius)] *
                 in[y * s.width + reflect(static_cast<long>(x) + k, s.width)];
        tmp[y * s.width + x] = acc;
      }
    double* dst = out.data() + c * plane;
    for (std::size_t y = 0; y < s.height; ++y)
      for (std::size_t x = 0; x < s.width; ++x) {
        double acc = 0.0;
        for (long k = -radius; k <= radius; ++k)
          acc += taps[static_cast<std::size_t>(k + radius)] *
                 tmp[reflect(static_cast<long>(y) + k, s.height) * s.width + x];
        dst[y * s.width + x] = acc;
      }
  }
  return out;
}

}  // namespace pflow
