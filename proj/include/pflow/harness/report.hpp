#pragma once

// Output plumbing: RFC 4180 CSV, summary statistics, a minimal SVG chart
// emitter and PNG image grids.

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pflow/complexity.hpp"

namespace pflow::harness {

// Rows end in CRLF; fields containing a comma, quote, CR or LF are quoted
// with embedded quotes doubled.
class CsvWriter {
 public:
  explicit CsvWriter(const std::filesystem::path& path);
  void row(const std::vector<std::string>& fields);

  static std::string escape(std::string_view field);

 private:
  std::ofstream out_;
};

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path);

// Shortest text that parses back to the same double; "nan"/"inf"/"-inf"
// for non-finite values and an empty field for an absent one.
std::string fmt(double v);
std::string fmt(const std::optional<double>& v);

void write_text(const std::filesystem::path& path, std::string_view text);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// Linear-interpolation percentile, q in [0, 100].
double percentile(std::vector<double> values, double q);

struct SpearmanResult {
  double rho = 0.0;
  double p_value = 1.0;  // two-sided, Student t with n - 2 degrees of freedom
  std::size_t n = 0;
};

// Ties get average ranks. Needs at least 3 pairs.
SpearmanResult spearman(std::span<const double> a, std::span<const double> b);

// Adjacent pairs that break a nondecreasing (resp. nonincreasing) order.
std::size_t inversions_nondecreasing(std::span<const double> v);
std::size_t inversions_nonincreasing(std::span<const double> v);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct ChartText {
  std::string title;
  std::string x_label;
  std::string y_label;
};

// Scatter of every series plus, beneath it, the empirical CDF of the pooled
// x values. Optional dashed guides at the given x and y positions.
std::string svg_scatter_with_cdf(const std::vector<Series>& series, const ChartText& text,
                                 std::optional<double> x_guide = std::nullopt,
                                 std::optional<double> y_guide = std::nullopt);
std::string svg_lines(const std::vector<Series>& series, const ChartText& text);

// Tiles equally sized grayscale or RGB images row by row with `pad` pixels
// of mid-gray between them. Rows may have different lengths.
QuantizedImage tile_images(const std::vector<std::vector<QuantizedImage>>& rows, std::size_t pad = 1);

}  // namespace pflow::harness
