#include "pflow/harness/report.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <boost/math/distributions/students_t.hpp>

namespace pflow::harness {

CsvWriter::CsvWriter(const std::filesystem::path& path) : out_(path, std::ios::binary) {
  if (!out_) throw std::runtime_error("cannot write " + path.string());
}

std::string CsvWriter::escape(std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
  std::string s = "\"";
  for (char c : field) {
    if (c == '"') s += '"';
    s += c;
  }
  return s + "\"";
}

void CsvWriter::row(const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out_ << ',';
    out_ << escape(fields[i]);
  }
  out_ << "\r\n";
  if (!out_) throw std::runtime_error("CSV write failed");
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, pending = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
      continue;
    }
    pending = true;
    if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\r' || c == '\n') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      pending = false;
    } else {
      field += c;
    }
  }
  if (pending) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  if (!(q >= 0.0 && q <= 100.0)) throw std::invalid_argument("percentile q must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

namespace {

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

SpearmanResult spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
  if (a.size() < 3) throw std::invalid_argument("spearman: need at least 3 pairs");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) throw std::invalid_argument("spearman: non-finite value");
  }
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  SpearmanResult res;
  res.n = a.size();
  if (saa == 0.0 || sbb == 0.0) {
    res.rho = 0.0;
    res.p_value = 1.0;
    return res;
  }
  res.rho = sab / std::sqrt(saa * sbb);
  const double df = n - 2.0;
  if (std::abs(res.rho) >= 1.0) {
    res.p_value = 0.0;
    return res;
  }
  const double t = res.rho * std::sqrt(df / (1.0 - res.rho * res.rho));
  const boost::math::students_t dist(df);
  res.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
  return res;
}

std::size_t inversions_nondecreasing(std::span<const double> v) {
  std::size_t n = 0;
  for (std::size_t i = 1; i < v.size(); ++i) n += v[i] < v[i - 1];
  return n;
}

std::size_t inversions_nonincreasing(std::span<const double> v) {
  std::size_t n = 0;
  for (std::size_t i = 1; i < v.size(); ++i) n += v[i] > v[i - 1];
  return n;
}

// --- SVG -------------------------------------------------------------------

namespace {

constexpr std::array<const char*, 8> kPalette{"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                              "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  std::ostringstream ss;
  ss.setf(std::ios::fixed);
  ss.precision(2);
  ss << v;
  return ss.str();
}

std::string tick(double v) {
  std::ostringstream ss;
  ss.precision(3);
  ss << v;
  return ss.str();
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finish() {
    if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
    if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
  }
};

struct Panel {
  double left, top, width, height;
  Range x, y;

  double px(double v) const { return left + (v - x.lo) / (x.hi - x.lo) * width; }
  double py(double v) const { return top + height - (v - y.lo) / (y.hi - y.lo) * height; }

  void frame(std::ostringstream& s, const std::string& x_label, const std::string& y_label) const {
    s << "<rect x=\"" << num(left) << "\" y=\"" << num(top) << "\" width=\"" << num(width) << "\" height=\""
      << num(height) << "\" fill=\"none\" stroke=\"#333\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double fx = x.lo + (x.hi - x.lo) * i / 4.0;
      const double fy = y.lo + (y.hi - y.lo) * i / 4.0;
      s << "<text x=\"" << num(px(fx)) << "\" y=\"" << num(top + height + 14)
        << "\" font-size=\"10\" text-anchor=\"middle\">" << tick(fx) << "</text>\n";
      s << "<text x=\"" << num(left - 4) << "\" y=\"" << num(py(fy) + 3)
        << "\" font-size=\"10\" text-anchor=\"end\">" << tick(fy) << "</text>\n";
    }
    s << "<text x=\"" << num(left + width / 2) << "\" y=\"" << num(top + height + 30)
      << "\" font-size=\"12\" text-anchor=\"middle\">" << xml_escape(x_label) << "</text>\n";
    s << "<text transform=\"translate(" << num(left - 44) << "," << num(top + height / 2)
      << ") rotate(-90)\" font-size=\"12\" text-anchor=\"middle\">" << xml_escape(y_label) << "</text>\n";
  }
};

void legend(std::ostringstream& s, const std::vector<Series>& series, double x, double y) {
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i % kPalette.size()];
    const double yy = y + 14.0 * static_cast<double>(i);
    s << "<rect x=\"" << num(x) << "\" y=\"" << num(yy - 8) << "\" width=\"10\" height=\"10\" fill=\"" << color
      << "\"/>\n";
    s << "<text x=\"" << num(x + 14) << "\" y=\"" << num(yy + 1) << "\" font-size=\"11\">"
      << xml_escape(series[i].label) << "</text>\n";
  }
}

std::string header(double w, double h, const std::string& title) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(w) << "\" height=\"" << num(h)
    << "\" viewBox=\"0 0 " << num(w) << " " << num(h) << "\" font-family=\"sans-serif\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << num(w / 2) << "\" y=\"20\" font-size=\"14\" text-anchor=\"middle\">" << xml_escape(title)
    << "</text>\n";
  return s.str();
}

}  // namespace

std::string svg_scatter_with_cdf(const std::vector<Series>& series, const ChartText& text,
                                 std::optional<double> x_guide, std::optional<double> y_guide) {
  Panel top{70, 40, 460, 300, {}, {}};
  for (const auto& s : series) {
    for (double v : s.x) top.x.add(v);
    for (double v : s.y) top.y.add(v);
  }
  if (x_guide) top.x.add(*x_guide);
  if (y_guide) top.y.add(*y_guide);
  top.x.finish();
  top.y.finish();
  Panel cdf{70, 400, 460, 120, top.x, Range{}};
  cdf.y.lo = 0.0;
  cdf.y.hi = 1.0;

  std::ostringstream s;
  s << header(700, 570, text.title);
  top.frame(s, text.x_label, text.y_label);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i % kPalette.size()];
    for (std::size_t k = 0; k < series[i].x.size() && k < series[i].y.size(); ++k) {
      if (!std::isfinite(series[i].x[k]) || !std::isfinite(series[i].y[k])) continue;
      s << "<circle cx=\"" << num(top.px(series[i].x[k])) << "\" cy=\"" << num(top.py(series[i].y[k]))
        << "\" r=\"3\" fill=\"" << color << "\" fill-opacity=\"0.7\"/>\n";
    }
  }
  if (x_guide) {
    s << "<line x1=\"" << num(top.px(*x_guide)) << "\" y1=\"" << num(top.top) << "\" x2=\"" << num(top.px(*x_guide))
      << "\" y2=\"" << num(top.top + top.height) << "\" stroke=\"#777\" stroke-dasharray=\"4 3\"/>\n";
  }
  if (y_guide) {
    s << "<line x1=\"" << num(top.left) << "\" y1=\"" << num(top.py(*y_guide)) << "\" x2=\""
      << num(top.left + top.width) << "\" y2=\"" << num(top.py(*y_guide))
      << "\" stroke=\"#777\" stroke-dasharray=\"4 3\"/>\n";
  }
  legend(s, series, 545, 50);

  std::vector<double> pooled;
  for (const auto& se : series) {
    for (double v : se.x) {
      if (std::isfinite(v)) pooled.push_back(v);
    }
  }
  std::sort(pooled.begin(), pooled.end());
  cdf.frame(s, text.x_label, "CDF");
  if (!pooled.empty()) {
    s << "<polyline fill=\"none\" stroke=\"#333\" points=\"" << num(cdf.px(cdf.x.lo)) << "," << num(cdf.py(0.0));
    for (std::size_t i = 0; i < pooled.size(); ++i) {
      const double before = static_cast<double>(i) / static_cast<double>(pooled.size());
      const double after = static_cast<double>(i + 1) / static_cast<double>(pooled.size());
      s << " " << num(cdf.px(pooled[i])) << "," << num(cdf.py(before)) << " " << num(cdf.px(pooled[i])) << ","
        << num(cdf.py(after));
    }
    s << " " << num(cdf.px(cdf.x.hi)) << "," << num(cdf.py(1.0)) << "\"/>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::string svg_lines(const std::vector<Series>& series, const ChartText& text) {
  Panel p{70, 40, 460, 320, {}, {}};
  for (const auto& s : series) {
    for (double v : s.x) p.x.add(v);
    for (double v : s.y) p.y.add(v);
  }
  p.x.finish();
  p.y.finish();
  std::ostringstream s;
  s << header(700, 420, text.title);
  p.frame(s, text.x_label, text.y_label);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i % kPalette.size()];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-opacity=\"0.8\" points=\"";
    bool first = true;
    for (std::size_t k = 0; k < series[i].x.size() && k < series[i].y.size(); ++k) {
      if (!std::isfinite(series[i].y[k])) continue;
      s << (first ? "" : " ") << num(p.px(series[i].x[k])) << "," << num(p.py(series[i].y[k]));
      first = false;
    }
    s << "\"/>\n";
  }
  legend(s, series, 545, 50);
  s << "</svg>\n";
  return s.str();
}

QuantizedImage tile_images(const std::vector<std::vector<QuantizedImage>>& rows, std::size_t pad) {
  const QuantizedImage* first = nullptr;
  std::size_t cols = 0;
  for (const auto& r : rows) {
    cols = std::max(cols, r.size());
    if (!first && !r.empty()) first = &r.front();
  }
  if (!first) throw std::invalid_argument("tile_images: no images");
  const std::size_t h = first->height, w = first->width, ch = first->channels;
  QuantizedImage out;
  out.channels = ch;
  out.height = rows.size() * h + (rows.size() + 1) * pad;
  out.width = cols * w + (cols + 1) * pad;
  out.pixels.assign(out.height * out.width * ch, 128);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      const auto& img = rows[r][c];
      if (img.height != h || img.width != w || img.channels != ch) {
        throw std::invalid_argument("tile_images: images differ in shape");
      }
      const std::size_t oy = pad + r * (h + pad), ox = pad + c * (w + pad);
      for (std::size_t y = 0; y < h; ++y) {
        std::copy_n(img.pixels.begin() + static_cast<std::ptrdiff_t>(y * w * ch), w * ch,
                    out.pixels.begin() + static_cast<std::ptrdiff_t>(((oy + y) * out.width + ox) * ch));
      }
    }
  }
  return out;
}

}  // namespace pflow::harness
