#pragma once

#include <charconv>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ecqx/checkpoint.hpp"
#include "ecqx/nn.hpp"

namespace ecqx {

struct Dataset {
  Tensor features;  // (N, sample shape...)
  std::vector<int> labels;
  std::size_t n_classes = 0;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return Shape(features.shape().begin() + 1, features.shape().end()); }
};

struct SplitDataset {
  Dataset train, val, test;
};

inline void check_dataset(const Dataset& d) {
  if (d.features.rank() < 2 || d.features.dim(0) != d.labels.size())
    throw ShapeError("dataset feature rows do not match label count");
  for (int y : d.labels)
    if (y < 0 || std::size_t(y) >= d.n_classes)
      throw InputError("label " + std::to_string(y) + " outside [0," + std::to_string(d.n_classes) + ")");
}

inline Dataset subset(const Dataset& d, std::span<const std::size_t> idx) {
  Dataset out{gather_rows(d.features, idx), {}, d.n_classes};
  out.labels.reserve(idx.size());
  for (auto i : idx) out.labels.push_back(d.labels[i]);
  return out;
}

inline Dataset reshape_samples(const Dataset& d, const Shape& sample) {
  Shape s{d.size()};
  s.insert(s.end(), sample.begin(), sample.end());
  return {d.features.reshaped(s), d.labels, d.n_classes};
}

/// Shuffles with Rng(seed) and splits 80/10/10 (train/val/test).
inline SplitDataset split_dataset(const Dataset& d, std::uint64_t seed) {
  std::vector<std::size_t> order(d.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t n_train = d.size() * 8 / 10, n_val = d.size() / 10;
  std::span<const std::size_t> o(order);
  return {subset(d, o.subspan(0, n_train)), subset(d, o.subspan(n_train, n_val)),
          subset(d, o.subspan(n_train + n_val))};
}

/// Isotropic Gaussian clusters. Centers are standard normal vectors; samples
/// are center + spread * N(0, I). Generation order: all centers (class by
/// class), then samples class by class; the split shuffle continues on the
/// same generator.
inline SplitDataset gen_blobs(std::uint64_t seed, std::size_t n_classes, std::size_t dim, std::size_t n_per_class,
                              double spread) {
  if (n_classes < 2) throw InputError("blobs need at least two classes");
  if (dim < 1) throw InputError("blobs need dim >= 1");
  Rng rng(seed);
  std::vector<double> centers(n_classes * dim);
  for (auto& c : centers) c = rng.normal();
  Dataset all{Tensor({n_classes * n_per_class, dim}), {}, n_classes};
  for (std::size_t c = 0; c < n_classes; ++c)
    for (std::size_t k = 0; k < n_per_class; ++k) {
      const std::size_t row = c * n_per_class + k;
      for (std::size_t d = 0; d < dim; ++d) all.features[row * dim + d] = centers[c * dim + d] + spread * rng.normal();
      all.labels.push_back(int(c));
    }
  return split_dataset(all, rng.next());
}

// ---------------------------------------------------------------------------
// IDX (MNIST) files: big-endian u32 magic, u32 dims, then u8 payload.

namespace detail {

inline std::uint32_t be32(const std::string& b, std::size_t at) {
  if (b.size() < at + 4) throw FormatError("truncated IDX header", at);
  return (std::uint32_t(std::uint8_t(b[at])) << 24) | (std::uint32_t(std::uint8_t(b[at + 1])) << 16) |
         (std::uint32_t(std::uint8_t(b[at + 2])) << 8) | std::uint32_t(std::uint8_t(b[at + 3]));
}

}  // namespace detail

inline Dataset parse_idx(const std::string& images, const std::string& labels) {
  if (detail::be32(images, 0) != 0x00000803) throw FormatError("bad IDX image magic", 0);
  if (detail::be32(labels, 0) != 0x00000801) throw FormatError("bad IDX label magic", 0);
  const std::size_t n = detail::be32(images, 4), rows = detail::be32(images, 8), cols = detail::be32(images, 12);
  const std::size_t nl = detail::be32(labels, 4);
  if (n != nl)
    throw FormatError("IDX image count " + std::to_string(n) + " differs from label count " + std::to_string(nl), 4);
  if (images.size() != 16 + n * rows * cols)
    throw FormatError("IDX image payload has " + std::to_string(images.size() - 16) + " bytes, expected " +
                          std::to_string(n * rows * cols), 16);
  if (labels.size() != 8 + n)
    throw FormatError("IDX label payload has " + std::to_string(labels.size() - 8) + " bytes, expected " +
                          std::to_string(n), 8);
  Dataset d{Tensor({n, 1, rows, cols}), std::vector<int>(n), 0};
  for (std::size_t i = 0; i < n * rows * cols; ++i) d.features[i] = double(std::uint8_t(images[16 + i])) / 255.0;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = std::uint8_t(labels[8 + i]);
    d.n_classes = std::max<std::size_t>(d.n_classes, std::size_t(d.labels[i]) + 1);
  }
  return d;
}

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  return parse_idx(read_file(images_path), read_file(labels_path));
}

// ---------------------------------------------------------------------------
// CSV features: "label,f1,f2,...", optional header line.

inline Dataset parse_csv_features(std::string_view text, std::size_t n_classes) {
  std::vector<double> values;
  std::vector<int> labels;
  std::size_t width = 0, lineno = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    const std::size_t line_at = pos;
    pos = end + 1;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;

    std::vector<double> row;
    bool numeric = true;
    for (std::size_t s = 0; s <= line.size();) {
      std::size_t e = line.find(',', s);
      if (e == std::string_view::npos) e = line.size();
      std::string_view cell = line.substr(s, e - s);
      while (!cell.empty() && cell.front() == ' ') cell.remove_prefix(1);
      while (!cell.empty() && cell.back() == ' ') cell.remove_suffix(1);
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty()) numeric = false;
      row.push_back(v);
      s = e + 1;
    }
    if (!numeric) {
      if (lineno == 1 && labels.empty()) continue;  // header
      throw FormatError("CSV line " + std::to_string(lineno) + ": non-numeric cell", line_at);
    }
    if (row.size() < 2) throw FormatError("CSV line " + std::to_string(lineno) + ": need a label and features", line_at);
    if (width == 0) width = row.size();
    if (row.size() != width)
      throw FormatError("CSV line " + std::to_string(lineno) + ": ragged row (" + std::to_string(row.size()) +
                            " fields, expected " + std::to_string(width) + ")",
                        line_at);
    const double lab = row[0];
    if (lab != std::floor(lab) || lab < 0 || lab >= double(n_classes))
      throw FormatError("CSV line " + std::to_string(lineno) + ": label outside [0," + std::to_string(n_classes) + ")",
                        line_at);
    labels.push_back(int(lab));
    values.insert(values.end(), row.begin() + 1, row.end());
  }
  if (labels.empty()) throw FormatError("CSV feature file has no data rows", 0);
  const std::size_t n = labels.size();
  return {Tensor({n, width - 1}, std::move(values)), std::move(labels), n_classes};
}

inline Dataset load_csv_features(const std::string& path, std::size_t n_classes) {
  return parse_csv_features(read_file(path), n_classes);
}

}  // namespace ecqx
