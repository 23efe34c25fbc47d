#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "appt/autodiff.hpp"
#include "appt/error.hpp"
#include "appt/random.hpp"
#include "appt/tensor.hpp"

namespace appt {

/// Positions (N x 3), per-point features (N x C) and optional labels.
class PointCloud {
 public:
  PointCloud(Tensor positions, Tensor features, std::vector<int> labels = {},
             std::optional<int> cloud_class = std::nullopt)
      : positions_(std::move(positions)),
        features_(std::move(features)),
        labels_(std::move(labels)),
        cloud_class_(cloud_class) {
    validate();
  }

  std::size_t size() const { return positions_.rows(); }
  std::size_t feature_width() const { return features_.cols(); }
  const Tensor& positions() const { return positions_; }
  const Tensor& features() const { return features_; }
  bool has_labels() const { return !labels_.empty(); }
  const std::vector<int>& labels() const { return labels_; }
  std::optional<int> cloud_class() const { return cloud_class_; }

  /// Throws unless every label lies in [0, num_classes).
  void check_labels(int num_classes) const {
    for (int l : labels_)
      if (l >= num_classes) {
        throw InputError("label " + std::to_string(l) + " outside [0, " + std::to_string(num_classes) + ")");
      }
    if (cloud_class_ && *cloud_class_ >= num_classes) throw InputError("cloud class out of range");
  }

  /// Rows reordered so that new row r is old row order[r].
  PointCloud permuted(std::span<const std::size_t> order) const {
    Tensor p = Tensor::matrix(size(), 3);
    Tensor f = Tensor::matrix(size(), feature_width());
    std::vector<int> l;
    for (std::size_t r = 0; r < order.size(); ++r) {
      std::copy_n(positions_.row(order[r]).begin(), 3, p.row(r).begin());
      std::copy_n(features_.row(order[r]).begin(), feature_width(), f.row(r).begin());
      if (has_labels()) l.push_back(labels_[order[r]]);
    }
    return PointCloud(std::move(p), std::move(f), std::move(l), cloud_class_);
  }

 private:
  void validate() const {
    if (positions_.rank() != 2 || positions_.cols() != 3) {
      throw DimensionError("positions must be N x 3, got " + shape_string(positions_.shape()));
    }
    if (positions_.rows() == 0) throw InputError("point cloud needs at least one point");
    if (features_.rank() != 2 || features_.rows() != positions_.rows()) {
      throw DimensionError("features " + shape_string(features_.shape()) + " do not match " +
                           std::to_string(positions_.rows()) + " points");
    }
    if (!positions_.all_finite()) throw InputError("non-finite coordinate");
    if (!labels_.empty() && labels_.size() != positions_.rows()) {
      throw DimensionError("label count does not match point count");
    }
    for (int l : labels_)
      if (l < 0) throw InputError("negative label");
    if (cloud_class_ && *cloud_class_ < 0) throw InputError("negative cloud class");
  }

  Tensor positions_;
  Tensor features_;
  std::vector<int> labels_;
  std::optional<int> cloud_class_;
};

namespace detail {

inline double dist2(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  const double dx = a(i, 0) - b(j, 0), dy = a(i, 1) - b(j, 1), dz = a(i, 2) - b(j, 2);
  return dx * dx + dy * dy + dz * dz;
}

/// Lexicographic (x, y, z) order, index as the last resort.
inline bool lex_less(const Tensor& p, std::size_t a, std::size_t b) {
  for (std::size_t d = 0; d < 3; ++d) {
    if (p(a, d) < p(b, d)) return true;
    if (p(b, d) < p(a, d)) return false;
  }
  return a < b;
}

inline void require_positions(const Tensor& p) {
  if (p.rank() != 2 || p.cols() != 3) throw DimensionError("positions must be N x 3");
}

}  // namespace detail

/// FPS-selected pivots in selection order.
struct PivotSet {
  IndexList indices;
  double sampling_ratio = 0.0;

  std::size_t size() const { return indices.size(); }
};

/// M = 0 for SR = 0, else max(1, round_half_up(SR * N)).
inline std::size_t pivot_count(double sampling_ratio, std::size_t n) {
  if (!(sampling_ratio >= 0.0 && sampling_ratio <= 1.0)) {
    throw RangeError("sampling ratio " + std::to_string(sampling_ratio) + " outside [0, 1]");
  }
  if (sampling_ratio == 0.0) return 0;
  const auto m = static_cast<std::size_t>(std::floor(sampling_ratio * static_cast<double>(n) + 0.5));
  return std::min(n, std::max<std::size_t>(1, m));
}

/// Greedy max-min selection of `m` points.
///
/// The first pivot is the point farthest from the centroid; each following
/// pivot maximizes its squared distance to the nearest selected pivot. All
/// ties go to the lexicographically smallest (x, y, z). The centroid is summed
/// in lexicographic order so the selected coordinate set does not depend on
/// the input row order.
inline IndexList farthest_point_order(const Tensor& positions, std::size_t m) {
  detail::require_positions(positions);
  const std::size_t n = positions.rows();
  if (m > n) throw RangeError("cannot select " + std::to_string(m) + " of " + std::to_string(n) + " points");
  IndexList out;
  if (m == 0) return out;
  out.reserve(m);

  IndexList sorted(n);
  for (std::size_t i = 0; i < n; ++i) sorted[i] = i;
  std::sort(sorted.begin(), sorted.end(),
            [&](std::size_t a, std::size_t b) { return detail::lex_less(positions, a, b); });
  Tensor centroid = Tensor::matrix(1, 3);
  for (std::size_t i : sorted)
    for (std::size_t d = 0; d < 3; ++d) centroid(0, d) += positions(i, d);
  for (std::size_t d = 0; d < 3; ++d) centroid(0, d) /= static_cast<double>(n);

  auto better = [&](std::size_t cand, double cd, std::size_t best, double bd) {
    if (cd != bd) return cd > bd;
    return detail::lex_less(positions, cand, best);
  };

  std::size_t first = 0;
  double first_d = detail::dist2(positions, 0, centroid, 0);
  for (std::size_t i = 1; i < n; ++i) {
    const double d = detail::dist2(positions, i, centroid, 0);
    if (better(i, d, first, first_d)) {
      first = i;
      first_d = d;
    }
  }
  out.push_back(first);

  std::vector<double> min_d(n, std::numeric_limits<double>::infinity());
  std::vector<bool> taken(n, false);
  taken[first] = true;
  std::size_t last = first;
  while (out.size() < m) {
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      min_d[i] = std::min(min_d[i], detail::dist2(positions, i, positions, last));
      if (best == n || better(i, min_d[i], best, best_d)) {
        best = i;
        best_d = min_d[i];
      }
    }
    taken[best] = true;
    out.push_back(best);
    last = best;
  }
  return out;
}

inline PivotSet farthest_point_sample(const Tensor& positions, double sampling_ratio) {
  const std::size_t m = pivot_count(sampling_ratio, positions.rows());
  return {farthest_point_order(positions, m), sampling_ratio};
}

inline PivotSet farthest_point_sample(const PointCloud& cloud, double sampling_ratio) {
  return farthest_point_sample(cloud.positions(), sampling_ratio);
}

/// Row-major N x k neighbor table.
struct NeighborIndex {
  IndexList table;
  std::size_t k = 0;

  std::size_t rows() const { return k ? table.size() / k : 0; }
  std::span<const std::size_t> row(std::size_t i) const { return {table.data() + i * k, k}; }
};

/// For every query row, the k nearest reference rows ordered by ascending
/// squared distance; ties go to the lexicographically smaller reference
/// point. With `self_first`, query i always lists reference i first.
inline NeighborIndex knn_query(const Tensor& queries, const Tensor& reference, std::size_t k,
                               bool self_first = false) {
  detail::require_positions(queries);
  detail::require_positions(reference);
  const std::size_t n = reference.rows();
  if (k < 1 || k > n) {
    throw RangeError("k = " + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]");
  }
  NeighborIndex out;
  out.k = k;
  out.table.resize(queries.rows() * k);
  IndexList cand(n);
  std::vector<double> d(n);
  for (std::size_t q = 0; q < queries.rows(); ++q) {
    for (std::size_t j = 0; j < n; ++j) {
      cand[j] = j;
      d[j] = detail::dist2(queries, q, reference, j);
    }
    auto less = [&](std::size_t a, std::size_t b) {
      if (self_first && (a == q) != (b == q)) return a == q;
      if (d[a] != d[b]) return d[a] < d[b];
      return detail::lex_less(reference, a, b);
    };
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), less);
    std::copy_n(cand.begin(), k, out.table.begin() + static_cast<std::ptrdiff_t>(q * k));
  }
  return out;
}

/// k nearest points of each point within its own cloud, self first.
inline NeighborIndex knn(const Tensor& positions, std::size_t k) {
  return knn_query(positions, positions, k, true);
}

inline NeighborIndex knn(const PointCloud& cloud, std::size_t k) { return knn(cloud.positions(), k); }

// ---------------------------------------------------------------------------
// Synthetic data

enum class ShapeKind { sphere, cube, torus, two_planes };

inline constexpr std::string_view kind_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::sphere: return "sphere";
    case ShapeKind::cube: return "cube";
    case ShapeKind::torus: return "torus";
    case ShapeKind::two_planes: return "two_planes";
  }
  return "?";
}

inline ShapeKind parse_kind(std::string_view s) {
  for (ShapeKind k : {ShapeKind::sphere, ShapeKind::cube, ShapeKind::torus, ShapeKind::two_planes})
    if (kind_name(k) == s) return k;
  throw InputError("unknown synthetic kind '" + std::string(s) + "'");
}

/// Class id of the classification kinds (sphere 0, cube 1, torus 2).
inline std::optional<int> kind_class(ShapeKind k) {
  switch (k) {
    case ShapeKind::sphere: return 0;
    case ShapeKind::cube: return 1;
    case ShapeKind::torus: return 2;
    default: return std::nullopt;
  }
}

inline constexpr double kTorusMajor = 1.0;
inline constexpr double kTorusMinor = 0.35;
inline constexpr double kPlaneGap = 1.0;

/// Seeded surface samples. Features are (x, y, z, nx, ny, nz). The
/// classification kinds carry their class id; two_planes labels each point
/// with the plane it lies on (first half z = -gap/2, second half z = +gap/2).
inline PointCloud generate_synthetic(ShapeKind kind, std::size_t n, std::uint64_t seed) {
  if (n < 8) throw InputError("synthetic clouds need at least 8 points");
  const CounterRng rng(seed, kind_name(kind));
  Tensor pos = Tensor::matrix(n, 3);
  Tensor feat = Tensor::matrix(n, 6);
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t c = 8 * i;
    double p[3] = {0, 0, 0}, nrm[3] = {0, 0, 0};
    switch (kind) {
      case ShapeKind::sphere: {
        double g[3] = {rng.normal(c), rng.normal(c + 1), rng.normal(c + 2)};
        double len = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
        if (len < 1e-12) {
          g[0] = 1.0;
          len = 1.0;
        }
        for (int d = 0; d < 3; ++d) p[d] = nrm[d] = g[d] / len;
        break;
      }
      case ShapeKind::cube: {
        const auto face = static_cast<int>(rng.below(c, 6));
        const int axis = face / 2;
        const double side = face % 2 ? 1.0 : -1.0;
        const double u = rng.uniform(c + 1, -1.0, 1.0), v = rng.uniform(c + 2, -1.0, 1.0);
        p[axis] = side;
        p[(axis + 1) % 3] = u;
        p[(axis + 2) % 3] = v;
        nrm[axis] = side;
        break;
      }
      case ShapeKind::torus: {
        const double u = rng.uniform(c, 0.0, 2.0 * std::numbers::pi);
        const double v = rng.uniform(c + 1, 0.0, 2.0 * std::numbers::pi);
        const double ring = kTorusMajor + kTorusMinor * std::cos(v);
        p[0] = ring * std::cos(u);
        p[1] = ring * std::sin(u);
        p[2] = kTorusMinor * std::sin(v);
        nrm[0] = std::cos(v) * std::cos(u);
        nrm[1] = std::cos(v) * std::sin(u);
        nrm[2] = std::sin(v);
        break;
      }
      case ShapeKind::two_planes: {
        const int plane = i < n / 2 ? 0 : 1;
        p[0] = rng.uniform(c, -1.0, 1.0);
        p[1] = rng.uniform(c + 1, -1.0, 1.0);
        p[2] = plane ? 0.5 * kPlaneGap : -0.5 * kPlaneGap;
        nrm[2] = plane ? 1.0 : -1.0;
        labels.push_back(plane);
        break;
      }
    }
    for (std::size_t d = 0; d < 3; ++d) {
      pos(i, d) = p[d];
      feat(i, d) = p[d];
      feat(i, 3 + d) = nrm[d];
    }
  }
  return PointCloud(std::move(pos), std::move(feat), std::move(labels), kind_class(kind));
}

// ---------------------------------------------------------------------------
// Text format
//
//   # appt-cloud features=<C> labels=<0|1> [class=<K>]
//   x y z f1 ... fC [label]
//
// Lines starting with '#' are comments; the header comment is optional.
// Without it, a file with at least four columns whose last column holds only
// non-negative integers is read as carrying labels.

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline double parse_real(std::string_view tok, std::size_t line) {
  double v = 0.0;
  const char* b = tok.data();
  const char* e = b + tok.size();
  if (!tok.empty() && *b == '+') ++b;
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc{} || ptr != e) throw ParseError("cannot parse '" + std::string(tok) + "' as a number", line);
  if (!std::isfinite(v)) throw ParseError("non-finite value '" + std::string(tok) + "'", line);
  return v;
}

inline std::optional<long> header_field(std::string_view line, std::string_view key) {
  const std::string pat = std::string(key) + "=";
  auto pos = line.find(pat);
  if (pos == std::string_view::npos) return std::nullopt;
  long v = 0;
  auto rest = line.substr(pos + pat.size());
  auto [ptr, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), v);
  if (ec != std::errc{}) return std::nullopt;
  return v;
}

inline std::string format_real(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, ptr);
}

}  // namespace detail

inline PointCloud parse_cloud(std::istream& in) {
  std::optional<long> header_features, header_labels, header_class;
  std::vector<std::vector<double>> rows;
  std::size_t columns = 0, first_line = 0;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    std::string_view sv(line);
    const auto start = sv.find_first_not_of(" \t\r");
    if (start == std::string_view::npos) continue;
    if (sv[start] == '#') {
      if (sv.find("appt-cloud") != std::string_view::npos) {
        header_features = detail::header_field(sv, "features");
        header_labels = detail::header_field(sv, "labels");
        header_class = detail::header_field(sv, "class");
      }
      continue;
    }
    auto tokens = detail::split_ws(sv);
    if (rows.empty()) {
      columns = tokens.size();
      first_line = lineno;
      if (columns < 3) throw ParseError("expected at least 3 columns, found " + std::to_string(columns), lineno);
    } else if (tokens.size() != columns) {
      throw FormatError("line " + std::to_string(lineno) + ": expected " + std::to_string(columns) +
                        " columns (as on line " + std::to_string(first_line) + "), found " +
                        std::to_string(tokens.size()));
    }
    std::vector<double> row;
    row.reserve(columns);
    for (auto tok : tokens) row.push_back(detail::parse_real(tok, lineno));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw FormatError("cloud file contains no points");

  bool labelled = false;
  if (header_labels) {
    labelled = *header_labels != 0;
  } else if (header_features) {
    labelled = columns == 3 + static_cast<std::size_t>(*header_features) + 1;
  } else if (columns >= 4) {
    labelled = std::all_of(rows.begin(), rows.end(), [&](const auto& r) {
      const double v = r.back();
      return v >= 0.0 && v == std::floor(v) && v <= std::numeric_limits<int>::max();
    });
  }
  const std::size_t feature_cols = columns - 3 - (labelled ? 1 : 0);
  if (header_features && static_cast<std::size_t>(*header_features) != feature_cols) {
    throw FormatError("header declares " + std::to_string(*header_features) + " features, rows carry " +
                      std::to_string(feature_cols));
  }

  const std::size_t n = rows.size();
  Tensor pos = Tensor::matrix(n, 3), feat = Tensor::matrix(n, feature_cols);
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < 3; ++d) pos(i, d) = rows[i][d];
    for (std::size_t j = 0; j < feature_cols; ++j) feat(i, j) = rows[i][3 + j];
    if (labelled) {
      const double v = rows[i].back();
      if (v < 0.0 || v != std::floor(v)) throw FormatError("label column holds a non-integer");
      labels.push_back(static_cast<int>(v));
    }
  }
  std::optional<int> cls;
  if (header_class) cls = static_cast<int>(*header_class);
  return PointCloud(std::move(pos), std::move(feat), std::move(labels), cls);
}

inline PointCloud load_cloud(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return parse_cloud(in);
}

inline std::string format_cloud(const PointCloud& cloud) {
  std::string out = "# appt-cloud features=" + std::to_string(cloud.feature_width()) +
                    " labels=" + (cloud.has_labels() ? "1" : "0");
  if (cloud.cloud_class()) out += " class=" + std::to_string(*cloud.cloud_class());
  out += '\n';
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (std::size_t d = 0; d < 3; ++d) {
      if (d) out += ' ';
      out += detail::format_real(cloud.positions()(i, d));
    }
    for (std::size_t j = 0; j < cloud.feature_width(); ++j) {
      out += ' ';
      out += detail::format_real(cloud.features()(i, j));
    }
    if (cloud.has_labels()) {
      out += ' ';
      out += std::to_string(cloud.labels()[i]);
    }
    out += '\n';
  }
  return out;
}

/// Writes `bytes` to a sibling temporary and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError("cannot rename onto '" + path.string() + "': " + ec.message());
  }
}

inline void save_cloud(const PointCloud& cloud, const std::filesystem::path& path) {
  write_file_atomic(path, format_cloud(cloud));
}

}  // namespace appt
