#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dsmgp/common.hpp"
#include "dsmgp/rng.hpp"

namespace dsmgp {

/// Per-column statistics of the training split. Zero-variance covariate
/// columns are dropped (recorded in kept_columns) so every retained column
/// standardizes to mean 0, variance 1.
struct Standardizer {
  std::vector<int> kept_columns;
  Eigen::VectorXd x_mean;  ///< over kept columns
  Eigen::VectorXd x_std;
  double y_mean = 0.0;
  double y_std = 1.0;
};

struct Dataset {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  std::string name;
  std::string split_tag;  ///< "", "train" or "test"
  std::string source_path;
  std::vector<std::string> column_names;
  bool standardized = false;

  Eigen::Index size() const { return X.rows(); }
  int dims() const { return static_cast<int>(X.cols()); }
};

namespace detail {

inline double parse_number(const std::string& cell, const std::string& path, std::size_t line) {
  double value = 0.0;
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) {
    throw UsageError(path + ":" + std::to_string(line) + ": non-numeric cell '" + cell + "'");
  }
  return value;
}

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    // trim surrounding whitespace
    std::size_t a = 0, b = cell.size();
    while (a < b && std::isspace(static_cast<unsigned char>(cell[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(cell[b - 1]))) --b;
    cells.push_back(cell.substr(a, b - a));
  }
  if (!line.empty() && line.back() == ',') cells.push_back("");
  return cells;
}

}  // namespace detail

/// Numeric CSV with a header row; the target is the last column unless
/// `target_column` (0-based) says otherwise.
inline Dataset load_csv(const std::string& path, int target_column = -1) {
  std::ifstream in(path);
  if (!in) throw UsageError("load_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw UsageError("load_csv: empty file " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = detail::split_line(line);
  const int cols = static_cast<int>(header.size());
  if (cols < 2) throw UsageError("load_csv: need at least one covariate and one target column");
  const int target = target_column < 0 ? cols - 1 : target_column;
  if (target >= cols) throw UsageError("load_csv: target column out of range");

  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> cells = detail::split_line(line);
    if (static_cast<int>(cells.size()) != cols) {
      throw UsageError(path + ":" + std::to_string(line_no) + ": expected " +
                       std::to_string(cols) + " cells, found " + std::to_string(cells.size()));
    }
    std::vector<double> row(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      row[c] = detail::parse_number(cells[c], path, line_no);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw UsageError("load_csv: " + path + " has a header but no data rows");

  Dataset d;
  d.X.resize(static_cast<Eigen::Index>(rows.size()), cols - 1);
  d.y.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    int xc = 0;
    for (int c = 0; c < cols; ++c) {
      if (c == target) {
        d.y(static_cast<Eigen::Index>(r)) = rows[r][static_cast<std::size_t>(c)];
      } else {
        d.X(static_cast<Eigen::Index>(r), xc++) = rows[r][static_cast<std::size_t>(c)];
      }
    }
  }
  for (int c = 0; c < cols; ++c) {
    if (c != target) d.column_names.push_back(header[static_cast<std::size_t>(c)]);
  }
  d.column_names.push_back(header[static_cast<std::size_t>(target)]);
  d.source_path = path;
  d.name = std::filesystem::path(path).stem().string();
  return d;
}

/// All columns of a numeric CSV as a matrix (header row skipped), without
/// designating a target.
inline Eigen::MatrixXd load_csv_matrix(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("load_csv_matrix: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw UsageError("load_csv_matrix: empty file " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const int cols = static_cast<int>(detail::split_line(line).size());
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_line(line);
    if (static_cast<int>(cells.size()) != cols) {
      throw UsageError(path + ":" + std::to_string(line_no) + ": ragged row");
    }
    std::vector<double> row(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) row[c] = detail::parse_number(cells[c], path, line_no);
    rows.push_back(std::move(row));
  }
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (int c = 0; c < cols; ++c) {
      X(static_cast<Eigen::Index>(r), c) = rows[r][static_cast<std::size_t>(c)];
    }
  }
  return X;
}

inline void write_csv(const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw UsageError("write_csv: cannot open " + path);
  out.precision(17);
  if (d.column_names.size() == static_cast<std::size_t>(d.dims()) + 1) {
    for (std::size_t c = 0; c < d.column_names.size(); ++c) {
      out << (c ? "," : "") << d.column_names[c];
    }
    out << "\n";
  } else {
    for (int c = 0; c < d.dims(); ++c) out << "x" << (c + 1) << ",";
    out << "y\n";
  }
  for (Eigen::Index r = 0; r < d.size(); ++r) {
    for (int c = 0; c < d.dims(); ++c) out << d.X(r, c) << ",";
    out << d.y(r) << "\n";
  }
}

namespace detail {

inline std::optional<std::vector<int>> read_index_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  std::vector<int> idx;
  std::string token;
  while (in >> token) idx.push_back(static_cast<int>(parse_number(token, path, idx.size() + 1)));
  return idx;
}

inline Dataset take_rows(const Dataset& d, const std::vector<int>& idx, const char* tag) {
  Dataset out;
  out.X.resize(static_cast<Eigen::Index>(idx.size()), d.X.cols());
  out.y.resize(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= d.size()) throw UsageError("split: row index out of range");
    out.X.row(static_cast<Eigen::Index>(i)) = d.X.row(idx[i]);
    out.y(static_cast<Eigen::Index>(i)) = d.y(idx[i]);
  }
  out.name = d.name;
  out.split_tag = tag;
  out.source_path = d.source_path;
  out.column_names = d.column_names;
  out.standardized = d.standardized;
  return out;
}

}  // namespace detail

/// Train/test split. Pre-defined splits are honored when sidecar files
/// `<source>.train_idx` / `<source>.test_idx` (one 0-based row index per
/// line) exist next to the source CSV; otherwise a deterministic seeded
/// shuffle takes ceil(frac * N) training rows.
inline std::pair<Dataset, Dataset> split(const Dataset& d, double frac, std::uint64_t seed) {
  if (!(frac > 0.0 && frac < 1.0)) throw UsageError("split: fraction must be in (0, 1)");
  if (!d.source_path.empty()) {
    const std::string stem =
        (std::filesystem::path(d.source_path).parent_path() /
         std::filesystem::path(d.source_path).stem())
            .string();
    auto train_idx = detail::read_index_file(stem + ".train_idx");
    auto test_idx = detail::read_index_file(stem + ".test_idx");
    if (train_idx && test_idx) {
      std::vector<int> check = *train_idx;
      check.insert(check.end(), test_idx->begin(), test_idx->end());
      std::sort(check.begin(), check.end());
      if (std::adjacent_find(check.begin(), check.end()) != check.end()) {
        throw UsageError("split: sidecar index files overlap");
      }
      return {detail::take_rows(d, *train_idx, "train"), detail::take_rows(d, *test_idx, "test")};
    }
  }
  std::vector<int> order(static_cast<std::size_t>(d.size()));
  std::iota(order.begin(), order.end(), 0);
  SplitRng rng(seed);
  rng.shuffle(order);
  const auto n_train = static_cast<std::size_t>(
      std::ceil(frac * static_cast<double>(d.size())));
  std::vector<int> train_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<int> test_idx(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  return {detail::take_rows(d, train_idx, "train"), detail::take_rows(d, test_idx, "test")};
}

/// Training-split statistics; covariate columns with (near) zero variance
/// are dropped. Population variance (1/N).
inline Standardizer compute_standardizer(const Dataset& train) {
  if (train.size() < 1) throw UsageError("compute_standardizer: empty dataset");
  Standardizer s;
  const double n = static_cast<double>(train.size());
  for (int c = 0; c < train.dims(); ++c) {
    const double mean = train.X.col(c).mean();
    const double var = (train.X.col(c).array() - mean).square().sum() / n;
    if (var > 1e-24) {
      s.kept_columns.push_back(c);
    }
  }
  s.x_mean.resize(static_cast<Eigen::Index>(s.kept_columns.size()));
  s.x_std.resize(static_cast<Eigen::Index>(s.kept_columns.size()));
  for (std::size_t i = 0; i < s.kept_columns.size(); ++i) {
    const int c = s.kept_columns[i];
    const double mean = train.X.col(c).mean();
    const double var = (train.X.col(c).array() - mean).square().sum() / n;
    s.x_mean(static_cast<Eigen::Index>(i)) = mean;
    s.x_std(static_cast<Eigen::Index>(i)) = std::sqrt(var);
  }
  s.y_mean = train.y.mean();
  const double yvar = (train.y.array() - s.y_mean).square().sum() / n;
  s.y_std = yvar > 1e-24 ? std::sqrt(yvar) : 1.0;
  return s;
}

/// Applies training statistics in place (test splits are transformed with
/// the training standardizer). Applying twice is an error.
inline void standardize(Dataset& d, const Standardizer& s) {
  if (d.standardized) throw StateError("standardize: dataset is already standardized");
  Eigen::MatrixXd X(d.size(), static_cast<Eigen::Index>(s.kept_columns.size()));
  std::vector<std::string> names;
  for (std::size_t i = 0; i < s.kept_columns.size(); ++i) {
    const int c = s.kept_columns[i];
    X.col(static_cast<Eigen::Index>(i)) =
        (d.X.col(c).array() - s.x_mean(static_cast<Eigen::Index>(i))) /
        s.x_std(static_cast<Eigen::Index>(i));
    if (static_cast<std::size_t>(c) < d.column_names.size()) {
      names.push_back(d.column_names[static_cast<std::size_t>(c)]);
    }
  }
  if (!d.column_names.empty()) {
    names.push_back(d.column_names.back());
    d.column_names = std::move(names);
  }
  d.X = std::move(X);
  d.y = (d.y.array() - s.y_mean) / s.y_std;
  d.standardized = true;
}

/// Smooth 1-D mean with input-dependent noise: the noise standard deviation
/// ramps from 0.02 to 0.5 across the input range (a 25x spread), so binned
/// residual variances separate cleanly. Deterministic per seed.
inline Dataset synth_hetero(int n, std::uint64_t seed) {
  if (n < 1) throw UsageError("synth_hetero: n must be >= 1");
  SplitRng rng(seed);
  Dataset d;
  d.X.resize(n, 1);
  d.y.resize(n);
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform();
    const double noise_std = 0.02 + 0.48 / (1.0 + std::exp(-16.0 * (x - 0.6)));
    d.X(i, 0) = x;
    d.y(i) = std::sin(2.0 * M_PI * x) + noise_std * rng.normal();
  }
  d.name = "synth-hetero";
  d.column_names = {"x1", "y"};
  return d;
}

/// sin(2 pi x) plus homoscedastic noise on [0, 1].
inline Dataset synth_sine(int n, std::uint64_t seed, double noise_std = 0.1) {
  if (n < 1) throw UsageError("synth_sine: n must be >= 1");
  SplitRng rng(seed);
  Dataset d;
  d.X.resize(n, 1);
  d.y.resize(n);
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform();
    d.X(i, 0) = x;
    d.y(i) = std::sin(2.0 * M_PI * x) + noise_std * rng.normal();
  }
  d.name = "synth-sine";
  d.column_names = {"x1", "y"};
  return d;
}

/// y = w . x + b with optional noise; the weights are seed-deterministic.
inline Dataset synth_linear(int n, int dims, std::uint64_t seed, double noise_std = 0.0) {
  if (n < 1 || dims < 1) throw UsageError("synth_linear: need n >= 1 and dims >= 1");
  SplitRng rng(seed);
  Eigen::VectorXd w(dims);
  for (int c = 0; c < dims; ++c) w(c) = rng.uniform(-1.0, 1.0);
  const double b = rng.uniform(-0.5, 0.5);
  Dataset d;
  d.X.resize(n, dims);
  d.y.resize(n);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < dims; ++c) d.X(i, c) = rng.uniform(-1.0, 1.0);
    d.y(i) = d.X.row(i).dot(w) + b + (noise_std > 0.0 ? noise_std * rng.normal() : 0.0);
  }
  d.name = "synth-linear";
  return d;
}

}  // namespace dsmgp
