#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dsmgp/common.hpp"
#include "dsmgp/gp.hpp"
#include "dsmgp/kernels.hpp"
#include "dsmgp/rng.hpp"

namespace dsmgp {

using TreeCount = boost::multiprecision::cpp_int;

/// Axis-aligned box in covariate space, half-open per dimension
/// ([lower, upper)) except where closed_right is set; the dataset bounding
/// box is closed on both sides in every dimension.
struct Region {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  std::vector<std::uint8_t> closed_right;

  int dims() const { return static_cast<int>(lower.size()); }

  bool contains(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    if (x.size() != lower.size()) throw UsageError("Region::contains: dimension mismatch");
    for (Eigen::Index d = 0; d < lower.size(); ++d) {
      if (x(d) < lower(d)) return false;
      if (x(d) > upper(d)) return false;
      if (x(d) == upper(d) && !closed_right[static_cast<std::size_t>(d)]) return false;
    }
    return true;
  }

  bool same_as(const Region& o) const {
    return lower == o.lower && upper == o.upper && closed_right == o.closed_right;
  }

  /// Interiors intersect iff the open intervals overlap in every dimension.
  bool interior_intersects(const Region& o) const {
    for (Eigen::Index d = 0; d < lower.size(); ++d) {
      if (!(lower(d) < o.upper(d) && o.lower(d) < upper(d))) return false;
    }
    return true;
  }

  static Region bounding_box(const Eigen::MatrixXd& X) {
    Region r;
    r.lower = X.colwise().minCoeff();
    r.upper = X.colwise().maxCoeff();
    r.closed_right.assign(static_cast<std::size_t>(X.cols()), 1);
    return r;
  }
};

enum class NodeKind { sum, product, leaf };

struct Node {
  NodeKind kind = NodeKind::leaf;
  std::vector<int> children;
  std::vector<double> log_weights;   ///< sum nodes: one per child, log-sum-exp = 0
  int split_dim = -1;                ///< product nodes
  std::vector<double> split_points;  ///< product nodes: interior boundaries, sorted
  Hyperparameters hp;                ///< leaf nodes
  std::optional<GpPosterior> posterior;  ///< leaf cache, set by fitting
};

/// Immutable tree of sum/product/leaf nodes. data_idx keeps each node's
/// training indices in canonical order: every product sorts its indices by
/// its split dimension before slicing, so nested leaves own contiguous,
/// order-aligned blocks wherever the split dimensions agree.
struct DsmgpGraph {
  std::vector<Node> nodes;
  std::vector<Region> scope;
  std::vector<std::vector<int>> data_idx;
  int root = 0;
  std::uint64_t seed = 0;

  bool posterior_weights = false;  ///< true once posterior_update has run
  std::vector<double> log_value;   ///< per-node upward-pass cache
  bool upward_cached = false;

  int num_nodes() const { return static_cast<int>(nodes.size()); }

  std::vector<int> leaves() const {
    std::vector<int> out;
    for (int i = 0; i < num_nodes(); ++i) {
      if (nodes[i].kind == NodeKind::leaf) out.push_back(i);
    }
    return out;
  }
};

struct BuildConfig {
  int sum_children = 2;       ///< K_S
  int product_children = 2;   ///< K_P
  int repetitions = 1;        ///< R, consecutive sum+product layers
  int min_observations = 100; ///< minN, a child with <= minN points becomes a leaf
  std::uint64_t seed = 0;
  Hyperparameters leaf_hp;    ///< initial (unfitted) hyperparameters for every leaf
};

namespace detail {

struct Builder {
  const Eigen::MatrixXd& X;
  const BuildConfig& cfg;
  DsmgpGraph g;

  int add_node(Node n, Region r, std::vector<int> idx) {
    g.nodes.push_back(std::move(n));
    g.scope.push_back(std::move(r));
    g.data_idx.push_back(std::move(idx));
    return static_cast<int>(g.nodes.size()) - 1;
  }

  int make_leaf(std::vector<int> idx, Region region) {
    Node n;
    n.kind = NodeKind::leaf;
    n.hp = cfg.leaf_hp.dims() == static_cast<int>(X.cols())
               ? cfg.leaf_hp
               : Hyperparameters::isotropic(static_cast<int>(X.cols()));
    return add_node(std::move(n), std::move(region), std::move(idx));
  }

  int make_sum(std::vector<int> idx, const Region& region, int depth, SplitRng rng) {
    Node n;
    n.kind = NodeKind::sum;
    n.log_weights.assign(static_cast<std::size_t>(cfg.sum_children),
                         -std::log(static_cast<double>(cfg.sum_children)));
    const int id = add_node(std::move(n), region, idx);
    for (int k = 0; k < cfg.sum_children; ++k) {
      const int child = make_product(idx, region, depth, rng.split(static_cast<std::uint64_t>(k)));
      g.nodes[id].children.push_back(child);
    }
    return id;
  }

  int make_product(std::vector<int> idx, const Region& region, int depth, SplitRng rng) {
    const int dims = static_cast<int>(X.cols());
    // Split dimension sampled proportionally to the per-dimension variance
    // of the local covariates.
    std::vector<double> variances(static_cast<std::size_t>(dims), 0.0);
    for (int d = 0; d < dims; ++d) {
      double mean = 0.0;
      for (int i : idx) mean += X(i, d);
      mean /= static_cast<double>(idx.size());
      double ss = 0.0;
      for (int i : idx) {
        const double c = X(i, d) - mean;
        ss += c * c;
      }
      variances[static_cast<std::size_t>(d)] = ss / static_cast<double>(idx.size());
    }
    const int d = rng.categorical(variances);

    // Canonical order: sort this node's indices along the split dimension.
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return X(a, d) < X(b, d); });
    std::vector<double> values(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) values[i] = X(idx[i], d);

    const double d_min = values.front();
    const double d_max = values.back();
    const double v = d_max - d_min;
    const double d_med = (values.size() % 2 == 1)
                             ? values[values.size() / 2]
                             : 0.5 * (values[values.size() / 2 - 1] + values[values.size() / 2]);

    // K_P - 1 split points from 0.5 (v Beta(2,2) + d_min) + 0.5 d_med,
    // resampled up to 10 times if any slice ends up empty; leftover empty
    // slices are merged into their neighbor.
    std::vector<double> splits;
    std::vector<int> counts;
    auto slice_counts = [&](const std::vector<double>& s) {
      std::vector<int> c;
      std::size_t lo = 0;
      for (double sp : s) {
        const std::size_t hi = static_cast<std::size_t>(
            std::lower_bound(values.begin(), values.end(), sp) - values.begin());
        c.push_back(static_cast<int>(hi - lo));
        lo = hi;
      }
      c.push_back(static_cast<int>(values.size() - lo));
      return c;
    };
    for (int attempt = 0; attempt < 10; ++attempt) {
      std::vector<double> s(static_cast<std::size_t>(cfg.product_children - 1));
      for (double& sk : s) sk = 0.5 * (v * rng.beta22() + d_min) + 0.5 * d_med;
      std::sort(s.begin(), s.end());
      counts = slice_counts(s);
      splits = std::move(s);
      if (std::all_of(counts.begin(), counts.end(), [](int c) { return c > 0; })) break;
    }
    // Merge empty slices: into the preceding sibling when one exists,
    // otherwise into the following one.
    for (std::size_t j = 0; j < counts.size();) {
      if (counts[j] > 0) {
        ++j;
        continue;
      }
      if (j > 0) {
        counts.erase(counts.begin() + static_cast<std::ptrdiff_t>(j));
        splits.erase(splits.begin() + static_cast<std::ptrdiff_t>(j) - 1);
      } else {
        counts[1] += counts[0];
        counts.erase(counts.begin());
        splits.erase(splits.begin());
      }
    }

    Node n;
    n.kind = NodeKind::product;
    n.split_dim = d;
    n.split_points = splits;
    const int id = add_node(std::move(n), region, idx);

    std::size_t lo = 0;
    for (std::size_t k = 0; k < counts.size(); ++k) {
      const std::size_t hi = lo + static_cast<std::size_t>(counts[k]);
      std::vector<int> child_idx(idx.begin() + static_cast<std::ptrdiff_t>(lo),
                                 idx.begin() + static_cast<std::ptrdiff_t>(hi));
      Region child_region = region;
      child_region.lower(d) = (k == 0) ? region.lower(d) : splits[k - 1];
      child_region.upper(d) = (k + 1 == counts.size()) ? region.upper(d) : splits[k];
      child_region.closed_right[static_cast<std::size_t>(d)] =
          (k + 1 == counts.size()) ? region.closed_right[static_cast<std::size_t>(d)] : 0;
      int child;
      if (static_cast<int>(child_idx.size()) <= cfg.min_observations || depth >= cfg.repetitions) {
        child = make_leaf(std::move(child_idx), std::move(child_region));
      } else {
        child = make_sum(std::move(child_idx), child_region, depth + 1,
                         rng.split(1000 + static_cast<std::uint64_t>(k)));
      }
      g.nodes[id].children.push_back(child);
      lo = hi;
    }
    return id;
  }
};

}  // namespace detail

/// Build an alternating sum/product tree over the covariates. Each sum has
/// K_S product children with uniform weights; each product samples a split
/// dimension and K_P - 1 split points; children become leaves once their
/// observation count is <= minN or R sum/product repetitions are reached.
/// Deterministic for a given seed.
inline DsmgpGraph build(const Eigen::MatrixXd& X, const BuildConfig& cfg) {
  if (cfg.sum_children < 1) throw UsageError("build: K_S must be >= 1");
  if (cfg.product_children < 2) throw UsageError("build: K_P must be >= 2");
  if (cfg.min_observations < 2) throw UsageError("build: minN must be >= 2");
  if (X.rows() < 1) throw UsageError("build: empty dataset");
  if (!X.allFinite()) throw UsageError("build: non-finite covariates");

  detail::Builder b{X, cfg, {}};
  b.g.seed = cfg.seed;
  Region box = Region::bounding_box(X);
  std::vector<int> all(static_cast<std::size_t>(X.rows()));
  std::iota(all.begin(), all.end(), 0);
  SplitRng rng(cfg.seed);
  if (X.rows() <= cfg.min_observations || cfg.repetitions == 0) {
    b.g.root = b.make_leaf(std::move(all), std::move(box));
  } else {
    b.g.root = b.make_sum(std::move(all), box, 1, rng.split(0));
  }
  return b.g;
}

struct Violation {
  int node = -1;
  std::string code;
  std::string message;
};

/// Report-only structural check: tree shape, completeness, decomposability,
/// weight normalization, product partitions (region and data), and, when
/// the covariates are supplied, agreement of data_idx with the node scopes.
inline std::vector<Violation> validate(const DsmgpGraph& g, const Eigen::MatrixXd* X = nullptr) {
  std::vector<Violation> out;
  auto flag = [&](int node, const char* code, std::string msg) {
    out.push_back({node, code, std::move(msg)});
  };
  const int n = g.num_nodes();
  if (n == 0) {
    flag(-1, "empty", "graph has no nodes");
    return out;
  }
  if (g.root < 0 || g.root >= n) {
    flag(-1, "root", "root id out of range");
    return out;
  }

  std::vector<int> parents(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    const Node& nd = g.nodes[i];
    for (int c : nd.children) {
      if (c < 0 || c >= n) {
        flag(i, "child-range", "child id out of range");
        continue;
      }
      parents[static_cast<std::size_t>(c)]++;
    }
    if (nd.kind == NodeKind::leaf && !nd.children.empty())
      flag(i, "leaf-children", "leaf has children");
    if (nd.kind != NodeKind::leaf && nd.children.empty())
      flag(i, "no-children", "internal node has no children");
    if (nd.kind == NodeKind::sum && nd.log_weights.size() != nd.children.size())
      flag(i, "weight-count", "sum weight count differs from child count");
  }
  for (int i = 0; i < n; ++i) {
    const int p = parents[static_cast<std::size_t>(i)];
    if (i == g.root ? p != 0 : p != 1)
      flag(i, "tree-shape", "node has " + std::to_string(p) + " parents");
  }

  for (int i = 0; i < n; ++i) {
    const Region& r = g.scope[static_cast<std::size_t>(i)];
    for (Eigen::Index d = 0; d < r.lower.size(); ++d) {
      if (!(r.lower(d) < r.upper(d)))
        flag(i, "empty-region", "region is empty in dimension " + std::to_string(d));
    }
  }

  for (int i = 0; i < n; ++i) {
    const Node& nd = g.nodes[i];
    if (nd.kind == NodeKind::sum) {
      for (int c : nd.children) {
        if (!g.scope[static_cast<std::size_t>(c)].same_as(g.scope[static_cast<std::size_t>(i)]))
          flag(i, "completeness", "sum child " + std::to_string(c) + " scope differs");
      }
      if (std::abs(log_sum_exp(nd.log_weights)) > 1e-12)
        flag(i, "weight-norm", "sum weights do not normalize");
    } else if (nd.kind == NodeKind::product) {
      for (std::size_t a = 0; a < nd.children.size(); ++a) {
        for (std::size_t b = a + 1; b < nd.children.size(); ++b) {
          const Region& ra = g.scope[static_cast<std::size_t>(nd.children[a])];
          const Region& rb = g.scope[static_cast<std::size_t>(nd.children[b])];
          if (ra.interior_intersects(rb))
            flag(i, "decomposability",
                 "children " + std::to_string(nd.children[a]) + " and " +
                     std::to_string(nd.children[b]) + " overlap");
        }
      }
      // Children partition the parent's data indices.
      std::vector<int> merged;
      for (int c : nd.children) {
        const auto& ci = g.data_idx[static_cast<std::size_t>(c)];
        merged.insert(merged.end(), ci.begin(), ci.end());
      }
      std::vector<int> parent_sorted = g.data_idx[static_cast<std::size_t>(i)];
      std::sort(merged.begin(), merged.end());
      std::sort(parent_sorted.begin(), parent_sorted.end());
      if (merged != parent_sorted) flag(i, "data-partition", "children do not partition data");
    }
  }

  if (X != nullptr) {
    for (int i = 0; i < n; ++i) {
      std::vector<int> expected;
      for (Eigen::Index r = 0; r < X->rows(); ++r) {
        if (g.scope[static_cast<std::size_t>(i)].contains(X->row(r).transpose()))
          expected.push_back(static_cast<int>(r));
      }
      std::vector<int> actual = g.data_idx[static_cast<std::size_t>(i)];
      std::sort(actual.begin(), actual.end());
      if (actual != expected) flag(i, "data-scope", "data_idx disagrees with region contents");
    }
  }
  return out;
}

/// Number of induced trees: leaf -> 1, product -> product of children,
/// sum -> sum of children. Arbitrary precision.
inline TreeCount count_induced_trees(const DsmgpGraph& g) {
  std::vector<TreeCount> memo(static_cast<std::size_t>(g.num_nodes()), TreeCount(-1));
  auto rec = [&](auto&& self, int id) -> const TreeCount& {
    TreeCount& m = memo[static_cast<std::size_t>(id)];
    if (m >= 0) return m;
    const Node& nd = g.nodes[static_cast<std::size_t>(id)];
    if (nd.kind == NodeKind::leaf) {
      m = 1;
    } else if (nd.kind == NodeKind::product) {
      m = 1;
      for (int c : nd.children) m *= self(self, c);
    } else {
      m = 0;
      for (int c : nd.children) m += self(self, c);
    }
    return m;
  };
  return rec(rec, g.root);
}

/// The product child responsible for a query coordinate: the unique child
/// whose half-open region contains it, with queries outside the node's
/// range clamped to the nearest (first/last) child.
inline int product_child_for(const DsmgpGraph& g, int product_id,
                             const Eigen::Ref<const Eigen::VectorXd>& x) {
  const Node& nd = g.nodes[static_cast<std::size_t>(product_id)];
  const double xd = x(nd.split_dim);
  for (std::size_t k = 0; k + 1 < nd.children.size(); ++k) {
    if (xd < g.scope[static_cast<std::size_t>(nd.children[k])].upper(nd.split_dim)) {
      return nd.children[k];
    }
  }
  return nd.children.back();
}

/// Child selection map for every product node (entries are -1 elsewhere).
inline std::vector<int> route(const DsmgpGraph& g, const Eigen::Ref<const Eigen::VectorXd>& x) {
  std::vector<int> sel(static_cast<std::size_t>(g.num_nodes()), -1);
  for (int i = 0; i < g.num_nodes(); ++i) {
    if (g.nodes[static_cast<std::size_t>(i)].kind == NodeKind::product) {
      sel[static_cast<std::size_t>(i)] = product_child_for(g, i, x);
    }
  }
  return sel;
}

}  // namespace dsmgp
