#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsmgp/common.hpp"
#include "dsmgp/structure.hpp"

namespace dsmgp {

inline constexpr int graph_format_version = 1;

/// Versioned JSON document: node list with regions, log-weights,
/// hyperparameters, and data index sets. Fitted posteriors are not
/// serialized; reload and refit the leaves.
inline nlohmann::json graph_to_json(const DsmgpGraph& g) {
  nlohmann::json doc;
  doc["format"] = "dsmgp-graph";
  doc["version"] = graph_format_version;
  doc["library_version"] = library_version;
  doc["seed"] = g.seed;
  doc["root"] = g.root;
  doc["posterior_weights"] = g.posterior_weights;
  nlohmann::json nodes = nlohmann::json::array();
  for (int i = 0; i < g.num_nodes(); ++i) {
    const Node& nd = g.nodes[static_cast<std::size_t>(i)];
    const Region& r = g.scope[static_cast<std::size_t>(i)];
    nlohmann::json jn;
    switch (nd.kind) {
      case NodeKind::sum: jn["kind"] = "sum"; break;
      case NodeKind::product: jn["kind"] = "product"; break;
      case NodeKind::leaf: jn["kind"] = "leaf"; break;
    }
    jn["children"] = nd.children;
    if (nd.kind == NodeKind::sum) jn["log_weights"] = nd.log_weights;
    if (nd.kind == NodeKind::product) {
      jn["split_dim"] = nd.split_dim;
      jn["split_points"] = nd.split_points;
    }
    if (nd.kind == NodeKind::leaf) {
      jn["hp"] = {{"log_lengthscales",
                   std::vector<double>(nd.hp.log_lengthscales.begin(), nd.hp.log_lengthscales.end())},
                  {"log_signal_var", nd.hp.log_signal_var},
                  {"log_noise_var", nd.hp.log_noise_var}};
    }
    jn["region"] = {{"lower", std::vector<double>(r.lower.begin(), r.lower.end())},
                    {"upper", std::vector<double>(r.upper.begin(), r.upper.end())},
                    {"closed_right", r.closed_right}};
    jn["data_idx"] = g.data_idx[static_cast<std::size_t>(i)];
    nodes.push_back(std::move(jn));
  }
  doc["nodes"] = std::move(nodes);
  return doc;
}

inline DsmgpGraph graph_from_json(const nlohmann::json& doc) {
  if (!doc.contains("format") || doc.at("format") != "dsmgp-graph") {
    throw UsageError("graph_from_json: not a dsmgp-graph document");
  }
  if (doc.at("version").get<int>() != graph_format_version) {
    throw UsageError("graph_from_json: unsupported format version");
  }
  DsmgpGraph g;
  g.seed = doc.value("seed", std::uint64_t{0});
  g.root = doc.at("root").get<int>();
  g.posterior_weights = doc.value("posterior_weights", false);
  for (const auto& jn : doc.at("nodes")) {
    Node nd;
    const std::string kind = jn.at("kind").get<std::string>();
    if (kind == "sum") nd.kind = NodeKind::sum;
    else if (kind == "product") nd.kind = NodeKind::product;
    else if (kind == "leaf") nd.kind = NodeKind::leaf;
    else throw UsageError("graph_from_json: unknown node kind '" + kind + "'");
    nd.children = jn.at("children").get<std::vector<int>>();
    if (nd.kind == NodeKind::sum) {
      nd.log_weights = jn.at("log_weights").get<std::vector<double>>();
    }
    if (nd.kind == NodeKind::product) {
      nd.split_dim = jn.at("split_dim").get<int>();
      nd.split_points = jn.at("split_points").get<std::vector<double>>();
    }
    if (nd.kind == NodeKind::leaf) {
      const auto& jh = jn.at("hp");
      const auto ls = jh.at("log_lengthscales").get<std::vector<double>>();
      nd.hp = Hyperparameters(
          Eigen::Map<const Eigen::VectorXd>(ls.data(), static_cast<Eigen::Index>(ls.size())),
          jh.at("log_signal_var").get<double>(), jh.at("log_noise_var").get<double>());
    }
    Region r;
    const auto& jr = jn.at("region");
    const auto lo = jr.at("lower").get<std::vector<double>>();
    const auto hi = jr.at("upper").get<std::vector<double>>();
    r.lower = Eigen::Map<const Eigen::VectorXd>(lo.data(), static_cast<Eigen::Index>(lo.size()));
    r.upper = Eigen::Map<const Eigen::VectorXd>(hi.data(), static_cast<Eigen::Index>(hi.size()));
    r.closed_right = jr.at("closed_right").get<std::vector<std::uint8_t>>();
    g.nodes.push_back(std::move(nd));
    g.scope.push_back(std::move(r));
    g.data_idx.push_back(jn.at("data_idx").get<std::vector<int>>());
  }
  if (g.root < 0 || g.root >= g.num_nodes()) throw UsageError("graph_from_json: bad root id");
  return g;
}

inline void save_graph(const DsmgpGraph& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw UsageError("save_graph: cannot open " + path);
  out << graph_to_json(g).dump(2) << "\n";
}

inline DsmgpGraph load_graph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("load_graph: cannot open " + path);
  nlohmann::json doc;
  in >> doc;
  return graph_from_json(doc);
}

}  // namespace dsmgp
