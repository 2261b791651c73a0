#include "kgcg/grounding.hpp"

#include <algorithm>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "kgcg/error.hpp"
#include "kgcg/text.hpp"

namespace kgcg {

namespace {

// Candidate cap for entity linking inside build_subgraph.
constexpr size_t kMaxMatchCandidates = 8;

uint64_t edge_key(const SubgraphEdge& e) {
  return (static_cast<uint64_t>(e.src) << 40) | (static_cast<uint64_t>(e.relation) << 20) | e.dst;
}

}  // namespace

ConceptSet make_concept_set(const std::vector<std::string>& raw) {
  require(!raw.empty(), "concept set must be non-empty");
  ConceptSet cs;
  std::unordered_set<std::string> seen;
  for (const std::string& c : raw) {
    std::string norm = normalize(c);
    require(!norm.empty(), "concept normalizes to empty string: '" + c + "'");
    if (seen.insert(norm).second) cs.concepts.push_back(std::move(norm));
  }
  return cs;
}

std::vector<EntityId> match_entity(const std::string& concept_text, const KnowledgeGraph& graph,
                                   size_t max_candidates) {
  if (concept_text.empty() || max_candidates == 0) return {};

  if (auto exact = graph.find_entity(concept_text)) return {*exact};

  std::vector<EntityId> out;
  for (EntityId id = 0; id < graph.entity_count(); ++id) {
    if (graph.entity(id).find(concept_text) != std::string::npos) {
      out.push_back(id);
      if (out.size() == max_candidates) return out;
    }
  }
  if (!out.empty()) return out;

  for (EntityId id = 0; id < graph.entity_count(); ++id) {
    if (edit_distance(concept_text, graph.entity(id)) <= 1) {
      out.push_back(id);
      if (out.size() == max_candidates) return out;
    }
  }
  return out;
}

ConceptSubgraph build_subgraph(const ConceptSet& cs, const KnowledgeGraph& graph,
                               size_t node_budget, size_t fanout) {
  const size_t n_concepts = cs.concepts.size();
  require(node_budget >= n_concepts,
          "node_budget " + std::to_string(node_budget) + " < concept count " +
              std::to_string(n_concepts));

  ConceptSubgraph sg;
  sg.node_budget = node_budget;
  for (size_t i = 0; i < n_concepts; ++i) {
    sg.nodes.push_back(SubgraphNode{cs.concepts[i], NodeOrigin::concept_node,
                                    static_cast<uint32_t>(i)});
  }

  std::vector<std::vector<EntityId>> matches(n_concepts);
  std::unordered_map<EntityId, uint32_t> entity_to_concept;  // first concept claiming it
  for (size_t i = 0; i < n_concepts; ++i) {
    matches[i] = match_entity(cs.concepts[i], graph, kMaxMatchCandidates);
    for (EntityId e : matches[i]) entity_to_concept.emplace(e, static_cast<uint32_t>(i));
  }

  std::unordered_set<uint64_t> edge_seen;
  auto push_edge = [&](uint32_t src, RelationId rel, uint32_t dst) {
    SubgraphEdge e{src, rel, dst};
    if (edge_seen.insert(edge_key(e)).second) sg.edges.push_back(e);
  };

  // Direct KG links between matched entities of distinct concepts.
  for (size_t i = 0; i < n_concepts; ++i) {
    for (size_t j = 0; j < n_concepts; ++j) {
      if (i == j) continue;
      std::unordered_set<EntityId> targets(matches[j].begin(), matches[j].end());
      for (EntityId ei : matches[i]) {
        for (const auto& [rel, tail] : graph.out_edges(ei)) {
          if (targets.count(tail)) {
            push_edge(static_cast<uint32_t>(i), rel, static_cast<uint32_t>(j));
          }
        }
      }
    }
  }

  // Neighbor expansion, round-robin over concepts so budget is shared.
  std::vector<std::vector<std::pair<RelationId, EntityId>>> candidates(n_concepts);
  for (size_t i = 0; i < n_concepts; ++i) {
    std::unordered_set<uint64_t> seen;
    for (EntityId ei : matches[i]) {
      for (const auto& [rel, tail] : graph.out_edges(ei)) {
        if (entity_to_concept.count(tail)) continue;  // covered by direct links
        uint64_t key = (static_cast<uint64_t>(rel) << 32) | tail;
        if (seen.insert(key).second) candidates[i].emplace_back(rel, tail);
      }
    }
  }

  std::unordered_map<EntityId, uint32_t> retrieved_node;
  std::vector<size_t> cursor(n_concepts, 0);
  std::vector<size_t> taken(n_concepts, 0);
  bool progressed = true;
  while (progressed) {
    progressed = false;
    for (size_t i = 0; i < n_concepts; ++i) {
      if (taken[i] >= fanout || cursor[i] >= candidates[i].size()) continue;
      auto [rel, tail] = candidates[i][cursor[i]];
      auto it = retrieved_node.find(tail);
      if (it == retrieved_node.end()) {
        if (sg.nodes.size() >= node_budget) {
          ++cursor[i];  // budget full, nothing more to append for this candidate
          progressed = true;
          continue;
        }
        uint32_t idx = static_cast<uint32_t>(sg.nodes.size());
        sg.nodes.push_back(SubgraphNode{graph.entity(tail), NodeOrigin::retrieved,
                                        static_cast<uint32_t>(i)});
        it = retrieved_node.emplace(tail, idx).first;
      }
      push_edge(static_cast<uint32_t>(i), rel, it->second);
      ++cursor[i];
      ++taken[i];
      progressed = true;
    }
  }

  for (uint32_t k = 0; k < sg.nodes.size(); ++k) push_edge(k, kSelfRelation, k);
  return sg;
}

ConceptSubgraph strip_to_self_loops(const ConceptSubgraph& sg) {
  ConceptSubgraph out;
  out.nodes = sg.nodes;
  out.node_budget = sg.node_budget;
  for (uint32_t k = 0; k < out.nodes.size(); ++k) {
    out.edges.push_back(SubgraphEdge{k, kSelfRelation, k});
  }
  return out;
}

std::string subgraph_to_json(const ConceptSubgraph& sg, const KnowledgeGraph& graph) {
  nlohmann::json j;
  j["node_budget"] = sg.node_budget;
  j["nodes"] = nlohmann::json::array();
  for (const SubgraphNode& n : sg.nodes) {
    nlohmann::json node;
    node["surface"] = n.surface;
    node["origin"] = n.origin == NodeOrigin::concept_node ? "CONCEPT" : "RETRIEVED";
    if (n.source_concept) {
      node["source_concept"] = *n.source_concept;
    } else {
      node["source_concept"] = nullptr;
    }
    j["nodes"].push_back(node);
  }
  j["edges"] = nlohmann::json::array();
  for (const SubgraphEdge& e : sg.edges) {
    j["edges"].push_back({{"src", e.src},
                          {"relation", graph.relations().label(e.relation)},
                          {"dst", e.dst}});
  }
  return j.dump(2);
}

}  // namespace kgcg
