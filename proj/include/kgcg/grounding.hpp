#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kgcg/kg.hpp"

namespace kgcg {

// Ordered, normalized, duplicate-free concept list. Never empty.
struct ConceptSet {
  std::vector<std::string> concepts;
};

// Normalizes, drops duplicates (keeping first occurrence), rejects empty
// input or concepts that normalize to the empty string.
ConceptSet make_concept_set(const std::vector<std::string>& raw);

enum class NodeOrigin : uint8_t { concept_node, retrieved };

struct SubgraphNode {
  std::string surface;
  NodeOrigin origin = NodeOrigin::concept_node;
  // For concept nodes: the concept's own index. For retrieved nodes: the
  // concept whose expansion pulled them in.
  std::optional<uint32_t> source_concept;
};

struct SubgraphEdge {
  uint32_t src = 0;
  RelationId relation = 0;
  uint32_t dst = 0;

  bool operator==(const SubgraphEdge&) const = default;
};

// Grounded neighborhood for one concept set. The first |concepts| nodes are
// always the concept nodes in concept order; every node carries a SELF loop;
// node count never exceeds node_budget.
struct ConceptSubgraph {
  std::vector<SubgraphNode> nodes;
  std::vector<SubgraphEdge> edges;
  size_t node_budget = 0;
};

// Tiered entity linking: exact normalized match, else substring containment,
// else edit distance <= 1. Each tier sorted by entity id, capped at
// max_candidates; later tiers are consulted only when earlier ones are empty.
std::vector<EntityId> match_entity(const std::string& concept_text, const KnowledgeGraph& graph,
                                   size_t max_candidates);

// Deterministic subgraph extraction: one concept node per concept, direct
// KG edges between matched entities of concept pairs, then round-robin
// neighbor expansion until fanout or node_budget is exhausted, then SELF
// loops on every node.
ConceptSubgraph build_subgraph(const ConceptSet& cs, const KnowledgeGraph& graph,
                               size_t node_budget, size_t fanout);

// Ablation helper: same nodes, all non-SELF edges removed.
ConceptSubgraph strip_to_self_loops(const ConceptSubgraph& sg);

// JSON rendering used by the `ground` subcommand.
std::string subgraph_to_json(const ConceptSubgraph& sg, const KnowledgeGraph& graph);

}  // namespace kgcg
