#include "kgcg/kg.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "kgcg/error.hpp"
#include "kgcg/text.hpp"

namespace kgcg {

namespace {

std::string trim_ascii(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r' || s[b] == '\n')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r' || s[e - 1] == '\n')) --e;
  return std::string(s.substr(b, e - b));
}

uint64_t pair_key(EntityId head, EntityId tail) {
  return (static_cast<uint64_t>(head) << 32) | tail;
}

}  // namespace

RelationRegistry::RelationRegistry(Preset preset) {
  add(kSelfRelationLabel);
  if (preset == Preset::atomic) {
    // Lexicographic; SELF sorts first, so ids stay dense and stable.
    for (const char* label : {"oEffect", "oReact", "oWant", "xAttr", "xEffect", "xIntent",
                              "xNeed", "xReact", "xWant"}) {
      add(label);
    }
  }
}

RelationId RelationRegistry::add(std::string_view label) {
  require(!label.empty(), "relation label must be non-empty");
  auto it = ids_.find(std::string(label));
  if (it != ids_.end()) return it->second;
  RelationId id = static_cast<RelationId>(labels_.size());
  labels_.emplace_back(label);
  ids_.emplace(labels_.back(), id);
  return id;
}

std::optional<RelationId> RelationRegistry::find(std::string_view label) const {
  auto it = ids_.find(std::string(label));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

KnowledgeGraph::KnowledgeGraph(RelationRegistry::Preset preset) : relations_(preset) {}

EntityId KnowledgeGraph::intern(std::string_view surface) {
  std::string norm = normalize(surface);
  require(!norm.empty(), "entity surface form must be non-empty");
  auto it = entity_ids_.find(norm);
  if (it != entity_ids_.end()) return it->second;
  EntityId id = static_cast<EntityId>(entities_.size());
  entities_.push_back(norm);
  entity_ids_.emplace(std::move(norm), id);
  out_index_.emplace_back();
  return id;
}

TripleId KnowledgeGraph::add_triple(std::string_view head, std::string_view relation_label,
                                    std::string_view tail) {
  std::string rel = trim_ascii(relation_label);
  require(!rel.empty(), "relation label must be non-empty");
  EntityId h = intern(head);
  EntityId t = intern(tail);
  RelationId r = relations_.add(rel);

  auto& ids = triple_ids_[pair_key(h, t)];
  for (TripleId id : ids) {
    if (triples_[id].relation == r) return id;
  }
  TripleId id = static_cast<TripleId>(triples_.size());
  triples_.push_back(Triple{h, r, t});
  ids.push_back(id);

  auto& edges = out_index_[h];
  auto pos = std::lower_bound(edges.begin(), edges.end(), std::pair<RelationId, EntityId>{r, t});
  edges.insert(pos, {r, t});
  return id;
}

std::optional<EntityId> KnowledgeGraph::find_entity(std::string_view surface) const {
  auto it = entity_ids_.find(normalize(surface));
  if (it == entity_ids_.end()) return std::nullopt;
  return it->second;
}

std::span<const std::pair<RelationId, EntityId>> KnowledgeGraph::out_edges(EntityId id) const {
  return out_index_.at(id);
}

std::vector<std::pair<RelationId, EntityId>> KnowledgeGraph::neighbors(std::string_view entity,
                                                                       size_t max_fanout) const {
  auto id = find_entity(entity);
  if (!id) return {};
  auto edges = out_edges(*id);
  size_t n = std::min(max_fanout, edges.size());
  return {edges.begin(), edges.begin() + static_cast<ptrdiff_t>(n)};
}

GraphStats KnowledgeGraph::stats() const {
  GraphStats s;
  s.entity_count = entities_.size();
  s.relation_count = relations_.size();
  s.triple_count = triples_.size();
  for (const auto& edges : out_index_) s.max_out_degree = std::max(s.max_out_degree, edges.size());
  return s;
}

KnowledgeGraph load_tsv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open KG file: " + path);
  KnowledgeGraph graph(RelationRegistry::Preset::self_only);
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim_ascii(line).empty()) continue;

    size_t t1 = line.find('\t');
    size_t t2 = (t1 == std::string::npos) ? std::string::npos : line.find('\t', t1 + 1);
    size_t t3 = (t2 == std::string::npos) ? std::string::npos : line.find('\t', t2 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos || t3 != std::string::npos) {
      fail("KG file " + path + " line " + std::to_string(line_no) +
           ": expected exactly 3 tab-separated fields");
    }
    std::string head = line.substr(0, t1);
    std::string rel = line.substr(t1 + 1, t2 - t1 - 1);
    std::string tail = line.substr(t2 + 1);
    if (head.empty() || rel.empty() || tail.empty()) {
      fail("KG file " + path + " line " + std::to_string(line_no) + ": empty field");
    }
    try {
      graph.add_triple(head, rel, tail);
    } catch (const Error& e) {
      fail("KG file " + path + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return graph;
}

std::string dump_tsv_string(const KnowledgeGraph& graph) {
  std::vector<Triple> sorted = graph.triples();
  std::sort(sorted.begin(), sorted.end(), [](const Triple& a, const Triple& b) {
    if (a.head != b.head) return a.head < b.head;
    if (a.relation != b.relation) return a.relation < b.relation;
    return a.tail < b.tail;
  });
  std::string out;
  for (const Triple& t : sorted) {
    out += graph.entity(t.head);
    out += '\t';
    out += graph.relations().label(t.relation);
    out += '\t';
    out += graph.entity(t.tail);
    out += '\n';
  }
  return out;
}

void dump_tsv(const KnowledgeGraph& graph, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot write KG file: " + path);
  out << dump_tsv_string(graph);
  require(out.good(), "failed writing KG file: " + path);
}

}  // namespace kgcg
