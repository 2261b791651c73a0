#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kgcg {

using EntityId = uint32_t;
using RelationId = uint32_t;
using TripleId = uint32_t;

// Reserved relation used for node self-loops; always id 0.
inline constexpr RelationId kSelfRelation = 0;
inline constexpr const char* kSelfRelationLabel = "SELF";

struct Triple {
  EntityId head;
  RelationId relation;
  EntityId tail;
};

struct GraphStats {
  size_t entity_count = 0;
  size_t relation_count = 0;
  size_t triple_count = 0;
  size_t max_out_degree = 0;
};

// Dense, label-unique relation inventory. SELF is always present at id 0.
// The atomic preset seeds the nine ATOMIC if-then relations in lexicographic
// order; unknown labels auto-register behind the seeded ones either way.
class RelationRegistry {
 public:
  enum class Preset { self_only, atomic };

  explicit RelationRegistry(Preset preset = Preset::atomic);

  // Registers the label if new; returns the existing id otherwise.
  RelationId add(std::string_view label);
  std::optional<RelationId> find(std::string_view label) const;
  const std::string& label(RelationId id) const { return labels_.at(id); }
  size_t size() const { return labels_.size(); }

 private:
  std::vector<std::string> labels_;
  std::unordered_map<std::string, RelationId> ids_;
};

// Interned entities plus relation-typed triples with a forward adjacency
// index. Single-writer while building; immutable (and freely shareable
// across threads) once construction is done.
class KnowledgeGraph {
 public:
  explicit KnowledgeGraph(RelationRegistry::Preset preset = RelationRegistry::Preset::atomic);

  // Idempotent: re-adding an existing triple returns its id and changes
  // nothing. Heads/tails are interned under text normalization; relation
  // labels are kept verbatim (ASCII-trimmed).
  TripleId add_triple(std::string_view head, std::string_view relation_label,
                      std::string_view tail);

  std::optional<EntityId> find_entity(std::string_view surface) const;
  const std::string& entity(EntityId id) const { return entities_.at(id); }
  size_t entity_count() const { return entities_.size(); }

  const RelationRegistry& relations() const { return relations_; }
  const std::vector<Triple>& triples() const { return triples_; }

  // Out-edges of an entity, sorted by (relation id, tail id).
  std::span<const std::pair<RelationId, EntityId>> out_edges(EntityId id) const;

  // At most max_fanout entries in (relation id, tail id) order; an entity
  // absent from the graph yields an empty sequence.
  std::vector<std::pair<RelationId, EntityId>> neighbors(std::string_view entity,
                                                         size_t max_fanout) const;

  GraphStats stats() const;

 private:
  EntityId intern(std::string_view surface);

  RelationRegistry relations_;
  std::vector<std::string> entities_;
  std::unordered_map<std::string, EntityId> entity_ids_;
  std::vector<Triple> triples_;
  std::unordered_map<uint64_t, std::vector<TripleId>> triple_ids_;  // by (head,tail) key
  std::vector<std::vector<std::pair<RelationId, EntityId>>> out_index_;
};

// TSV: one triple per line, head TAB relation TAB tail, UTF-8, no header,
// blank lines skipped. Loading starts from a SELF-only registry and
// auto-registers labels in file order. Dumping sorts by (head, relation,
// tail) ids.
KnowledgeGraph load_tsv(const std::string& path);
std::string dump_tsv_string(const KnowledgeGraph& graph);
void dump_tsv(const KnowledgeGraph& graph, const std::string& path);

}  // namespace kgcg
