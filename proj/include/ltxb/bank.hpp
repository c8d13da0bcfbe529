#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ltxb/customize.hpp"

namespace ltxb {

inline constexpr int kRecordVersion = 1;

// Portable concept representation: the projected K and V rows for the
// (identifier, noun) token pair at every cross-attention layer, plus the
// provenance needed to refuse replay against a different backbone.
struct ConceptRecord {
  int record_version = kRecordVersion;
  std::string name;
  std::string identifier;
  std::string noun;
  int template_idx = templates::kExtractDefault;
  uint64_t backbone_hash = 0;
  uint64_t config_hash = 0;
  std::vector<KV> rows;  // per layer, k and v are [2 x d_latent]: identifier row, noun row

  int layers() const { return (int)rows.size(); }
  int d_latent() const { return rows.empty() ? 0 : rows[0].k.shape()[1]; }
};

// Runs the concept flow on the filled template and slices out the identifier
// and noun rows of each layer's K and V grids as plain constants.
ConceptRecord extract(const Backbone& bb, const Vocab& vocab, const ConceptState& state,
                      int template_idx = templates::kExtractDefault);

struct PositionSimilarity {
  struct Entry {
    int tpl_a, tpl_b, layer;
    double k_id, k_noun, v_id, v_noun;
  };
  std::vector<Entry> table;
  double mean = 0.0;

  double pair_mean(int tpl_a, int tpl_b) const;
};

// Extracts the concept once per template and reports pairwise cosine
// similarity of the stored rows, broken down per layer, grid and token.
PositionSimilarity position_similarity(const Backbone& bb, const Vocab& vocab,
                                       const ConceptState& state, const std::vector<int>& tpls);

// Directory of immutable concept records with a manifest of content hashes.
// Opening verifies every entry against its file; writers hold an exclusive
// lock for the save so concurrent processes cannot interleave manifests.
class ConceptBank {
 public:
  static ConceptBank open(const std::string& root);

  const std::string& root() const { return root_; }
  std::vector<std::string> names() const;
  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  void save(const ConceptRecord& rec, bool overwrite = false);
  ConceptRecord load(const std::string& name) const;

 private:
  explicit ConceptBank(std::string root) : root_(std::move(root)) {}
  std::string record_path(const std::string& name) const;
  void write_manifest() const;

  std::string root_;
  std::map<std::string, uint64_t> entries_;
};

}  // namespace ltxb
