#include "ltxb/bank.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <json.hpp>

#include "ltxb/hashing.hpp"
#include "ltxb/serialize.hpp"

namespace ltxb {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifestName = "manifest.json";

void check_name(const std::string& name) {
  require(!name.empty(), ErrorKind::argument, "concept name must not be empty");
  for (char c : name) {
    bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
              c == '_' || c == '-' || c == '.';
    require(ok && c != '/', ErrorKind::argument,
            "concept name '" + name + "' must use only letters, digits, '.', '_' or '-'");
  }
  require(name != "." && name != "..", ErrorKind::argument, "concept name '" + name + "' is reserved");
}

uint64_t parse_hex64(const std::string& s) { return std::strtoull(s.c_str(), nullptr, 16); }

std::map<std::string, uint64_t> parse_manifest(const std::string& path) {
  std::map<std::string, uint64_t> out;
  if (!fs::exists(path)) return out;
  std::vector<char> bytes = read_file_bytes(path);
  json m;
  try {
    m = json::parse(std::string(bytes.begin(), bytes.end()));
  } catch (const json::exception& e) {
    fail(ErrorKind::corruption, "bank manifest is not valid JSON: " + std::string(e.what()));
  }
  require(m.value("kind", "") == "concept_bank", ErrorKind::corruption,
          "bank manifest has the wrong kind tag");
  for (auto& [name, entry] : m.at("entries").items())
    out[name] = parse_hex64(entry.at("hash").get<std::string>());
  return out;
}

// Exclusive advisory lock over the bank directory, held for the whole save.
class DirLock {
 public:
  explicit DirLock(const std::string& path) {
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
    require(fd_ >= 0, ErrorKind::io, "cannot open bank lock file " + path);
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      fail(ErrorKind::io, "cannot lock bank directory via " + path);
    }
  }
  ~DirLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  int fd_;
};

double cosine(const std::vector<float>& a, size_t oa, const std::vector<float>& b, size_t ob,
              int d) {
  double dot = 0, na = 0, nb = 0;
  for (int i = 0; i < d; ++i) {
    double x = a[oa + i], y = b[ob + i];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

ConceptRecord extract(const Backbone& bb, const Vocab& vocab, const ConceptState& state,
                      int template_idx) {
  require(template_idx >= 0 && template_idx < templates::kCount, ErrorKind::template_id,
          "extract: template index out of range");
  std::string prompt =
      templates::subject_prompt(template_idx, state.spec.identifier, state.spec.noun);
  Tokenized tok = tokenize(vocab, prompt, bb.enc_cfg.max_len);
  std::vector<KV> kv = state.flow(bb, vocab, tok);
  templates::Span sp = templates::span(template_idx);

  ConceptRecord rec;
  rec.name = state.spec.name;
  rec.identifier = state.spec.identifier;
  rec.noun = state.spec.noun;
  rec.template_idx = template_idx;
  rec.backbone_hash = state.backbone_hash;
  rec.config_hash = state.config_hash;

  int d = bb.proj.d_latent;
  for (auto& layer : kv) {
    auto slice = [&](const Tensor& grid) {
      const auto& src = grid.data();
      std::vector<float> rows((size_t)2 * d);
      std::copy_n(src.begin() + (size_t)sp.article_pos * d, d, rows.begin());
      std::copy_n(src.begin() + (size_t)sp.noun_pos * d, d, rows.begin() + d);
      return Tensor::from({2, d}, std::move(rows));
    };
    rec.rows.push_back({slice(layer.k), slice(layer.v)});
  }
  return rec;
}

double PositionSimilarity::pair_mean(int tpl_a, int tpl_b) const {
  double acc = 0;
  int n = 0;
  for (const auto& e : table)
    if ((e.tpl_a == tpl_a && e.tpl_b == tpl_b) || (e.tpl_a == tpl_b && e.tpl_b == tpl_a)) {
      acc += e.k_id + e.k_noun + e.v_id + e.v_noun;
      n += 4;
    }
  require(n > 0, ErrorKind::not_found, "no similarity entries for the requested template pair");
  return acc / n;
}

PositionSimilarity position_similarity(const Backbone& bb, const Vocab& vocab,
                                       const ConceptState& state, const std::vector<int>& tpls) {
  require(tpls.size() >= 2, ErrorKind::contract,
          "position_similarity needs at least two templates");
  std::vector<ConceptRecord> recs;
  recs.reserve(tpls.size());
  for (int t : tpls) recs.push_back(extract(bb, vocab, state, t));

  PositionSimilarity out;
  int d = bb.proj.d_latent;
  double acc = 0;
  for (size_t i = 0; i < recs.size(); ++i)
    for (size_t j = i + 1; j < recs.size(); ++j)
      for (int l = 0; l < recs[i].layers(); ++l) {
        const auto& a = recs[i].rows[l];
        const auto& b = recs[j].rows[l];
        PositionSimilarity::Entry e;
        e.tpl_a = tpls[i];
        e.tpl_b = tpls[j];
        e.layer = l;
        e.k_id = cosine(a.k.data(), 0, b.k.data(), 0, d);
        e.k_noun = cosine(a.k.data(), d, b.k.data(), d, d);
        e.v_id = cosine(a.v.data(), 0, b.v.data(), 0, d);
        e.v_noun = cosine(a.v.data(), d, b.v.data(), d, d);
        acc += e.k_id + e.k_noun + e.v_id + e.v_noun;
        out.table.push_back(e);
      }
  out.mean = out.table.empty() ? 0.0 : acc / ((double)out.table.size() * 4.0);
  return out;
}

ConceptBank ConceptBank::open(const std::string& root) {
  fs::create_directories(root);
  ConceptBank bank(root);
  bank.entries_ = parse_manifest((fs::path(root) / kManifestName).string());
  for (const auto& [name, hash] : bank.entries_) {
    std::string path = bank.record_path(name);
    require(fs::exists(path), ErrorKind::corruption,
            "bank manifest lists '" + name + "' but its record file is missing");
    uint64_t file_hash = read_tensor_file_hash(path);
    require(file_hash == hash, ErrorKind::corruption,
            "record file for '" + name + "' does not match the manifest hash");
  }
  return bank;
}

std::string ConceptBank::record_path(const std::string& name) const {
  return (fs::path(root_) / (name + ".ltxb")).string();
}

std::vector<std::string> ConceptBank::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

void ConceptBank::write_manifest() const {
  json m;
  m["kind"] = "concept_bank";
  m["entries"] = json::object();
  for (const auto& [name, hash] : entries_) {
    m["entries"][name] = {{"file", name + ".ltxb"}, {"hash", hash_hex(hash)}};
  }
  std::string text = m.dump(2);
  text.push_back('\n');
  fs::path final_path = fs::path(root_) / kManifestName;
  fs::path tmp_path = fs::path(root_) / (std::string(kManifestName) + ".tmp");
  write_file_bytes(tmp_path.string(), std::vector<char>(text.begin(), text.end()));
  fs::rename(tmp_path, final_path);
}

void ConceptBank::save(const ConceptRecord& rec, bool overwrite) {
  check_name(rec.name);
  require(rec.record_version == kRecordVersion, ErrorKind::version,
          "cannot save a record with an unknown format version");
  require(!rec.rows.empty(), ErrorKind::contract, "record has no layers");
  int d = rec.d_latent();
  for (const auto& layer : rec.rows) {
    require(layer.k.shape() == Shape{2, d} && layer.v.shape() == Shape{2, d},
            ErrorKind::dimension, "record rows must be [2 x d_latent] per layer");
  }

  DirLock lock((fs::path(root_) / ".lock").string());
  // Merge entries written by other processes while we were not looking.
  entries_ = parse_manifest((fs::path(root_) / kManifestName).string());
  require(overwrite || !entries_.count(rec.name), ErrorKind::contract,
          "bank already holds a concept named '" + rec.name + "'");

  TensorFile tf;
  json meta;
  meta["kind"] = "concept_record";
  meta["record_version"] = rec.record_version;
  meta["name"] = rec.name;
  meta["identifier"] = rec.identifier;
  meta["noun"] = rec.noun;
  meta["template_idx"] = rec.template_idx;
  meta["backbone_hash"] = hash_hex(rec.backbone_hash);
  meta["config_hash"] = hash_hex(rec.config_hash);
  meta["layers"] = rec.layers();
  tf.metadata_json = meta.dump();
  for (int l = 0; l < rec.layers(); ++l) {
    std::string base = "rec.l" + std::to_string(l);
    tf.tensors.emplace_back(base + ".k", rec.rows[l].k);
    tf.tensors.emplace_back(base + ".v", rec.rows[l].v);
  }
  uint64_t hash = write_tensor_file(record_path(rec.name), tf);
  entries_[rec.name] = hash;
  write_manifest();
}

ConceptRecord ConceptBank::load(const std::string& name) const {
  auto it = entries_.find(name);
  require(it != entries_.end(), ErrorKind::not_found, "no concept named '" + name + "' in the bank");
  uint64_t hash = 0;
  TensorFile tf = read_tensor_file(record_path(name), &hash);
  require(hash == it->second, ErrorKind::corruption,
          "record file for '" + name + "' does not match the manifest hash");

  json meta;
  try {
    meta = json::parse(tf.metadata_json);
  } catch (const json::exception& e) {
    fail(ErrorKind::corruption, "record metadata is not valid JSON: " + std::string(e.what()));
  }
  require(meta.value("kind", "") == "concept_record", ErrorKind::corruption,
          "record file has the wrong kind tag");
  int version = meta.value("record_version", -1);
  require(version == kRecordVersion, ErrorKind::version,
          "record version " + std::to_string(version) + " is not supported");

  ConceptRecord rec;
  rec.record_version = version;
  rec.name = meta.at("name").get<std::string>();
  rec.identifier = meta.at("identifier").get<std::string>();
  rec.noun = meta.at("noun").get<std::string>();
  rec.template_idx = meta.at("template_idx").get<int>();
  rec.backbone_hash = parse_hex64(meta.at("backbone_hash").get<std::string>());
  rec.config_hash = parse_hex64(meta.at("config_hash").get<std::string>());
  int layers = meta.at("layers").get<int>();
  for (int l = 0; l < layers; ++l) {
    std::string base = "rec.l" + std::to_string(l);
    const Tensor* k = tf.find(base + ".k");
    const Tensor* v = tf.find(base + ".v");
    require(k && v, ErrorKind::corruption, "record is missing tensors for layer " + std::to_string(l));
    require(k->shape()[0] == 2 && v->shape()[0] == 2 && k->shape() == v->shape(),
            ErrorKind::corruption, "record tensors have the wrong shape");
    rec.rows.push_back({*k, *v});
  }
  return rec;
}

}  // namespace ltxb
