#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>

namespace ltxb {

// Run configuration. Files use a TOML-style surface:
//
//   [pretrain]
//   steps = 4000        # comment
//   lr = 2e-3
//   augment = true
//   out = "backbone.ltxb"
//
// Values are typed (int, float, bool, string). CLI overrides go through
// set(). Every get_* records the resolved value (file value or default), so
// after a run resolved_json() echoes exactly the configuration that was in
// effect, and model_hash() fingerprints the model-defining sections.
class Config {
 public:
  using Value = std::variant<int64_t, double, bool, std::string>;

  static Config parse_file(const std::string& path);
  static Config parse_string(const std::string& text, const std::string& origin = "<string>");

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  int64_t get_int(const std::string& key, int64_t def) const;
  double get_float(const std::string& key, double def) const;
  bool get_bool(const std::string& key, bool def) const;
  std::string get_str(const std::string& key, const std::string& def) const;

  void set(const std::string& key, Value v) { kv_[key] = std::move(v); }
  void set_from_text(const std::string& key, const std::string& raw);

  // JSON object of every key resolved so far, sorted by key.
  std::string resolved_json() const;

  // Fingerprint of the model-defining configuration: every resolved key in
  // the seed/model/schedule/data/pretrain sections. Artifacts embed this and
  // consumers refuse mismatches unless forced.
  uint64_t model_hash() const;

  // keys present in the file but never resolved by the run
  std::string first_unused_key() const;

 private:
  static Value parse_value(const std::string& raw, const std::string& where);
  std::map<std::string, Value> kv_;
  mutable std::map<std::string, Value> resolved_;
  mutable std::map<std::string, bool> used_;
};

std::string value_to_json(const Config::Value& v);

}  // namespace ltxb
