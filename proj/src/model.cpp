#include "ltxb/model.hpp"

#include <json.hpp>

#include "ltxb/hashing.hpp"
#include "ltxb/serialize.hpp"

namespace ltxb {

using nlohmann::json;

Backbone::Backbone(EncoderConfig ec, DenoiserConfig dc, int T)
    : enc_cfg(ec), den_cfg(dc), enc(ec), den(dc), sch(Schedule::cosine(T)) {
  require(dc.d_latent > 0 && ec.d_model > 0, ErrorKind::config, "invalid stack configuration");
  require(dc.t_levels == T + 1, ErrorKind::config,
          "denoiser level table must cover the schedule");
  proj.d_in = ec.d_model;
  proj.d_latent = dc.d_latent;
}

Backbone Backbone::from_config(const Config& cfg, const Vocab& vocab) {
  EncoderConfig ec;
  ec.vocab_size = vocab.size();
  ec.d_model = (int)cfg.get_int("model.d_model", 64);
  ec.max_len = (int)cfg.get_int("model.max_len", 16);
  ec.layers = (int)cfg.get_int("model.enc_layers", 2);
  ec.heads = (int)cfg.get_int("model.heads", 4);
  ec.mlp_mult = (int)cfg.get_int("model.mlp_mult", 4);
  ec.causal = cfg.get_bool("model.causal", false);

  DenoiserConfig dc;
  dc.h = dc.w = (int)cfg.get_int("model.grid", 32);
  dc.ch = (int)cfg.get_int("model.ch", 3);
  dc.w1 = (int)cfg.get_int("model.w1", 32);
  dc.w2 = (int)cfg.get_int("model.w2", 64);
  dc.heads = ec.heads;
  dc.d_latent = (int)cfg.get_int("model.d_latent", 64);
  dc.temb_dim = (int)cfg.get_int("model.temb", 128);
  dc.max_len = ec.max_len;

  int T = (int)cfg.get_int("schedule.T", 100);
  dc.t_levels = T + 1;
  return Backbone(ec, dc, T);
}

void Backbone::init(Rng& rng) {
  Rng er = rng.child("encoder");
  Rng pr = rng.child("projections");
  Rng dr = rng.child("denoiser");
  enc.init(er);
  proj.init(pr);
  den.init(dr);
}

Params Backbone::all_params() {
  Params out;
  for (auto& [n, t] : enc.params().items()) out.add(n, t);
  proj.collect(out);
  for (auto& [n, t] : den.params().items()) out.add(n, t);
  return out;
}

void Backbone::set_trainable(bool v) { all_params().set_trainable(v); }

void Backbone::save(const std::string& path) const {
  json meta;
  meta["kind"] = "backbone";
  meta["model_hash"] = hash_hex(model_hash);
  meta["trained_steps"] = trained_steps;
  meta["T"] = sch.T;
  meta["enc"] = {{"vocab_size", enc_cfg.vocab_size}, {"d_model", enc_cfg.d_model},
                 {"max_len", enc_cfg.max_len},       {"layers", enc_cfg.layers},
                 {"heads", enc_cfg.heads},           {"mlp_mult", enc_cfg.mlp_mult},
                 {"causal", enc_cfg.causal}};
  meta["den"] = {{"h", den_cfg.h},       {"w", den_cfg.w},
                 {"ch", den_cfg.ch},     {"w1", den_cfg.w1},
                 {"w2", den_cfg.w2},     {"heads", den_cfg.heads},
                 {"d_latent", den_cfg.d_latent}, {"temb", den_cfg.temb_dim},
                 {"max_len", den_cfg.max_len}};

  TensorFile tf;
  tf.metadata_json = meta.dump();
  const_cast<Backbone*>(this)->all_params().save_into(tf);
  write_tensor_file(path, tf);
}

Backbone Backbone::load(const std::string& path) {
  TensorFile tf = read_tensor_file(path);
  json meta = json::parse(tf.metadata_json, nullptr, false);
  require(!meta.is_discarded() && meta.value("kind", "") == "backbone", ErrorKind::compatibility,
          "'" + path + "' is not a backbone bundle");

  EncoderConfig ec;
  ec.vocab_size = meta["enc"]["vocab_size"];
  ec.d_model = meta["enc"]["d_model"];
  ec.max_len = meta["enc"]["max_len"];
  ec.layers = meta["enc"]["layers"];
  ec.heads = meta["enc"]["heads"];
  ec.mlp_mult = meta["enc"]["mlp_mult"];
  ec.causal = meta["enc"]["causal"];
  DenoiserConfig dc;
  dc.h = meta["den"]["h"];
  dc.w = meta["den"]["w"];
  dc.ch = meta["den"]["ch"];
  dc.w1 = meta["den"]["w1"];
  dc.w2 = meta["den"]["w2"];
  dc.heads = meta["den"]["heads"];
  dc.d_latent = meta["den"]["d_latent"];
  dc.temb_dim = meta["den"]["temb"];
  dc.max_len = meta["den"]["max_len"];
  int T = meta["T"];
  dc.t_levels = T + 1;

  Backbone b(ec, dc, T);
  b.proj.init_shell();
  b.model_hash = std::stoull(meta["model_hash"].get<std::string>(), nullptr, 16);
  b.trained_steps = meta["trained_steps"];
  b.all_params().load_from(tf);
  b.set_trainable(false);
  return b;
}

}  // namespace ltxb
