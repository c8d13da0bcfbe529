#pragma once

#include <string>

#include "ltxb/config.hpp"
#include "ltxb/denoiser.hpp"
#include "ltxb/encoder.hpp"
#include "ltxb/schedule.hpp"
#include "ltxb/text.hpp"

namespace ltxb {

// The pretrained stack as one unit: text encoder, per-layer latent
// projections, denoiser, and the noise schedule. Bundles are
// self-describing; load rebuilds the architecture from the file alone.
struct Backbone {
  EncoderConfig enc_cfg;
  DenoiserConfig den_cfg;
  TextEncoder enc;
  ProjectionSet proj;
  Denoiser den;
  Schedule sch;
  uint64_t model_hash = 0;
  int trained_steps = 0;

  Backbone(EncoderConfig ec, DenoiserConfig dc, int T);

  static Backbone from_config(const Config& cfg, const Vocab& vocab);
  void init(Rng& rng);

  // every parameter of the stack under one registry
  Params all_params();
  void set_trainable(bool v);

  void save(const std::string& path) const;
  static Backbone load(const std::string& path);

  // encode + project in one go, the conditioning path the denoiser consumes
  std::vector<KV> condition(const std::vector<int>& ids) const {
    return proj.project(enc.encode(ids));
  }
};

}  // namespace ltxb
