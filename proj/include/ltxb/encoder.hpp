#pragma once

#include <vector>

#include "ltxb/params.hpp"
#include "ltxb/rng.hpp"
#include "ltxb/tensor.hpp"

namespace ltxb {

struct EncoderConfig {
  int vocab_size = 30;
  int d_model = 64;
  int max_len = 16;
  int layers = 2;
  int heads = 4;
  int mlp_mult = 4;
  bool causal = false;
};

// Bidirectional (optionally causal) transformer over the fixed-length token
// window. Every prompt is encoded at full window length; the output is one
// feature row per position.
class TextEncoder {
 public:
  explicit TextEncoder(EncoderConfig cfg);
  void init(Rng& rng);

  // [max_len x d_model]. With an override, that row is spliced over the
  // token embedding at the given positions before position information is
  // added, so gradients reach the override and nothing else when the
  // encoder itself is frozen.
  Tensor encode(const std::vector<int>& ids) const;
  Tensor encode(const std::vector<int>& ids, const Tensor& override_row,
                const std::vector<int>& positions) const;
  // one override row per entry, each spliced at its own positions
  using Overrides = std::vector<std::pair<Tensor, std::vector<int>>>;
  Tensor encode(const std::vector<int>& ids, const Overrides& overrides) const;

  const EncoderConfig& config() const { return cfg_; }
  Params& params() { return params_; }
  const Params& params() const { return params_; }
  const Tensor& token_table() const { return params_.at("enc.tok_emb"); }

 private:
  Tensor run(Tensor emb) const;

  EncoderConfig cfg_;
  Params params_;
  std::vector<Tensor> head_sel_;    // [d_model x head_dim] column selectors
  std::vector<Tensor> head_merge_;  // [head_dim x d_model] transposed selectors
  Tensor causal_mask_;              // [max_len x max_len], 0 / -1e9
};

struct KV {
  Tensor k, v;
};

// Per cross-attention layer linear maps from encoder features to the
// latent K/V streams the denoiser consumes.
struct ProjectionSet {
  int layers = 4;
  int d_in = 64;
  int d_latent = 64;
  std::vector<Tensor> wk, wv;

  void init(Rng& rng);
  void init_shell();  // zero-filled tensors of the right shapes, for loading into
  std::vector<KV> project(const Tensor& h) const;
  ProjectionSet clone(bool trainable) const;
  void collect(Params& out, const std::string& prefix = "proj.") const;
};

}  // namespace ltxb
