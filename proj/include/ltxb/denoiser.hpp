#pragma once

#include <functional>
#include <vector>

#include "ltxb/encoder.hpp"
#include "ltxb/image.hpp"
#include "ltxb/params.hpp"
#include "ltxb/rng.hpp"
#include "ltxb/schedule.hpp"
#include "ltxb/tensor.hpp"

namespace ltxb {

struct DenoiserConfig {
  int h = 32, w = 32;  // pixel grid, both even
  int ch = 3;
  int w1 = 32, w2 = 64;  // widths at full and half resolution
  int heads = 4;
  int d_latent = 64;  // cross-attention K/V width
  int temb_dim = 128;
  int t_levels = 101;  // distinct noise levels the net can be asked about
  int max_len = 16;    // K/V rows per layer
};

struct DenoiserOut {
  Tensor eps;  // [h*w x ch]
  // Head-averaged cross-attention weights per layer, query pixels x tokens.
  // Layers 0 and 3 run at full resolution, 1 and 2 at half.
  std::vector<Tensor> attn;
};

// Two-level UNet over flattened pixel rows. Text reaches it only through
// the four per-layer K/V streams.
class Denoiser {
 public:
  explicit Denoiser(DenoiserConfig cfg);
  void init(Rng& rng);

  DenoiserOut forward(const Tensor& z, int t, const std::vector<KV>& kv,
                      bool want_attn = false) const;

  const DenoiserConfig& config() const { return cfg_; }
  Params& params() { return params_; }
  const Params& params() const { return params_; }

 private:
  struct Grid {
    int h = 0, w = 0;
    std::vector<int> pad_idx;    // pixel row -> row in zero-padded map
    std::vector<int> patch_idx;  // 9 padded rows per output pixel
    int padded_rows = 0;
  };

  static Grid make_grid(int h, int w);
  Tensor conv3(const Tensor& x, const Grid& g, const std::vector<int>& patch_idx, int out_px,
               const std::string& wname) const;
  Tensor res_unit(const Tensor& x, const Grid& g, const Tensor& temb,
                  const std::string& name) const;
  std::pair<Tensor, Tensor> cross_attn(const Tensor& x, const KV& kv, const std::string& name,
                                       bool want_map) const;

  DenoiserConfig cfg_;
  Params params_;
  Grid g1_, g2_;
  std::vector<int> patch_stride2_;  // patches on g1_'s padded map, half-grid centers
  std::vector<int> up_idx_;         // nearest-neighbour upsample
  Tensor sin_table_;                // [t_levels x 64]
  std::vector<Tensor> head_sel_, head_merge_;
};

// Pixel-rows layout conversion between images and the denoiser's input:
// row p of the latent holds the ch channel values of pixel p.
Tensor image_to_latent(const Image& img);
Image latent_to_image(const std::vector<float>& values, int h, int w);

// Mean over the batch of the summed squared noise-prediction residual.
// The denoiser is injected so the loss mechanics are testable in isolation.
using DenoiserFn = std::function<DenoiserOut(const Tensor& zt, int t)>;
Tensor diffusion_loss(const DenoiserFn& den, const std::vector<Tensor>& z0,
                      const std::vector<Tensor>& eps, const std::vector<int>& ts,
                      const Schedule& sch);

}  // namespace ltxb
