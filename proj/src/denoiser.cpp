#include "ltxb/denoiser.hpp"

#include <cmath>

namespace ltxb {

Denoiser::Grid Denoiser::make_grid(int h, int w) {
  Grid g;
  g.h = h;
  g.w = w;
  g.padded_rows = (h + 2) * (w + 2);
  g.pad_idx.reserve((size_t)h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) g.pad_idx.push_back((y + 1) * (w + 2) + (x + 1));
  g.patch_idx.reserve((size_t)h * w * 9);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int dy = 0; dy < 3; ++dy)
        for (int dx = 0; dx < 3; ++dx) g.patch_idx.push_back((y + dy) * (w + 2) + (x + dx));
  return g;
}

Denoiser::Denoiser(DenoiserConfig cfg) : cfg_(cfg) {
  require(cfg_.h % 2 == 0 && cfg_.w % 2 == 0, ErrorKind::config, "grid sides must be even");
  require(cfg_.d_latent % cfg_.heads == 0, ErrorKind::config,
          "latent width must split evenly across heads");
  g1_ = make_grid(cfg_.h, cfg_.w);
  g2_ = make_grid(cfg_.h / 2, cfg_.w / 2);

  for (int y = 0; y < cfg_.h / 2; ++y)
    for (int x = 0; x < cfg_.w / 2; ++x)
      for (int dy = 0; dy < 3; ++dy)
        for (int dx = 0; dx < 3; ++dx)
          patch_stride2_.push_back((2 * y + dy) * (cfg_.w + 2) + (2 * x + dx));
  for (int y = 0; y < cfg_.h; ++y)
    for (int x = 0; x < cfg_.w; ++x) up_idx_.push_back((y / 2) * (cfg_.w / 2) + x / 2);

  int tin = 64;
  sin_table_ = Tensor::zeros({cfg_.t_levels, tin});
  for (int t = 0; t < cfg_.t_levels; ++t)
    for (int k = 0; k < tin / 2; ++k) {
      double om = std::pow(10000.0, -(double)k / (tin / 2 - 1));
      sin_table_.data()[(size_t)t * tin + k] = (float)std::sin(t * om);
      sin_table_.data()[(size_t)t * tin + tin / 2 + k] = (float)std::cos(t * om);
    }

  int hd = cfg_.d_latent / cfg_.heads;
  for (int h = 0; h < cfg_.heads; ++h) {
    Tensor sel = Tensor::zeros({cfg_.d_latent, hd});
    for (int j = 0; j < hd; ++j) sel.data()[(size_t)(h * hd + j) * hd + j] = 1.f;
    head_sel_.push_back(sel);
    Tensor mer = Tensor::zeros({hd, cfg_.d_latent});
    for (int j = 0; j < hd; ++j) mer.data()[(size_t)j * cfg_.d_latent + h * hd + j] = 1.f;
    head_merge_.push_back(mer);
  }

  auto conv_p = [&](const std::string& n, int cin, int cout) {
    params_.add(n + ".w", Tensor::zeros({9 * cin, cout}));
    params_.add(n + ".b", Tensor::zeros({1, cout}));
  };
  auto res_p = [&](const std::string& n, int chn) {
    params_.add(n + ".ln.g", Tensor::zeros({chn}));
    params_.add(n + ".ln.b", Tensor::zeros({chn}));
    params_.add(n + ".t.w", Tensor::zeros({cfg_.temb_dim, chn}));
    conv_p(n + ".conv", chn, chn);
  };
  auto attn_p = [&](const std::string& n, int chn) {
    params_.add(n + ".ln.g", Tensor::zeros({chn}));
    params_.add(n + ".ln.b", Tensor::zeros({chn}));
    params_.add(n + ".wq", Tensor::zeros({chn, cfg_.d_latent}));
    params_.add(n + ".wo", Tensor::zeros({cfg_.d_latent, chn}));
  };

  params_.add("den.t.w1", Tensor::zeros({tin, cfg_.temb_dim}));
  params_.add("den.t.b1", Tensor::zeros({1, cfg_.temb_dim}));
  params_.add("den.t.w2", Tensor::zeros({cfg_.temb_dim, cfg_.temb_dim}));
  params_.add("den.t.b2", Tensor::zeros({1, cfg_.temb_dim}));
  conv_p("den.stem", cfg_.ch, cfg_.w1);
  res_p("den.d1", cfg_.w1);
  attn_p("den.c0", cfg_.w1);
  conv_p("den.down", cfg_.w1, cfg_.w2);
  res_p("den.d2", cfg_.w2);
  attn_p("den.c1", cfg_.w2);
  res_p("den.mid", cfg_.w2);
  res_p("den.u2", cfg_.w2);
  attn_p("den.c2", cfg_.w2);
  conv_p("den.up", cfg_.w2, cfg_.w1);
  res_p("den.u1", cfg_.w1);
  attn_p("den.c3", cfg_.w1);
  params_.add("den.out.ln.g", Tensor::zeros({cfg_.w1}));
  params_.add("den.out.ln.b", Tensor::zeros({cfg_.w1}));
  conv_p("den.out", cfg_.w1, cfg_.ch);
}

void Denoiser::init(Rng& rng) {
  for (auto& [name, t] : params_.items()) {
    std::string tail = name.substr(name.rfind('.') + 1);
    if (tail == "g") {
      std::fill(t.data().begin(), t.data().end(), 1.f);
    } else if (tail == "b" && t.ndim() == 1) {
      std::fill(t.data().begin(), t.data().end(), 0.f);
    } else if (tail == "b" || tail == "b1" || tail == "b2") {
      std::fill(t.data().begin(), t.data().end(), 0.f);
    } else {
      float fan = (float)t.shape()[0];
      float std = 1.f / std::sqrt(fan);
      if (name == "den.out.w") std *= 0.05f;
      if (tail == "wo" || name.find(".conv.w") != std::string::npos) std *= 0.5f;
      rng.fill_normal(t.data(), 0.f, std);
    }
  }
  params_.set_trainable(true);
}

Tensor Denoiser::conv3(const Tensor& x, const Grid& g, const std::vector<int>& patch_idx,
                       int out_px, const std::string& wname) const {
  int c = x.shape()[1];
  Tensor padded = scatter_rows(x, g.pad_idx, g.padded_rows);
  Tensor patches = reshape(gather_rows(padded, patch_idx), {out_px, 9 * c});
  Tensor out = matmul(patches, params_.at(wname + ".w"));
  return add(out, broadcast_row(params_.at(wname + ".b"), out_px));
}

Tensor Denoiser::res_unit(const Tensor& x, const Grid& g, const Tensor& temb,
                          const std::string& name) const {
  int px = g.h * g.w;
  Tensor y = layer_norm_rows(x, params_.at(name + ".ln.g"), params_.at(name + ".ln.b"));
  Tensor tr = broadcast_row(matmul(temb, params_.at(name + ".t.w")), px);
  Tensor h = conv3(silu(add(y, tr)), g, g.patch_idx, px, name + ".conv");
  return add(x, h);
}

std::pair<Tensor, Tensor> Denoiser::cross_attn(const Tensor& x, const KV& kv,
                                               const std::string& name, bool want_map) const {
  int px = x.shape()[0];
  int hd = cfg_.d_latent / cfg_.heads;
  float sc = 1.f / std::sqrt((float)hd);
  Tensor a = layer_norm_rows(x, params_.at(name + ".ln.g"), params_.at(name + ".ln.b"));
  Tensor q = matmul(a, params_.at(name + ".wq"));
  Tensor merged, map;
  for (int h = 0; h < cfg_.heads; ++h) {
    Tensor qh = matmul(q, head_sel_[h]);
    Tensor kh = matmul(kv.k, head_sel_[h]);
    Tensor p = softmax_rows(scale(matmul(qh, transpose(kh)), sc));
    Tensor oh = matmul(p, matmul(kv.v, head_sel_[h]));
    Tensor part = matmul(oh, head_merge_[h]);
    merged = h == 0 ? part : add(merged, part);
    if (want_map) map = h == 0 ? p : add(map, p);
  }
  Tensor out = add(x, matmul(merged, params_.at(name + ".wo")));
  if (want_map) map = scale(map, 1.f / cfg_.heads);
  return {out, map};
}

DenoiserOut Denoiser::forward(const Tensor& z, int t, const std::vector<KV>& kv,
                              bool want_attn) const {
  int px1 = cfg_.h * cfg_.w, px2 = px1 / 4;
  require(z.ndim() == 2 && z.shape()[0] == px1 && z.shape()[1] == cfg_.ch, ErrorKind::dimension,
          "denoiser input must be [pixels x channels]");
  require(t >= 0 && t < cfg_.t_levels, ErrorKind::range,
          "noise level " + std::to_string(t) + " outside the trained range");
  require((int)kv.size() == 4, ErrorKind::contract, "four K/V streams required");
  for (const KV& s : kv) {
    require(s.k.shape() == Shape{cfg_.max_len, cfg_.d_latent} && s.k.shape() == s.v.shape(),
            ErrorKind::dimension, "K/V stream shape mismatch");
  }

  Tensor te = embedding_rows(sin_table_, {t});
  Tensor temb = silu(add(matmul(te, params_.at("den.t.w1")), params_.at("den.t.b1")));
  temb = add(matmul(temb, params_.at("den.t.w2")), params_.at("den.t.b2"));

  DenoiserOut out;
  out.attn.resize(4);

  Tensor x = conv3(z, g1_, g1_.patch_idx, px1, "den.stem");
  x = res_unit(x, g1_, temb, "den.d1");
  std::tie(x, out.attn[0]) = cross_attn(x, kv[0], "den.c0", want_attn);
  Tensor s32 = x;
  x = conv3(x, g1_, patch_stride2_, px2, "den.down");
  x = res_unit(x, g2_, temb, "den.d2");
  std::tie(x, out.attn[1]) = cross_attn(x, kv[1], "den.c1", want_attn);
  Tensor s16 = x;
  x = res_unit(x, g2_, temb, "den.mid");
  x = add(x, s16);
  x = res_unit(x, g2_, temb, "den.u2");
  std::tie(x, out.attn[2]) = cross_attn(x, kv[2], "den.c2", want_attn);
  x = conv3(gather_rows(x, up_idx_), g1_, g1_.patch_idx, px1, "den.up");
  x = add(x, s32);
  x = res_unit(x, g1_, temb, "den.u1");
  std::tie(x, out.attn[3]) = cross_attn(x, kv[3], "den.c3", want_attn);
  x = silu(layer_norm_rows(x, params_.at("den.out.ln.g"), params_.at("den.out.ln.b")));
  out.eps = conv3(x, g1_, g1_.patch_idx, px1, "den.out");
  return out;
}

Tensor diffusion_loss(const DenoiserFn& den, const std::vector<Tensor>& z0,
                      const std::vector<Tensor>& eps, const std::vector<int>& ts,
                      const Schedule& sch) {
  require(!z0.empty() && z0.size() == eps.size() && z0.size() == ts.size(), ErrorKind::contract,
          "diffusion_loss: matched non-empty batch required");
  Tensor total;
  for (size_t i = 0; i < z0.size(); ++i) {
    Tensor zt = sch.add_noise(z0[i], eps[i], ts[i]);
    Tensor r = sub(den(zt, ts[i]).eps, eps[i]);
    Tensor item = sum_all(mul(r, r));
    total = i == 0 ? item : add(total, item);
  }
  return scale(total, 1.f / (float)z0.size());
}

Tensor image_to_latent(const Image& img) {
  int hw = img.h * img.w;
  std::vector<float> v((size_t)hw * 3);
  for (int p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) v[(size_t)p * 3 + c] = img.px[(size_t)c * hw + p];
  return Tensor::from({hw, 3}, std::move(v));
}

Image latent_to_image(const std::vector<float>& values, int h, int w) {
  require((int)values.size() == h * w * 3, ErrorKind::dimension,
          "latent_to_image: value count does not match the grid");
  Image img(w, h);
  int hw = h * w;
  for (int p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) {
      float v = values[(size_t)p * 3 + c];
      img.px[(size_t)c * hw + p] = v < -1.f ? -1.f : (v > 1.f ? 1.f : v);
    }
  return img;
}

}  // namespace ltxb
