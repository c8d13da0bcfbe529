#include "ltxb/encoder.hpp"

#include <cmath>

namespace ltxb {

TextEncoder::TextEncoder(EncoderConfig cfg) : cfg_(cfg) {
  require(cfg_.d_model % cfg_.heads == 0, ErrorKind::config,
          "encoder width must split evenly across heads");
  int d = cfg_.d_model, hd = d / cfg_.heads, M = cfg_.max_len;

  params_.add("enc.tok_emb", Tensor::zeros({cfg_.vocab_size, d}));
  params_.add("enc.pos_emb", Tensor::zeros({M, d}));
  for (int l = 0; l < cfg_.layers; ++l) {
    std::string pre = "enc.l" + std::to_string(l) + ".";
    params_.add(pre + "ln1.g", Tensor::zeros({d}));
    params_.add(pre + "ln1.b", Tensor::zeros({d}));
    params_.add(pre + "attn.wq", Tensor::zeros({d, d}));
    params_.add(pre + "attn.wk", Tensor::zeros({d, d}));
    params_.add(pre + "attn.wv", Tensor::zeros({d, d}));
    params_.add(pre + "attn.wo", Tensor::zeros({d, d}));
    params_.add(pre + "ln2.g", Tensor::zeros({d}));
    params_.add(pre + "ln2.b", Tensor::zeros({d}));
    params_.add(pre + "mlp.w1", Tensor::zeros({d, d * cfg_.mlp_mult}));
    params_.add(pre + "mlp.b1", Tensor::zeros({1, d * cfg_.mlp_mult}));
    params_.add(pre + "mlp.w2", Tensor::zeros({d * cfg_.mlp_mult, d}));
    params_.add(pre + "mlp.b2", Tensor::zeros({1, d}));
  }
  params_.add("enc.ln_f.g", Tensor::zeros({d}));
  params_.add("enc.ln_f.b", Tensor::zeros({d}));

  for (int h = 0; h < cfg_.heads; ++h) {
    Tensor sel = Tensor::zeros({d, hd});
    for (int j = 0; j < hd; ++j) sel.data()[(size_t)(h * hd + j) * hd + j] = 1.f;
    head_sel_.push_back(sel);
    Tensor mer = Tensor::zeros({hd, d});
    for (int j = 0; j < hd; ++j) mer.data()[(size_t)j * d + h * hd + j] = 1.f;
    head_merge_.push_back(mer);
  }
  if (cfg_.causal) {
    causal_mask_ = Tensor::zeros({M, M});
    for (int i = 0; i < M; ++i)
      for (int j = i + 1; j < M; ++j) causal_mask_.data()[(size_t)i * M + j] = -1e9f;
  }
}

void TextEncoder::init(Rng& rng) {
  int d = cfg_.d_model;
  float wstd = 1.f / std::sqrt((float)d);
  float rstd = wstd / std::sqrt(2.f * cfg_.layers);
  float mstd = 1.f / std::sqrt((float)(d * cfg_.mlp_mult));
  for (auto& [name, t] : params_.items()) {
    bool last = name.size() >= 2;
    std::string tail = last ? name.substr(name.rfind('.') + 1) : "";
    if (tail == "g") {
      std::fill(t.data().begin(), t.data().end(), 1.f);
    } else if (tail == "b" || tail == "b1" || tail == "b2") {
      std::fill(t.data().begin(), t.data().end(), 0.f);
    } else if (name == "enc.tok_emb" || name == "enc.pos_emb") {
      rng.fill_normal(t.data(), 0.f, 0.1f);
    } else if (tail == "wo") {
      rng.fill_normal(t.data(), 0.f, rstd);
    } else if (tail == "w2") {
      rng.fill_normal(t.data(), 0.f, mstd / std::sqrt(2.f * cfg_.layers));
    } else {
      rng.fill_normal(t.data(), 0.f, wstd);
    }
  }
  params_.set_trainable(true);
}

Tensor TextEncoder::encode(const std::vector<int>& ids) const {
  require((int)ids.size() == cfg_.max_len, ErrorKind::dimension,
          "encode: id window must match max_len");
  return run(embedding_rows(params_.at("enc.tok_emb"), ids));
}

Tensor TextEncoder::encode(const std::vector<int>& ids, const Tensor& override_row,
                           const std::vector<int>& positions) const {
  require((int)ids.size() == cfg_.max_len, ErrorKind::dimension,
          "encode: id window must match max_len");
  require(!positions.empty(), ErrorKind::contract, "encode: override needs target positions");
  Tensor emb = embedding_rows(params_.at("enc.tok_emb"), ids);
  Tensor rows = positions.size() == 1 ? override_row
                                      : broadcast_row(override_row, (int)positions.size());
  return run(replace_rows(emb, rows, positions));
}

Tensor TextEncoder::encode(const std::vector<int>& ids, const Overrides& overrides) const {
  require((int)ids.size() == cfg_.max_len, ErrorKind::dimension,
          "encode: id window must match max_len");
  Tensor emb = embedding_rows(params_.at("enc.tok_emb"), ids);
  for (const auto& [row, positions] : overrides) {
    require(!positions.empty(), ErrorKind::contract, "encode: override needs target positions");
    Tensor rows =
        positions.size() == 1 ? row : broadcast_row(row, (int)positions.size());
    emb = replace_rows(emb, rows, positions);
  }
  return run(emb);
}

Tensor TextEncoder::run(Tensor emb) const {
  const Params& P = params_;
  int M = cfg_.max_len, hd = cfg_.d_model / cfg_.heads;
  float sc = 1.f / std::sqrt((float)hd);

  Tensor x = add(emb, P.at("enc.pos_emb"));
  for (int l = 0; l < cfg_.layers; ++l) {
    std::string pre = "enc.l" + std::to_string(l) + ".";
    Tensor a = layer_norm_rows(x, P.at(pre + "ln1.g"), P.at(pre + "ln1.b"));
    Tensor q = matmul(a, P.at(pre + "attn.wq"));
    Tensor k = matmul(a, P.at(pre + "attn.wk"));
    Tensor v = matmul(a, P.at(pre + "attn.wv"));
    Tensor merged;
    for (int h = 0; h < cfg_.heads; ++h) {
      Tensor s = scale(matmul(matmul(q, head_sel_[h]), transpose(matmul(k, head_sel_[h]))), sc);
      if (cfg_.causal) s = add(s, causal_mask_);
      Tensor oh = matmul(softmax_rows(s), matmul(v, head_sel_[h]));
      Tensor part = matmul(oh, head_merge_[h]);
      merged = h == 0 ? part : add(merged, part);
    }
    x = add(x, matmul(merged, P.at(pre + "attn.wo")));

    Tensor m = layer_norm_rows(x, P.at(pre + "ln2.g"), P.at(pre + "ln2.b"));
    Tensor h1 = silu(add(matmul(m, P.at(pre + "mlp.w1")), broadcast_row(P.at(pre + "mlp.b1"), M)));
    Tensor h2 = add(matmul(h1, P.at(pre + "mlp.w2")), broadcast_row(P.at(pre + "mlp.b2"), M));
    x = add(x, h2);
  }
  return layer_norm_rows(x, P.at("enc.ln_f.g"), P.at("enc.ln_f.b"));
}

void ProjectionSet::init(Rng& rng) {
  float std = 1.f / std::sqrt((float)d_in);
  wk.clear();
  wv.clear();
  for (int l = 0; l < layers; ++l) {
    wk.push_back(Tensor::randn({d_in, d_latent}, rng, std, true));
    wv.push_back(Tensor::randn({d_in, d_latent}, rng, std, true));
  }
}

void ProjectionSet::init_shell() {
  wk.clear();
  wv.clear();
  for (int l = 0; l < layers; ++l) {
    wk.push_back(Tensor::zeros({d_in, d_latent}, true));
    wv.push_back(Tensor::zeros({d_in, d_latent}, true));
  }
}

std::vector<KV> ProjectionSet::project(const Tensor& h) const {
  require((int)wk.size() == layers && (int)wv.size() == layers, ErrorKind::contract,
          "projections not initialized");
  std::vector<KV> out;
  out.reserve(layers);
  for (int l = 0; l < layers; ++l) out.push_back({matmul(h, wk[l]), matmul(h, wv[l])});
  return out;
}

ProjectionSet ProjectionSet::clone(bool trainable) const {
  ProjectionSet out;
  out.layers = layers;
  out.d_in = d_in;
  out.d_latent = d_latent;
  for (int l = 0; l < layers; ++l) {
    out.wk.push_back(Tensor::from(wk[l].shape(), wk[l].data(), trainable));
    out.wv.push_back(Tensor::from(wv[l].shape(), wv[l].data(), trainable));
  }
  return out;
}

void ProjectionSet::collect(Params& out, const std::string& prefix) const {
  for (int l = 0; l < layers; ++l) {
    out.add(prefix + "l" + std::to_string(l) + ".wk", wk[l]);
    out.add(prefix + "l" + std::to_string(l) + ".wv", wv[l]);
  }
}

}  // namespace ltxb
