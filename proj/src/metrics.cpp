#include "ltxb/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <json.hpp>
#include <map>

#include "ltxb/hashing.hpp"
#include "ltxb/optim.hpp"
#include "ltxb/serialize.hpp"

namespace ltxb {

using nlohmann::json;

DeviationReport deviation_magnitude(const Trajectory& test, const Trajectory& ref) {
  require(!test.latents.empty() && !ref.latents.empty(), ErrorKind::contract,
          "deviation_magnitude: trajectories recorded without latents");
  require(test.latents.size() == ref.latents.size() &&
              test.steps.size() == ref.steps.size(),
          ErrorKind::contract, "deviation_magnitude: step counts differ");
  for (size_t i = 0; i < test.steps.size(); ++i)
    require(test.steps[i].t == ref.steps[i].t, ErrorKind::contract,
            "deviation_magnitude: step ladders differ");

  DeviationReport out;
  double acc = 0;
  for (size_t i = 0; i < test.latents.size(); ++i) {
    const auto& a = test.latents[i];
    const auto& b = ref.latents[i];
    require(a.size() == b.size(), ErrorKind::contract,
            "deviation_magnitude: latent sizes differ");
    double num = 0, den = 0;
    for (size_t j = 0; j < a.size(); ++j) {
      double d = (double)a[j] - (double)b[j];
      num += d * d;
      den += (double)b[j] * (double)b[j];
    }
    require(den > 0, ErrorKind::degenerate,
            "deviation_magnitude: reference latent is all zero");
    double d = std::sqrt(num) / std::sqrt(den);
    out.per_step.push_back(d);
    acc += d;
  }
  out.mean = acc / (double)out.per_step.size();
  return out;
}

double layout_similarity(const Image& a, const Image& b) {
  require(a.w == b.w && a.h == b.h && a.w > 0 && a.h > 0, ErrorKind::dimension,
          "layout_similarity: matching nonempty dimensions required");
  auto ga = downsample_gray(to_gray(a), a.w, a.h, 8, 8);
  auto gb = downsample_gray(to_gray(b), b.w, b.h, 8, 8);
  double ma = 0, mb = 0;
  for (int i = 0; i < 64; ++i) {
    ma += ga[i];
    mb += gb[i];
  }
  ma /= 64;
  mb /= 64;
  double sab = 0, saa = 0, sbb = 0;
  for (int i = 0; i < 64; ++i) {
    double da = ga[i] - ma, db = gb[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  require(saa > 0 && sbb > 0, ErrorKind::degenerate,
          "layout_similarity: constant intensity grid");
  return sab / std::sqrt(saa * sbb);
}

namespace {

constexpr int kSide = 32;
constexpr int kC1 = 16, kC2 = 32, kC3 = 64;

struct ConvGrid {
  int out_h = 0, out_w = 0, padded_rows = 0;
  std::vector<int> pad_idx, patch_idx;
};

ConvGrid make_conv_grid(int h, int w, int stride) {
  ConvGrid g;
  g.out_h = h / stride;
  g.out_w = w / stride;
  int pw = w + 2;
  g.padded_rows = (h + 2) * pw;
  g.pad_idx.resize((size_t)h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) g.pad_idx[(size_t)y * w + x] = (y + 1) * pw + (x + 1);
  g.patch_idx.reserve((size_t)g.out_h * g.out_w * 9);
  for (int oy = 0; oy < g.out_h; ++oy)
    for (int ox = 0; ox < g.out_w; ++ox) {
      int cy = oy * stride + 1, cx = ox * stride + 1;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) g.patch_idx.push_back((cy + dy) * pw + (cx + dx));
    }
  return g;
}

// Index plans for a whole batch stacked into one row tensor, so a training
// step is one graph instead of one per item.
struct StageGrid {
  std::vector<int> pad_idx, patch_idx;
  int padded_rows = 0, out_px = 0;
};

StageGrid batch_stage(const ConvGrid& g, int batch, int in_px) {
  StageGrid out;
  out.padded_rows = batch * g.padded_rows;
  out.out_px = batch * g.out_h * g.out_w;
  out.pad_idx.reserve((size_t)batch * in_px);
  out.patch_idx.reserve((size_t)batch * g.patch_idx.size());
  for (int b = 0; b < batch; ++b) {
    int off = b * g.padded_rows;
    for (int i = 0; i < in_px; ++i) out.pad_idx.push_back(off + g.pad_idx[i]);
    for (int i : g.patch_idx) out.patch_idx.push_back(off + i);
  }
  return out;
}

struct BatchGrids {
  StageGrid s1, s2, s3;
  std::vector<int> pool_idx;  // conv3 output row -> item
};

const BatchGrids& batch_grids(int batch) {
  static std::map<int, BatchGrids> cache;
  auto it = cache.find(batch);
  if (it != cache.end()) return it->second;
  BatchGrids g;
  g.s1 = batch_stage(make_conv_grid(32, 32, 1), batch, 32 * 32);
  g.s2 = batch_stage(make_conv_grid(32, 32, 2), batch, 32 * 32);
  g.s3 = batch_stage(make_conv_grid(16, 16, 2), batch, 16 * 16);
  g.pool_idx.reserve((size_t)batch * 64);
  for (int b = 0; b < batch; ++b)
    for (int p = 0; p < 64; ++p) g.pool_idx.push_back(b);
  return cache.emplace(batch, std::move(g)).first->second;
}

Tensor conv3x3(const Tensor& x, const StageGrid& g, const Tensor& w, const Tensor& b) {
  int cin = x.shape()[1];
  Tensor patches = gather_rows(scatter_rows(x, g.pad_idx, g.padded_rows), g.patch_idx);
  patches = reshape(patches, {g.out_px, 9 * cin});
  return add(matmul(patches, w), broadcast_row(b, g.out_px));
}

Tensor pixel_rows(const Image& img) {
  require(img.w == kSide && img.h == kSide, ErrorKind::dimension,
          "presence oracle expects 32x32 images");
  return image_to_latent(img);
}

std::vector<float> pixel_row_values(const Image& img) { return pixel_rows(img).data(); }

using Labeled = std::pair<std::vector<float>, int>;  // pixel rows, class

std::vector<Labeled> labeled_from(const Corpus& corpus, const std::vector<Example>& split,
                                  int background_copies) {
  std::vector<Labeled> items;
  items.reserve(split.size() + background_copies);
  for (const auto& ex : split) {
    require(ex.combos.size() == 1, ErrorKind::contract,
            "oracle splits must hold single-subject renders");
    items.emplace_back(pixel_row_values(corpus.image(ex)), ex.combos[0]);
  }
  Image empty = render_scene({});
  for (int i = 0; i < background_copies; ++i)
    items.emplace_back(pixel_row_values(empty), kBackgroundClass);
  return items;
}

}  // namespace

void PresenceOracle::build_params() {
  auto zeros = [](int r, int c) {
    return Tensor::from({r, c}, std::vector<float>((size_t)r * c, 0.f));
  };
  params_.add("c1.w", zeros(27, kC1));
  params_.add("c1.b", zeros(1, kC1));
  params_.add("c2.w", zeros(9 * kC1, kC2));
  params_.add("c2.b", zeros(1, kC2));
  params_.add("c3.w", zeros(9 * kC2, kC3));
  params_.add("c3.b", zeros(1, kC3));
  params_.add("fc.w", zeros(kC3, kOracleClasses));
  params_.add("fc.b", zeros(1, kOracleClasses));
}

Tensor PresenceOracle::logits_batch(const Tensor& x, int batch) const {
  const BatchGrids& g = batch_grids(batch);
  Tensor h = silu(conv3x3(x, g.s1, params_.at("c1.w"), params_.at("c1.b")));
  h = silu(conv3x3(h, g.s2, params_.at("c2.w"), params_.at("c2.b")));
  h = silu(conv3x3(h, g.s3, params_.at("c3.w"), params_.at("c3.b")));
  Tensor pooled = scale(scatter_rows(h, g.pool_idx, batch), 1.f / 64);
  return add(matmul(pooled, params_.at("fc.w")), broadcast_row(params_.at("fc.b"), batch));
}

uint64_t PresenceOracle::param_hash() const {
  uint64_t h = fnv1a64("presence_oracle");
  for (const auto& [name, t] : params_.items()) {
    h = fnv1a64(name, h);
    h = fnv1a64(t.data().data(), t.data().size() * sizeof(float), h);
  }
  return h;
}

double PresenceOracle::eval_pairs(const std::vector<std::pair<std::vector<float>, int>>& items,
                                  std::vector<int>* confusion) const {
  if (confusion) confusion->assign((size_t)kOracleClasses * kOracleClasses, 0);
  if (items.empty()) return 0.0;
  int n = (int)items.size();
  std::vector<float> stacked;
  stacked.reserve((size_t)n * kSide * kSide * 3);
  for (const auto& [values, label] : items)
    stacked.insert(stacked.end(), values.begin(), values.end());
  Tensor lg = logits_batch(Tensor::from({n * kSide * kSide, 3}, std::move(stacked)), n);
  const auto& v = lg.data();
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    const float* row = v.data() + (size_t)i * kOracleClasses;
    int pred = 0;
    for (int j = 1; j < kOracleClasses; ++j)
      if (row[j] > row[pred]) pred = j;
    if (pred == items[i].second) ++correct;
    if (confusion) (*confusion)[(size_t)items[i].second * kOracleClasses + pred]++;
  }
  return (double)correct / (double)n;
}

double PresenceOracle::eval_accuracy(const Corpus& corpus, std::vector<int>* confusion) const {
  return eval_pairs(labeled_from(corpus, corpus.oracle_val, 1), confusion);
}

PresenceOracle PresenceOracle::train(const Corpus& corpus, const Config& cfg, const Rng& rng,
                                     OracleReport* report) {
  int steps = (int)cfg.get_int("oracle.steps", 3000);
  int batch = (int)cfg.get_int("oracle.batch", 32);
  float lr = (float)cfg.get_float("oracle.lr", 1e-3);
  float clip = (float)cfg.get_float("oracle.clip", 1.0);
  int val_every = (int)cfg.get_int("oracle.val_every", 100);
  double target = cfg.get_float("oracle.target", 0.99);
  double min_acc = cfg.get_float("oracle.min_accuracy", 0.95);
  double noise_hi = cfg.get_float("oracle.noise", 0.15);
  int shift = (int)cfg.get_int("oracle.shift", 2);
  require(steps >= 0 && batch > 0 && val_every > 0, ErrorKind::config,
          "invalid oracle training configuration");
  require(!corpus.oracle_train.empty() && !corpus.oracle_val.empty(), ErrorKind::contract,
          "corpus has no oracle splits");

  int bg_train = std::max<int>(1, (int)corpus.oracle_train.size() / kCombos);
  std::vector<Labeled> train_items = labeled_from(corpus, corpus.oracle_train, bg_train);
  std::vector<Labeled> val_items = labeled_from(corpus, corpus.oracle_val, 1);

  PresenceOracle po;
  po.build_params();
  Rng root = rng.child("oracle");
  {
    Rng ri = root.child("init");
    for (auto& [name, t] : po.params_.items()) {
      if (name.back() == 'b') continue;
      float s = std::sqrt(2.f / (float)t.shape()[0]);
      ri.fill_normal(t.data(), 0.f, s);
    }
  }
  po.params_.set_trainable(true);
  std::vector<Tensor> train_vec = po.params_.trainable();

  Adam opt;
  opt.lr = lr;
  opt.clip = clip;
  Rng rb = root.child("batch");
  Rng rn = root.child("noise");

  int step = 0;
  std::vector<float> stacked((size_t)batch * kSide * kSide * 3);
  std::vector<int> labels(batch);
  for (step = 1; step <= steps; ++step) {
    for (int b = 0; b < batch; ++b) {
      const auto& [values, label] =
          train_items[(size_t)rb.uniform_int(0, (int64_t)train_items.size() - 1)];
      float* dst = stacked.data() + (size_t)b * values.size();
      double sigma = rn.uniform(0.0, noise_hi);
      int dy = (int)rn.uniform_int(-shift, shift);
      int dx = (int)rn.uniform_int(-shift, shift);
      for (int y = 0; y < kSide; ++y)
        for (int x = 0; x < kSide; ++x) {
          int sy = std::clamp(y - dy, 0, kSide - 1);
          int sx = std::clamp(x - dx, 0, kSide - 1);
          const float* src = values.data() + ((size_t)sy * kSide + sx) * 3;
          float* px = dst + ((size_t)y * kSide + x) * 3;
          for (int c = 0; c < 3; ++c) px[c] = (float)(src[c] + sigma * rn.normal());
        }
      labels[b] = label;
    }
    Tensor lg = po.logits_batch(Tensor::from({batch * kSide * kSide, 3}, stacked), batch);
    backward(softmax_cross_entropy(lg, labels));
    opt.step(train_vec);
    if (step % val_every == 0 && po.eval_pairs(val_items, nullptr) >= target) break;
  }
  if (step > steps) step = steps;

  po.params_.set_trainable(false);
  std::vector<int> confusion;
  double final_acc = po.eval_pairs(val_items, &confusion);
  if (report) {
    report->steps_run = step;
    report->val_accuracy = final_acc;
    report->confusion = confusion;
  }
  require(final_acc >= min_acc, ErrorKind::oracle_quality,
          "presence oracle reached " + std::to_string(final_acc) +
              " held-out accuracy, below the gate of " + std::to_string(min_acc));
  po.hash_ = po.param_hash();
  return po;
}

std::vector<float> PresenceOracle::class_probs(const Image& img) const {
  Tensor p = softmax_rows(logits_batch(pixel_rows(img), 1));
  return p.data();
}

bool PresenceOracle::present(const Image& img, int combo) const {
  require(combo >= 0 && combo < kCombos, ErrorKind::range,
          "present: combo index outside the subject set");
  if (class_probs(img)[combo] >= 0.5f) return true;
  for (int qy = 0; qy < 2; ++qy)
    for (int qx = 0; qx < 2; ++qx)
      if (class_probs(upscale2x_crop(img, qx * img.w / 2, qy * img.h / 2))[combo] >= 0.5f)
        return true;
  return false;
}

void PresenceOracle::save(const std::string& path) const {
  TensorFile tf;
  json meta;
  meta["kind"] = "presence_oracle";
  meta["classes"] = kOracleClasses;
  meta["side"] = kSide;
  meta["param_hash"] = hash_hex(param_hash());
  tf.metadata_json = meta.dump();
  params_.save_into(tf, "po.");
  write_tensor_file(path, tf);
}

PresenceOracle PresenceOracle::load(const std::string& path) {
  TensorFile tf = read_tensor_file(path);
  json meta;
  try {
    meta = json::parse(tf.metadata_json);
  } catch (const json::exception& e) {
    fail(ErrorKind::corruption, "unreadable oracle metadata: " + std::string(e.what()));
  }
  require(meta.value("kind", "") == "presence_oracle", ErrorKind::corruption,
          "'" + path + "' does not hold a presence oracle");
  require(meta.value("classes", 0) == kOracleClasses && meta.value("side", 0) == kSide,
          ErrorKind::compatibility, "oracle geometry does not match this build");
  PresenceOracle po;
  po.build_params();
  po.params_.load_from(tf, "po.");
  po.params_.set_trainable(false);
  po.hash_ = po.param_hash();
  require(meta.value("param_hash", "") == hash_hex(po.hash_), ErrorKind::corruption,
          "oracle parameter hash does not match its manifest");
  return po;
}

PresenceReport presence_eval(const std::vector<Image>& images, const std::vector<int>& combos,
                             const PresenceOracle& oracle) {
  require(!combos.empty(), ErrorKind::contract, "presence_eval: no subjects requested");
  PresenceReport rep;
  rep.samples = (int)images.size();
  rep.combos = combos;
  rep.rates.assign(combos.size(), 0.0);
  if (images.empty()) return rep;
  int joint = 0;
  for (const auto& img : images) {
    std::vector<bool> row(combos.size());
    bool all = true;
    for (size_t j = 0; j < combos.size(); ++j) {
      row[j] = oracle.present(img, combos[j]);
      if (row[j]) rep.rates[j] += 1.0;
      all = all && row[j];
    }
    if (all) ++joint;
    rep.detected.push_back(std::move(row));
  }
  for (auto& r : rep.rates) r /= (double)rep.samples;
  rep.joint_rate = (double)joint / (double)rep.samples;
  return rep;
}

ProjectionSet average_projections(const std::vector<const ConceptState*>& states) {
  require(!states.empty(), ErrorKind::contract, "average_projections: no states given");
  ProjectionSet out = states[0]->proj.clone(false);
  for (size_t i = 1; i < states.size(); ++i) {
    const ProjectionSet& p = states[i]->proj;
    require(p.layers == out.layers && p.d_in == out.d_in && p.d_latent == out.d_latent,
            ErrorKind::compatibility, "average_projections: mismatched projection geometry");
  }
  if (states.size() == 1) return out;
  float inv = 1.f / (float)states.size();
  for (int l = 0; l < out.layers; ++l) {
    auto blend_into = [&](Tensor& dst, bool key) {
      auto& d = dst.data();
      for (size_t j = 0; j < d.size(); ++j) {
        double acc = 0;
        for (const ConceptState* s : states) {
          const Tensor& src = key ? s->proj.wk[l] : s->proj.wv[l];
          acc += src.data()[j];
        }
        d[j] = (float)(acc * inv);
      }
    };
    blend_into(out.wk[l], true);
    blend_into(out.wv[l], false);
  }
  return out;
}

std::vector<KV> direct_condition(const Backbone& bb, const Vocab& vocab,
                                 const std::vector<const ConceptState*>& states,
                                 const Tokenized& tok) {
  require(!states.empty(), ErrorKind::contract, "direct_condition: no states given");
  TextEncoder::Overrides ovr;
  for (const ConceptState* s : states) {
    require(s->backbone_hash == bb.model_hash, ErrorKind::compatibility,
            "customized state was trained against a different backbone");
    std::vector<int> pos = s->identifier_positions(tok, vocab);
    if (!pos.empty())
      ovr.emplace_back(Tensor::from(s->emb.shape(), s->emb.data()), std::move(pos));
  }
  Tensor h = bb.enc.encode(tok.ids, ovr);
  return average_projections(states).project(h);
}

SampleResult run_direct(const Backbone& bb, const Vocab& vocab,
                        const std::vector<const ConceptState*>& states,
                        const std::string& prompt, const SamplerConfig& scfg,
                        const GuidanceConfig& gcfg) {
  Tokenized tok = tokenize(vocab, prompt, bb.enc_cfg.max_len);
  std::vector<KV> cond = direct_condition(bb, vocab, states, tok);
  Tokenized empty = tokenize(vocab, "", bb.enc_cfg.max_len);
  std::vector<KV> uncond = average_projections(states).project(bb.enc.encode(empty.ids));
  return sample_with_cond(bb, cond, uncond, scfg, gcfg, {});
}

}  // namespace ltxb
