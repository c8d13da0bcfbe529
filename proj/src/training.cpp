#include "ltxb/training.hpp"

#include <cmath>
#include <string>

#include "ltxb/denoiser.hpp"
#include "ltxb/optim.hpp"

namespace ltxb {

namespace {

struct ValItem {
  Tensor z0;
  std::vector<float> eps;
  int t = 1;
  Tokenized tok;
};

double batch_item_loss(const Backbone& bb, const Tensor& z0, const std::vector<float>& eps_v,
                       int t, const std::vector<int>& ids, float inv_batch, bool train) {
  Tensor eps = Tensor::from(z0.shape(), eps_v);
  std::vector<KV> kv = bb.condition(ids);
  Tensor zt = bb.sch.add_noise(z0, eps, t);
  Tensor r = sub(bb.den.forward(zt, t, kv).eps, eps);
  Tensor l = sum_all(mul(r, r));
  if (train) backward(scale(l, inv_batch));
  return l.item();
}

}  // namespace

PretrainReport pretrain(Backbone& bb, const Corpus& corpus, const Vocab& vocab,
                        const Config& cfg, const Rng& rng) {
  resolve_data_keys(cfg);
  cfg.get_int("seed", 0);
  int max_steps = (int)cfg.get_int("pretrain.steps", 2500);
  int min_steps = (int)cfg.get_int("pretrain.min_steps", 1200);
  int batch = (int)cfg.get_int("pretrain.batch", 8);
  float lr = (float)cfg.get_float("pretrain.lr", 1e-3);
  float clip = (float)cfg.get_float("pretrain.clip", 1.0);
  double cond_drop = cfg.get_float("pretrain.cond_drop", 0.1);
  int val_every = (int)cfg.get_int("pretrain.val_every", 100);
  int val_batch = (int)cfg.get_int("pretrain.val_batch", 64);
  int patience = (int)cfg.get_int("pretrain.patience", 4);
  double plateau_rel = cfg.get_float("pretrain.plateau_rel", 0.005);
  bool require_convergence = cfg.get_bool("pretrain.require_convergence", true);

  require(!corpus.train.empty(), ErrorKind::contract, "pretrain: empty training split");
  require(batch > 0 && val_every > 0, ErrorKind::config, "pretrain: batch and val_every must be positive");

  int T = bb.sch.T;
  int hw = bb.den_cfg.h * bb.den_cfg.w;
  int max_len = bb.enc_cfg.max_len;
  Tokenized empty_tok = tokenize(vocab, "", max_len);

  bb.set_trainable(true);
  Params params = bb.all_params();
  std::vector<Tensor> train_vec = params.trainable();
  Adam opt;
  opt.lr = lr;
  opt.clip = clip;

  Rng rbatch = rng.child("batch");
  Rng rnoise = rng.child("noise");
  Rng rlevel = rng.child("levels");
  Rng rdrop = rng.child("drop");
  Rng rval = rng.child("val");

  // Fixed validation fixture: images, noises and levels drawn once, so the
  // plateau signal is free of sampling jitter.
  std::vector<ValItem> fixture;
  if (max_steps > 0) {
    require(!corpus.val.empty(), ErrorKind::contract, "pretrain: empty validation split");
    for (int i = 0; i < val_batch; ++i) {
      const Example& ex = corpus.val[i % corpus.val.size()];
      ValItem it;
      it.z0 = image_to_latent(corpus.image(ex));
      it.eps.resize((size_t)hw * bb.den_cfg.ch);
      rval.fill_normal(it.eps);
      it.t = (int)rval.uniform_int(1, T);
      it.tok = tokenize(vocab, ex.caption, max_len);
      fixture.push_back(std::move(it));
    }
  }
  auto val_loss = [&]() {
    double s = 0;
    for (const ValItem& it : fixture)
      s += batch_item_loss(bb, it.z0, it.eps, it.t, it.tok.ids, 0.f, false);
    return s / fixture.size();
  };

  PretrainReport rep;
  double best = 0;
  bool have_best = false;
  int bad = 0;
  float inv_batch = 1.f / batch;

  for (int step = 1; step <= max_steps; ++step) {
    double loss_acc = 0;
    for (int b = 0; b < batch; ++b) {
      const Example& ex = corpus.train[rbatch.uniform_int(0, (int64_t)corpus.train.size() - 1)];
      Tensor z0 = image_to_latent(corpus.image(ex));
      std::vector<float> eps((size_t)hw * bb.den_cfg.ch);
      rnoise.fill_normal(eps);
      int t = (int)rlevel.uniform_int(1, T);
      bool drop = rdrop.bernoulli(cond_drop);
      const Tokenized& tok = drop ? empty_tok : tokenize(vocab, ex.caption, max_len);
      loss_acc += inv_batch * batch_item_loss(bb, z0, eps, t, tok.ids, inv_batch, true);
    }
    require(std::isfinite(loss_acc), ErrorKind::training,
            "pretrain: loss diverged at step " + std::to_string(step));
    opt.step(train_vec);
    rep.train_losses.push_back((float)loss_acc);
    rep.steps_run = step;

    if (step % val_every == 0) {
      double v = val_loss();
      rep.val_curve.emplace_back(step, v);
      rep.final_val = v;
      if (!have_best || v < best * (1.0 - plateau_rel)) {
        best = v;
        have_best = true;
        bad = 0;
      } else {
        ++bad;
      }
      if (bad >= patience && step >= min_steps) {
        rep.plateaued = true;
        break;
      }
    }
  }

  if (max_steps > 0 && require_convergence)
    require(rep.plateaued, ErrorKind::training,
            "pretrain: validation loss still improving after " + std::to_string(max_steps) +
                " steps");
  bb.set_trainable(false);
  bb.trained_steps = rep.steps_run;
  bb.model_hash = cfg.model_hash();
  return rep;
}

}  // namespace ltxb
