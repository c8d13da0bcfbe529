#include "ltxb/customize.hpp"

#include <cmath>
#include <string>

#include "ltxb/denoiser.hpp"
#include "ltxb/hashing.hpp"
#include "ltxb/optim.hpp"
#include "ltxb/serialize.hpp"

#include "json.hpp"

namespace ltxb {

using nlohmann::json;

namespace {

Tensor detach(const Tensor& t) { return Tensor::from(t.shape(), t.data()); }

// requires_grad flags are operational scaffolding, not model state; freezing
// through a const reference keeps the read-only signatures honest.
void ensure_frozen(const Backbone& bb) { const_cast<Backbone&>(bb).set_trainable(false); }

const char* mode_name(TemplateMode m) {
  return m == TemplateMode::variable ? "variable" : "fixed";
}

const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::none: return "none";
    case Ablation::no_base: return "no_base";
    default: return "no_base_bare";
  }
}

}  // namespace

ConceptSpec concept_spec_from_corpus(const Corpus& corpus, const Vocab& vocab,
                                     const std::string& name, const std::string& identifier) {
  const ConceptSet& cs = corpus.concept_set(name);
  int ident_id = vocab.id(identifier);
  require(vocab.is_identifier(ident_id), ErrorKind::vocabulary,
          "'" + identifier + "' is not in the reserved identifier block");
  require(cs.files.size() >= 3, ErrorKind::contract,
          "concept '" + name + "' needs at least 3 reference images");
  ConceptSpec spec{name, identifier, cs.noun, cs.files};
  if (spec.ref_files.size() > 5) spec.ref_files.resize(5);
  return spec;
}

FinetuneConfig FinetuneConfig::from_config(const Config& cfg) {
  FinetuneConfig fc;
  fc.steps = (int)cfg.get_int("finetune.steps", fc.steps);
  fc.lr = (float)cfg.get_float("finetune.lr", fc.lr);
  fc.clip = (float)cfg.get_float("finetune.clip", fc.clip);
  fc.prior_weight = (float)cfg.get_float("finetune.prior_weight", fc.prior_weight);
  fc.flip_prob = (float)cfg.get_float("finetune.flip_prob", fc.flip_prob);
  std::string mode = cfg.get_str("finetune.template_mode", "variable");
  if (mode == "variable")
    fc.template_mode = TemplateMode::variable;
  else if (mode == "fixed")
    fc.template_mode = TemplateMode::fixed;
  else
    fail(ErrorKind::config, "finetune.template_mode must be 'variable' or 'fixed'");
  std::string abl = cfg.get_str("finetune.ablation", "none");
  if (abl == "none")
    fc.ablation = Ablation::none;
  else if (abl == "no_base")
    fc.ablation = Ablation::no_base;
  else if (abl == "no_base_bare")
    fc.ablation = Ablation::no_base_bare;
  else
    fail(ErrorKind::config, "finetune.ablation must be 'none', 'no_base' or 'no_base_bare'");
  return fc;
}

uint64_t FinetuneConfig::fingerprint() const {
  std::string s = "steps=" + std::to_string(steps) + ";lr=" + std::to_string(lr) +
                  ";clip=" + std::to_string(clip) + ";prior=" + std::to_string(prior_weight) +
                  ";flip=" + std::to_string(flip_prob) + ";mode=" + mode_name(template_mode) +
                  ";ablation=" + ablation_name(ablation);
  return fnv1a64(s);
}

DualPrompts build_dual_prompts(const Vocab& vocab, const ConceptSpec& spec, TemplateMode mode,
                               Rng& rng) {
  DualPrompts dp;
  if (mode == TemplateMode::fixed) {
    dp.tb = dp.tc = templates::kFixedMode;
  } else {
    dp.tb = (int)rng.uniform_int(0, templates::kCount - 1);
    dp.tc = (int)rng.uniform_int(0, templates::kCount - 1);
  }
  dp.base = templates::subject_prompt(dp.tb, "a", spec.noun);
  dp.conc = templates::subject_prompt(dp.tc, spec.identifier, spec.noun);
  dp.base_tok = tokenize(vocab, dp.base);
  dp.conc_tok = tokenize(vocab, dp.conc);
  dp.base_span = templates::span(dp.tb);
  dp.conc_span = templates::span(dp.tc);
  return dp;
}

std::vector<KV> train_blend(const std::vector<KV>& base, const std::vector<KV>& conc,
                            templates::Span conc_span, templates::Span base_span) {
  require(base.size() == conc.size(), ErrorKind::dimension,
          "train_blend: flows disagree on the layer count");
  require(base_span.article_pos > 0 && base_span.noun_pos > 0 &&
              base_span.article_pos != base_span.noun_pos,
          ErrorKind::contract, "train_blend: base prompt lacks a usable article/noun slot");
  std::vector<int> src = {conc_span.article_pos, conc_span.noun_pos};
  std::vector<int> dst = {base_span.article_pos, base_span.noun_pos};
  std::vector<KV> out;
  out.reserve(base.size());
  for (size_t l = 0; l < base.size(); ++l) {
    Tensor k = replace_rows(detach(base[l].k), gather_rows(conc[l].k, src), dst);
    Tensor v = replace_rows(detach(base[l].v), gather_rows(conc[l].v, src), dst);
    out.push_back({k, v});
  }
  return out;
}

std::vector<int> ConceptState::identifier_positions(const Tokenized& tok,
                                                    const Vocab& vocab) const {
  int ident = vocab.id(spec.identifier);
  std::vector<int> pos;
  for (int i = 0; i < (int)tok.ids.size(); ++i)
    if (tok.ids[i] == ident) pos.push_back(i);
  require(!pos.empty(), ErrorKind::contract,
          "prompt does not mention identifier '" + spec.identifier + "'");
  return pos;
}

std::vector<KV> ConceptState::flow(const Backbone& bb, const Vocab& vocab,
                                   const Tokenized& tok) const {
  return proj.project(bb.enc.encode(tok.ids, emb, identifier_positions(tok, vocab)));
}

ConceptState init_concept_state(const Backbone& bb, const Vocab& vocab, const ConceptSpec& spec,
                                Rng& rng) {
  ConceptState st;
  st.spec = spec;
  int d = bb.enc_cfg.d_model;
  int nid = vocab.id(spec.noun);
  const std::vector<float>& table = bb.enc.token_table().data();
  std::vector<float> row(d);
  for (int i = 0; i < d; ++i)
    row[i] = table[(size_t)nid * d + i] + (float)rng.normal(0.0, 0.01);
  st.emb = Tensor::from({1, d}, std::move(row), true);
  st.proj = bb.proj.clone(true);
  st.backbone_hash = bb.model_hash;
  return st;
}

namespace {

struct EvalPair {
  std::vector<float> eps;
  int t = 1;
};

// Conditioning for one training (or evaluation) draw under the chosen
// ablation. The standard path blends the concept rows into the detached base
// grid; the ablations feed the concept flow straight through.
std::vector<KV> conditioning_for(const Backbone& bb, const Vocab& vocab, const ConceptState& st,
                                 const DualPrompts& dp, Ablation ablation) {
  if (ablation == Ablation::none) {
    std::vector<KV> kvb = bb.condition(dp.base_tok.ids);
    std::vector<KV> kvc = st.flow(bb, vocab, dp.conc_tok);
    return train_blend(kvb, kvc, dp.conc_span, dp.base_span);
  }
  if (ablation == Ablation::no_base) return st.flow(bb, vocab, dp.conc_tok);
  Tokenized bare = tokenize(vocab, st.spec.identifier + " " + st.spec.noun,
                            bb.enc_cfg.max_len);
  return st.flow(bb, vocab, bare);
}

}  // namespace

double reconstruction_loss(const Backbone& bb, const Corpus& corpus, const Vocab& vocab,
                           const ConceptState& state, Ablation ablation) {
  ensure_frozen(bb);
  int T = bb.sch.T;
  int n = (int)bb.den_cfg.ch * bb.den_cfg.h * bb.den_cfg.w;
  Rng rng(fnv1a64("recon_eval:" + state.spec.name));
  DualPrompts dp;
  {
    Rng unused(0);
    dp = build_dual_prompts(vocab, state.spec, TemplateMode::fixed, unused);
  }
  std::vector<KV> cond = conditioning_for(bb, vocab, state, dp, ablation);
  double total = 0;
  int count = 0;
  for (const std::string& f : state.spec.ref_files) {
    Tensor z0 = image_to_latent(corpus.image(f));
    for (int j = 0; j < 4; ++j) {
      int t = std::max(1, (int)std::lround((double)T * (j + 1) / 5.0));
      std::vector<float> eps(n);
      rng.fill_normal(eps);
      Tensor e = Tensor::from(z0.shape(), std::move(eps));
      Tensor r = sub(bb.den.forward(bb.sch.add_noise(z0, e, t), t, cond).eps, e);
      total += sum_all(mul(r, r)).item();
      ++count;
    }
  }
  return total / count;
}

double prior_loss(const Backbone& bb, const Corpus& corpus, const Vocab& vocab,
                  const ConceptState& state, int draws, const Rng& rng) {
  ensure_frozen(bb);
  require(draws > 0, ErrorKind::contract, "prior_loss: need at least one draw");
  std::vector<const Example*> pool;
  for (const Example& ex : corpus.train)
    if (ex.combos.size() == 1 && combo_noun(ex.combos[0]) == state.spec.noun)
      pool.push_back(&ex);
  require(!pool.empty(), ErrorKind::contract,
          "prior_loss: no prior images for noun '" + state.spec.noun + "'");
  Tokenized tok = tokenize(vocab, "a " + state.spec.noun + ".", bb.enc_cfg.max_len);
  std::vector<KV> cond = state.proj.project(detach(bb.enc.encode(tok.ids)));
  int T = bb.sch.T;
  int n = (int)bb.den_cfg.ch * bb.den_cfg.h * bb.den_cfg.w;
  Rng r = rng;
  double total = 0;
  for (int i = 0; i < draws; ++i) {
    const Example& ex = *pool[r.uniform_int(0, (int64_t)pool.size() - 1)];
    Tensor z0 = image_to_latent(corpus.image(ex));
    std::vector<float> ev(n);
    r.fill_normal(ev);
    Tensor eps = Tensor::from(z0.shape(), std::move(ev));
    int t = (int)r.uniform_int(1, T);
    Tensor res = sub(bb.den.forward(bb.sch.add_noise(z0, eps, t), t, cond).eps, eps);
    total += sum_all(mul(res, res)).item();
  }
  return total / draws;
}

ConceptState finetune_concept(const Backbone& bb, const Corpus& corpus, const Vocab& vocab,
                              const ConceptSpec& spec, const FinetuneConfig& fc, const Rng& rng,
                              FinetuneReport* rep) {
  ensure_frozen(bb);
  int T = bb.sch.T;
  int max_len = bb.enc_cfg.max_len;
  int n = (int)bb.den_cfg.ch * bb.den_cfg.h * bb.den_cfg.w;

  Rng rinit = rng.child("init");
  ConceptState st = init_concept_state(bb, vocab, spec, rinit);

  Params reg;
  reg.add("concept.emb", st.emb);
  st.proj.collect(reg, "concept.");
  reg.set_trainable(true);
  std::vector<Tensor> trainable = reg.trainable();
  SgdClip opt{fc.lr, fc.clip};

  // reference latents, plain and mirrored
  std::vector<Tensor> refs, refs_flipped;
  for (const std::string& f : spec.ref_files) {
    Image img = corpus.image(f);
    refs.push_back(image_to_latent(img));
    refs_flipped.push_back(image_to_latent(hflip(img)));
  }
  require(!refs.empty(), ErrorKind::contract, "finetune: empty reference set");

  // class-prior pool: single-subject generation images of the same noun
  std::vector<const Example*> prior_pool;
  for (const Example& ex : corpus.train)
    if (ex.combos.size() == 1 && combo_noun(ex.combos[0]) == spec.noun)
      prior_pool.push_back(&ex);
  bool use_prior = fc.prior_weight != 0.f;
  if (use_prior)
    require(!prior_pool.empty(), ErrorKind::contract,
            "finetune: no prior images for noun '" + spec.noun + "'");
  Tokenized prior_tok = tokenize(vocab, "a " + spec.noun + ".", max_len);
  Tensor e_prior = detach(bb.enc.encode(prior_tok.ids));

  Rng rtmpl = rng.child("templates");
  Rng rref = rng.child("ref");
  Rng rflip = rng.child("flip");
  Rng rnoise = rng.child("noise");
  Rng rlevel = rng.child("levels");
  Rng rprior_pick = rng.child("prior_pick");
  Rng rprior_noise = rng.child("prior_noise");
  Rng rprior_level = rng.child("prior_levels");

  if (rep) rep->recon_start = reconstruction_loss(bb, corpus, vocab, st, fc.ablation);

  for (int step = 1; step <= fc.steps; ++step) {
    DualPrompts dp = build_dual_prompts(vocab, spec, fc.template_mode, rtmpl);
    int ri = (int)rref.uniform_int(0, (int64_t)refs.size() - 1);
    bool flip = rflip.bernoulli(fc.flip_prob);
    const Tensor& z0 = flip ? refs_flipped[ri] : refs[ri];
    std::vector<float> ev(n);
    rnoise.fill_normal(ev);
    Tensor eps = Tensor::from(z0.shape(), std::move(ev));
    int t = (int)rlevel.uniform_int(1, T);

    std::vector<KV> cond = conditioning_for(bb, vocab, st, dp, fc.ablation);
    Tensor r = sub(bb.den.forward(bb.sch.add_noise(z0, eps, t), t, cond).eps, eps);
    Tensor total = sum_all(mul(r, r));

    if (use_prior) {
      const Example& pe = *prior_pool[rprior_pick.uniform_int(0, (int64_t)prior_pool.size() - 1)];
      Tensor zp = image_to_latent(corpus.image(pe));
      std::vector<float> pv(n);
      rprior_noise.fill_normal(pv);
      Tensor peps = Tensor::from(zp.shape(), std::move(pv));
      int pt = (int)rprior_level.uniform_int(1, T);
      std::vector<KV> pcond = st.proj.project(e_prior);
      Tensor pr = sub(bb.den.forward(bb.sch.add_noise(zp, peps, pt), pt, pcond).eps, peps);
      total = add(total, scale(sum_all(mul(pr, pr)), fc.prior_weight));
    }

    double lv = total.item();
    require(std::isfinite(lv), ErrorKind::training,
            "finetune: loss diverged at step " + std::to_string(step));
    backward(total);
    opt.step(trainable);
    if (rep) rep->losses.push_back((float)lv);
  }

  st.steps_trained = fc.steps;
  st.config_hash = fc.fingerprint();
  if (rep) rep->recon_end = reconstruction_loss(bb, corpus, vocab, st, fc.ablation);
  return st;
}

void ConceptState::save(const std::string& path) const {
  TensorFile tf;
  json meta;
  meta["kind"] = "concept_state";
  meta["name"] = spec.name;
  meta["identifier"] = spec.identifier;
  meta["noun"] = spec.noun;
  meta["ref_files"] = spec.ref_files;
  meta["backbone_hash"] = hash_hex(backbone_hash);
  meta["config_hash"] = hash_hex(config_hash);
  meta["steps_trained"] = steps_trained;
  tf.metadata_json = meta.dump();
  Params reg;
  reg.add("concept.emb", emb);
  proj.collect(reg, "concept.");
  reg.save_into(tf);
  write_tensor_file(path, tf);
}

ConceptState ConceptState::load(const std::string& path, const Backbone& bb) {
  TensorFile tf = read_tensor_file(path);
  json meta = json::parse(tf.metadata_json);
  require(meta.value("kind", "") == "concept_state", ErrorKind::compatibility,
          path + " does not hold a concept state");
  ConceptState st;
  st.spec.name = meta["name"];
  st.spec.identifier = meta["identifier"];
  st.spec.noun = meta["noun"];
  st.spec.ref_files = meta["ref_files"].get<std::vector<std::string>>();
  st.backbone_hash = std::stoull(meta["backbone_hash"].get<std::string>(), nullptr, 16);
  st.config_hash = std::stoull(meta["config_hash"].get<std::string>(), nullptr, 16);
  st.steps_trained = meta["steps_trained"];
  require(st.backbone_hash == bb.model_hash, ErrorKind::compatibility,
          "concept state '" + st.spec.name + "' was trained against a different backbone");
  st.emb = Tensor::zeros({1, bb.enc_cfg.d_model});
  st.proj = bb.proj.clone(false);
  Params reg;
  reg.add("concept.emb", st.emb);
  st.proj.collect(reg, "concept.");
  reg.load_from(tf);
  reg.set_trainable(false);
  return st;
}

}  // namespace ltxb
