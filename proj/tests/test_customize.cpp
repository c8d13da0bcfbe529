#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "ltxb/customize.hpp"
#include "ltxb/denoiser.hpp"

using namespace ltxb;

namespace {

const char* kTiny =
    "seed = 5\n"
    "[model]\n"
    "d_model = 32\n"
    "enc_layers = 1\n"
    "heads = 2\n"
    "w1 = 8\n"
    "w2 = 16\n"
    "d_latent = 32\n"
    "temb = 32\n"
    "[schedule]\n"
    "T = 20\n"
    "[data]\n"
    "train_n = 40\n"
    "val_n = 8\n"
    "concept_refs = 4\n"
    "oracle_per_combo = 1\n"
    "oracle_val_per_combo = 1\n";

const std::string& corpus_root() {
  static std::string root;
  if (root.empty()) {
    root = (std::filesystem::temp_directory_path() / "ltxb_cust_corpus").string();
    std::filesystem::remove_all(root);
    Corpus::synthesize(Config::parse_string(kTiny), root);
  }
  return root;
}

struct Fixture {
  Vocab vocab = Vocab::standard();
  Corpus corpus;
  Backbone bb;
  ConceptSpec spec;

  Fixture() : corpus(Corpus::load(corpus_root())), bb(make_backbone()) {
    bb.model_hash = 0x1234;
    spec = concept_spec_from_corpus(corpus, vocab, "c1", "v1*");
  }

  static Backbone make_backbone() {
    Config cfg = Config::parse_string(kTiny);
    Backbone bb = Backbone::from_config(cfg, Vocab::standard());
    Rng rng(5);
    bb.init(rng);
    bb.set_trainable(false);
    return bb;
  }
};

std::vector<std::vector<float>> snapshot(Params& p) {
  std::vector<std::vector<float>> out;
  for (auto& [n, t] : p.items()) out.push_back(t.data());
  return out;
}

}  // namespace

TEST_CASE("concept specs come out of the corpus with a valid identifier") {
  Fixture fx;
  CHECK(fx.spec.noun == "circle");
  CHECK(fx.spec.ref_files.size() == 4);
  try {
    concept_spec_from_corpus(fx.corpus, fx.vocab, "c1", "circle");
    FAIL("expected a vocabulary error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::vocabulary);
  }
}

TEST_CASE("fixed mode pins both prompts to the standard template") {
  Fixture fx;
  Rng rng(1);
  DualPrompts dp = build_dual_prompts(fx.vocab, fx.spec, TemplateMode::fixed, rng);
  CHECK(dp.base == "A photo of a circle.");
  CHECK(dp.conc == "A photo of v1* circle.");
  CHECK(dp.base_span.article_pos == 4);
  CHECK(dp.base_span.noun_pos == 5);
  CHECK(dp.conc_tok.ids[dp.conc_span.article_pos] == fx.vocab.id("v1*"));
  CHECK(dp.conc_tok.ids[dp.conc_span.noun_pos] == fx.vocab.id("circle"));
}

TEST_CASE("variable mode draws the two templates independently") {
  Fixture fx;
  Rng rng(42);
  int counts[7][7] = {};
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    DualPrompts dp = build_dual_prompts(fx.vocab, fx.spec, TemplateMode::variable, rng);
    ++counts[dp.tb][dp.tc];
  }
  double row[7] = {}, col[7] = {};
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j) {
      row[i] += counts[i][j];
      col[j] += counts[i][j];
    }
  double chi2 = 0;
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j) {
      double e = row[i] * col[j] / n;
      chi2 += (counts[i][j] - e) * (counts[i][j] - e) / e;
    }
  // df = 36, far below the 0.999 quantile
  CHECK(chi2 < 67.985);

  Rng replay(42);
  DualPrompts dp = build_dual_prompts(fx.vocab, fx.spec, TemplateMode::variable, replay);
  Rng replay2(42);
  DualPrompts dp2 = build_dual_prompts(fx.vocab, fx.spec, TemplateMode::variable, replay2);
  CHECK(dp.tb == dp2.tb);
  CHECK(dp.tc == dp2.tc);
}

TEST_CASE("identifier seeded with the article embedding reproduces the plain flow") {
  Fixture fx;
  int d = fx.bb.enc_cfg.d_model;
  int aid = fx.vocab.id("a");
  const auto& table = fx.bb.enc.token_table().data();
  ConceptState st;
  st.spec = fx.spec;
  st.emb = Tensor::from({1, d}, std::vector<float>(table.begin() + (size_t)aid * d,
                                                   table.begin() + (size_t)(aid + 1) * d));
  st.proj = fx.bb.proj.clone(false);

  Rng rng(3);
  DualPrompts dp = build_dual_prompts(fx.vocab, fx.spec, TemplateMode::fixed, rng);
  std::vector<KV> base = fx.bb.condition(dp.base_tok.ids);
  std::vector<KV> conc = st.flow(fx.bb, fx.vocab, dp.conc_tok);
  std::vector<KV> out = train_blend(base, conc, dp.conc_span, dp.base_span);
  for (size_t l = 0; l < base.size(); ++l) {
    CHECK(out[l].k.data() == base[l].k.data());
    CHECK(out[l].v.data() == base[l].v.data());
  }
}

TEST_CASE("train_blend swaps exactly the span rows") {
  Fixture fx;
  Rng rng(9);
  int M = fx.bb.enc_cfg.max_len, d = fx.bb.proj.d_latent;
  std::vector<KV> base, conc;
  for (int l = 0; l < 4; ++l) {
    base.push_back({Tensor::randn({M, d}, rng), Tensor::randn({M, d}, rng)});
    conc.push_back({Tensor::randn({M, d}, rng), Tensor::randn({M, d}, rng)});
  }
  templates::Span cs{2, 3}, bs{4, 5};
  std::vector<KV> out = train_blend(base, conc, cs, bs);
  for (int l = 0; l < 4; ++l) {
    std::vector<float> want = base[l].k.data();
    for (int c = 0; c < d; ++c) {
      want[(size_t)4 * d + c] = conc[l].k.data()[(size_t)2 * d + c];
      want[(size_t)5 * d + c] = conc[l].k.data()[(size_t)3 * d + c];
    }
    CHECK(out[l].k.data() == want);
    std::vector<float> wantv = base[l].v.data();
    for (int c = 0; c < d; ++c) {
      wantv[(size_t)4 * d + c] = conc[l].v.data()[(size_t)2 * d + c];
      wantv[(size_t)5 * d + c] = conc[l].v.data()[(size_t)3 * d + c];
    }
    CHECK(out[l].v.data() == wantv);
  }
}

TEST_CASE("zero steps leaves the state at its initialization") {
  Fixture fx;
  FinetuneConfig fc;
  fc.steps = 0;
  Rng base(77);
  ConceptState st = finetune_concept(fx.bb, fx.corpus, fx.vocab, fx.spec, fc, base.child("ft"));
  Rng ri = base.child("ft").child("init");
  ConceptState fresh = init_concept_state(fx.bb, fx.vocab, fx.spec, ri);
  CHECK(st.emb.data() == fresh.emb.data());
  for (int l = 0; l < fx.bb.proj.layers; ++l) {
    CHECK(st.proj.wk[l].data() == fresh.proj.wk[l].data());
    CHECK(st.proj.wv[l].data() == fresh.proj.wv[l].data());
  }
}

TEST_CASE("training touches only the identifier row and the projection copies") {
  Fixture fx;
  Params frozen = fx.bb.all_params();
  std::vector<std::vector<float>> before = snapshot(frozen);

  FinetuneConfig fc;
  fc.steps = 3;
  Rng base(11);
  ConceptState st = finetune_concept(fx.bb, fx.corpus, fx.vocab, fx.spec, fc, base.child("ft"));
  std::vector<std::vector<float>> after = snapshot(frozen);
  for (size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);
  for (auto& [n, t] : frozen.items()) CHECK(!t.has_grad());

  Rng ri = base.child("ft").child("init");
  ConceptState fresh = init_concept_state(fx.bb, fx.vocab, fx.spec, ri);
  CHECK(st.emb.data() != fresh.emb.data());
  bool proj_moved = false;
  for (int l = 0; l < fx.bb.proj.layers; ++l)
    proj_moved = proj_moved || st.proj.wk[l].data() != fresh.proj.wk[l].data();
  CHECK(proj_moved);
}

TEST_CASE("perturbing trainable state moves only the replaced rows") {
  Fixture fx;
  Rng base(13);
  FinetuneConfig fc;
  fc.steps = 0;
  ConceptState st = finetune_concept(fx.bb, fx.corpus, fx.vocab, fx.spec, fc, base.child("ft"));
  Rng rng(3);
  DualPrompts dp = build_dual_prompts(fx.vocab, fx.spec, TemplateMode::fixed, rng);
  std::vector<KV> kvb = fx.bb.condition(dp.base_tok.ids);
  auto blended = [&]() {
    return train_blend(kvb, st.flow(fx.bb, fx.vocab, dp.conc_tok), dp.conc_span, dp.base_span);
  };
  std::vector<KV> a = blended();
  st.emb.data()[0] += 0.5f;
  st.proj.wk[1].data()[7] += 0.25f;
  std::vector<KV> b = blended();

  int d = fx.bb.proj.d_latent;
  for (size_t l = 0; l < a.size(); ++l) {
    bool span_changed = false;
    for (int r = 0; r < fx.bb.enc_cfg.max_len; ++r) {
      const float* ra = a[l].k.data().data() + (size_t)r * d;
      const float* rb = b[l].k.data().data() + (size_t)r * d;
      bool same = std::memcmp(ra, rb, sizeof(float) * d) == 0;
      if (r == dp.base_span.article_pos || r == dp.base_span.noun_pos)
        span_changed = span_changed || !same;
      else
        CHECK(same);
    }
    CHECK(span_changed);
  }
}

TEST_CASE("ablation variants train the same parameter shapes") {
  Fixture fx;
  for (Ablation abl : {Ablation::no_base, Ablation::no_base_bare}) {
    FinetuneConfig fc;
    fc.steps = 2;
    fc.ablation = abl;
    Rng base(21);
    ConceptState st = finetune_concept(fx.bb, fx.corpus, fx.vocab, fx.spec, fc, base.child("ft"));
    CHECK(st.emb.shape() == Shape{1, fx.bb.enc_cfg.d_model});
    CHECK(st.proj.wk.size() == (size_t)fx.bb.proj.layers);
    CHECK(st.steps_trained == 2);
  }
}

TEST_CASE("reconstruction loss fixture is deterministic and ablation-aware") {
  Fixture fx;
  Rng base(31);
  FinetuneConfig fc;
  fc.steps = 0;
  ConceptState st = finetune_concept(fx.bb, fx.corpus, fx.vocab, fx.spec, fc, base.child("ft"));
  double a = reconstruction_loss(fx.bb, fx.corpus, fx.vocab, st);
  double b = reconstruction_loss(fx.bb, fx.corpus, fx.vocab, st);
  CHECK(a == b);
  CHECK(std::isfinite(a));
  double c = reconstruction_loss(fx.bb, fx.corpus, fx.vocab, st, Ablation::no_base);
  CHECK(std::isfinite(c));
}

TEST_CASE("prior loss is deterministic per seed and blows up under garbage projections") {
  Fixture fx;
  Rng base(41);
  FinetuneConfig fc;
  fc.steps = 0;
  ConceptState st = finetune_concept(fx.bb, fx.corpus, fx.vocab, fx.spec, fc, base.child("ft"));
  double p0 = prior_loss(fx.bb, fx.corpus, fx.vocab, st, 8, Rng(99));
  double p0b = prior_loss(fx.bb, fx.corpus, fx.vocab, st, 8, Rng(99));
  CHECK(p0 == p0b);

  Rng noise(5);
  for (int l = 0; l < st.proj.layers; ++l)
    for (auto* w : {&st.proj.wk[l], &st.proj.wv[l]})
      for (auto& v : w->data()) v += (float)noise.normal(0.0, 3.0);
  double p1 = prior_loss(fx.bb, fx.corpus, fx.vocab, st, 8, Rng(99));
  CHECK(p1 > p0);
}

TEST_CASE("concept state round-trips through disk and rejects foreign backbones") {
  Fixture fx;
  Rng base(51);
  FinetuneConfig fc;
  fc.steps = 1;
  ConceptState st = finetune_concept(fx.bb, fx.corpus, fx.vocab, fx.spec, fc, base.child("ft"));
  auto path = (std::filesystem::temp_directory_path() / "ltxb_state.ltxb").string();
  st.save(path);
  ConceptState back = ConceptState::load(path, fx.bb);
  CHECK(back.emb.data() == st.emb.data());
  for (int l = 0; l < st.proj.layers; ++l) {
    CHECK(back.proj.wk[l].data() == st.proj.wk[l].data());
    CHECK(back.proj.wv[l].data() == st.proj.wv[l].data());
  }
  CHECK(back.spec.identifier == "v1*");
  CHECK(back.config_hash == fc.fingerprint());

  Backbone other = Fixture::make_backbone();
  other.model_hash = 0x9999;
  try {
    ConceptState::load(path, other);
    FAIL("expected a compatibility error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::compatibility);
  }
  std::filesystem::remove(path);
}
