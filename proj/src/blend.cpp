#include "ltxb/blend.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace ltxb {

namespace {

Tensor constant_copy(const Tensor& t) { return Tensor::from(t.shape(), t.data()); }

std::vector<KV> constant_copy(const std::vector<KV>& kv) {
  std::vector<KV> out;
  out.reserve(kv.size());
  for (const auto& l : kv) out.push_back({constant_copy(l.k), constant_copy(l.v)});
  return out;
}

struct ConceptArg {
  std::string name;
  int pos = -1;
};

ConceptArg parse_concept_arg(const std::string& raw) {
  ConceptArg out;
  auto at = raw.find('@');
  if (at == std::string::npos) {
    out.name = raw;
    return out;
  }
  out.name = raw.substr(0, at);
  std::string tail = raw.substr(at + 1);
  require(!tail.empty() && tail.find_first_not_of("0123456789") == std::string::npos,
          ErrorKind::planning, "span override in '" + raw + "' must be a token position");
  out.pos = std::stoi(tail);
  return out;
}

void check_record(const ConceptRecord& rec, const Backbone& bb) {
  require(rec.backbone_hash == bb.model_hash, ErrorKind::compatibility,
          "concept '" + rec.name + "' was extracted from a different backbone");
  require(rec.layers() == bb.proj.layers && rec.d_latent() == bb.proj.d_latent,
          ErrorKind::compatibility,
          "concept '" + rec.name + "' does not match the conditioning geometry");
}

}  // namespace

std::vector<templates::Span> BlendPlan::spans() const {
  std::vector<templates::Span> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.span);
  return out;
}

BlendPlan plan_blend(const std::string& prompt, const std::vector<std::string>& concepts,
                     const ConceptBank& bank, const Backbone& bb, const Vocab& vocab) {
  BlendPlan plan;
  plan.tok = tokenize(vocab, prompt, bb.enc_cfg.max_len);

  bool has_ident = false;
  for (int p = 0; p < plan.tok.length; ++p)
    has_ident = has_ident || vocab.is_identifier(plan.tok.ids[p]);

  if (has_ident) {
    require(concepts.empty(), ErrorKind::planning,
            "an identifier-bearing prompt cannot also take a concept list");
    std::map<std::string, std::vector<std::string>> ident_names;
    std::map<std::string, ConceptRecord> by_name;
    for (const std::string& name : bank.names()) {
      ConceptRecord rec = bank.load(name);
      ident_names[rec.identifier].push_back(name);
      by_name.emplace(name, std::move(rec));
    }
    for (int p = 1; p < plan.tok.length; ++p) {
      if (!vocab.is_identifier(plan.tok.ids[p])) continue;
      const std::string& word = vocab.word(plan.tok.ids[p]);
      auto it = ident_names.find(word);
      require(it != ident_names.end(), ErrorKind::not_found,
              "no concept in the bank uses identifier '" + word + "'");
      require(it->second.size() == 1, ErrorKind::planning,
              "identifier '" + word + "' is claimed by more than one stored concept");
      ConceptRecord& rec = by_name.at(it->second[0]);
      check_record(rec, bb);
      require(p + 1 < plan.tok.length && plan.tok.ids[p + 1] == vocab.id(rec.noun),
              ErrorKind::planning,
              "identifier '" + word + "' must be followed by its class noun '" + rec.noun + "'");
      plan.entries.push_back({rec.name, {p, p + 1}, rec});
      plan.tok.ids[p] = vocab.id("a");
    }
    plan.prompt = detokenize(vocab, plan.tok.ids);
  } else {
    plan.prompt = prompt;
    for (const std::string& raw : concepts) {
      ConceptArg arg = parse_concept_arg(raw);
      ConceptRecord rec = bank.load(arg.name);
      check_record(rec, bb);
      int noun_id = vocab.id(rec.noun);
      int noun_pos = -1;
      if (arg.pos >= 0) {
        require(arg.pos > 0 && arg.pos < plan.tok.length, ErrorKind::planning,
                "span override for '" + arg.name + "' is outside the prompt");
        require(plan.tok.ids[arg.pos] == noun_id, ErrorKind::planning,
                "token " + std::to_string(arg.pos) + " is not '" + rec.noun + "'");
        noun_pos = arg.pos;
      } else {
        int count = 0;
        for (int p = 1; p < plan.tok.length; ++p)
          if (plan.tok.ids[p] == noun_id) {
            ++count;
            noun_pos = p;
          }
        require(count != 0, ErrorKind::planning,
                "the prompt does not mention '" + rec.noun + "' for concept '" + arg.name + "'");
        require(count == 1, ErrorKind::planning,
                "'" + rec.noun + "' appears " + std::to_string(count) +
                    " times; disambiguate with '" + arg.name + "@pos'");
      }
      int art = noun_pos - 1;
      require(art >= 1 &&
                  (plan.tok.ids[art] == vocab.id("a") || plan.tok.ids[art] == vocab.id("the")),
              ErrorKind::planning,
              "'" + rec.noun + "' needs a preceding article to blend '" + arg.name + "' into");
      plan.entries.push_back({arg.name, {art, noun_pos}, std::move(rec)});
    }
  }

  std::set<int> used;
  for (const auto& e : plan.entries)
    for (int pos : {e.span.article_pos, e.span.noun_pos})
      require(used.insert(pos).second, ErrorKind::planning,
              "concept spans overlap at token " + std::to_string(pos));
  return plan;
}

std::vector<KV> blend_multi(const std::vector<KV>& base, const BlendPlan& plan) {
  if (plan.entries.empty()) return base;
  require(!base.empty(), ErrorKind::dimension, "blend_multi needs conditioning layers");
  int rows = base[0].k.rows();
  int cols = base[0].k.cols();

  std::set<int> used;
  for (const auto& e : plan.entries) {
    require(e.rec.layers() == (int)base.size(), ErrorKind::compatibility,
            "record for '" + e.name + "' has the wrong layer count");
    require(e.rec.d_latent() == cols, ErrorKind::dimension,
            "record for '" + e.name + "' has the wrong feature width");
    for (int pos : {e.span.article_pos, e.span.noun_pos}) {
      require(pos >= 0 && pos < rows, ErrorKind::planning,
              "blend span for '" + e.name + "' is outside the conditioning grid");
      require(used.insert(pos).second, ErrorKind::planning,
              "blend spans overlap at token " + std::to_string(pos));
    }
  }

  std::vector<KV> out = base;
  for (const auto& e : plan.entries) {
    std::vector<int> idx = {e.span.article_pos, e.span.noun_pos};
    for (size_t l = 0; l < out.size(); ++l) {
      out[l].k = replace_rows(out[l].k, constant_copy(e.rec.rows[l].k), idx);
      out[l].v = replace_rows(out[l].v, constant_copy(e.rec.rows[l].v), idx);
    }
  }
  return out;
}

Tensor overlap(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), ErrorKind::dimension, "overlap needs identical map shapes");
  Tensor sa = sum_all(a), sb = sum_all(b);
  require(sa.item() > 0.f && sb.item() > 0.f, ErrorKind::degenerate,
          "overlap of a zero-mass attention map");
  int n = (int)a.numel();
  Tensor fa = reshape(a, {n, 1});
  Tensor fb = reshape(b, {n, 1});
  Tensor na = mul(fa, broadcast_row(reshape(recip(sa), {1, 1}), n));
  Tensor nb = mul(fb, broadcast_row(reshape(recip(sb), {1, 1}), n));
  return sum_all(minimum(na, nb));
}

Tensor aggregate_attention(const DenoiserConfig& cfg, const std::vector<Tensor>& attn) {
  require(!attn.empty(), ErrorKind::guidance, "no attention maps were captured");
  int full = cfg.h * cfg.w;
  int h2 = cfg.h / 2, w2 = cfg.w / 2;
  int half = h2 * w2;
  int M = attn[0].cols();

  Tensor pool;
  auto pool_mat = [&]() -> const Tensor& {
    if (!pool.defined()) {
      std::vector<float> p((size_t)half * full, 0.f);
      for (int y2 = 0; y2 < h2; ++y2)
        for (int x2 = 0; x2 < w2; ++x2) {
          int r = y2 * w2 + x2;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              p[(size_t)r * full + (2 * y2 + dy) * cfg.w + (2 * x2 + dx)] = 0.25f;
        }
      pool = Tensor::from({half, full}, std::move(p));
    }
    return pool;
  };

  Tensor acc;
  for (const Tensor& a : attn) {
    require(a.cols() == M, ErrorKind::dimension, "attention maps disagree on token count");
    Tensor at_half;
    if (a.rows() == half)
      at_half = a;
    else if (a.rows() == full)
      at_half = matmul(pool_mat(), a);
    else
      fail(ErrorKind::dimension, "attention map rows match neither grid resolution");
    acc = acc.defined() ? add(acc, at_half) : at_half;
  }
  return scale(acc, 1.f / (float)attn.size());
}

std::pair<Tensor, Tensor> guidance_terms(const Tensor& agg,
                                         const std::vector<templates::Span>& spans) {
  int N = (int)spans.size();
  require(N >= 1, ErrorKind::guidance, "guidance needs at least one concept span");
  int M = agg.cols();

  std::map<int, Tensor> cols;
  auto col = [&](int tok) -> const Tensor& {
    require(tok >= 0 && tok < M, ErrorKind::guidance,
            "no attention map for token position " + std::to_string(tok));
    auto it = cols.find(tok);
    if (it == cols.end()) {
      std::vector<float> one((size_t)M, 0.f);
      one[tok] = 1.f;
      it = cols.emplace(tok, matmul(agg, Tensor::from({M, 1}, std::move(one)))).first;
    }
    return it->second;
  };

  Tensor g1;
  for (const auto& sp : spans) {
    Tensor o = overlap(col(sp.article_pos), col(sp.noun_pos));
    g1 = g1.defined() ? add(g1, o) : o;
  }
  g1 = scale(g1, -1.f);

  Tensor g2;
  if (N == 1) {
    g2 = Tensor::from({1, 1}, {0.f});
  } else {
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < N; ++j) {
        if (j == i) continue;
        for (int other : {spans[j].article_pos, spans[j].noun_pos}) {
          Tensor term = add(overlap(col(spans[i].article_pos), col(other)),
                            overlap(col(other), col(spans[i].noun_pos)));
          g2 = g2.defined() ? add(g2, term) : term;
        }
      }
    g2 = scale(g2, 1.f / (2.f * (float)N));
  }
  return {g1, g2};
}

std::vector<float> guided_eps(const Backbone& bb, const std::vector<KV>& cond,
                              const std::vector<KV>& uncond, const std::vector<float>& z, int t,
                              const SamplerConfig& scfg, const GuidanceConfig& gcfg,
                              const std::vector<templates::Span>& spans, bool in_window,
                              StepLog* log) {
  int hw = bb.den_cfg.h * bb.den_cfg.w;
  int ch = bb.den_cfg.ch;
  require((int)z.size() == hw * ch, ErrorKind::dimension,
          "latent does not match the denoiser grid");

  Tensor zc = Tensor::from({hw, ch}, z);
  DenoiserOut un = bb.den.forward(zc, t, uncond, false);
  const std::vector<float>& eu = un.eps.data();

  bool want_grad = gcfg.lambda != 0.f && in_window && !spans.empty();
  bool want_attn = want_grad || (gcfg.log_terms && !spans.empty());

  Tensor z_in = want_grad ? Tensor::from({hw, ch}, z, true) : zc;
  DenoiserOut cn = bb.den.forward(z_in, t, cond, want_attn);
  const std::vector<float>& ec = cn.eps.data();

  float s = scfg.cfg_scale;
  std::vector<float> out(z.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = eu[i] + s * (ec[i] - eu[i]);

  if (want_attn) {
    Tensor agg = aggregate_attention(bb.den_cfg, cn.attn);
    auto [g1, g2] = guidance_terms(agg, spans);
    if (log) {
      log->g1 = g1.item();
      log->g2 = g2.item();
    }
    if (want_grad) {
      backward(add(g1, g2));
      if (z_in.has_grad()) {
        const std::vector<float>& gr = z_in.grad();
        for (size_t i = 0; i < out.size(); ++i) out[i] += gcfg.lambda * gr[i];
      }
    }
  }
  return out;
}

CoreResult sample_core(const Schedule& sch, int n, const SamplerConfig& scfg,
                       const GuidanceConfig& gcfg, const EpsFn& fn) {
  require(scfg.steps >= 1 && scfg.steps <= sch.T, ErrorKind::range,
          "sampler steps must lie in 1..T");
  require(scfg.eta >= 0.f, ErrorKind::config, "eta must be nonnegative");
  int S = scfg.steps;
  std::vector<int> ts(S + 1, 0);
  for (int i = 0; i < S; ++i) ts[i] = (int)std::llround((double)sch.T * (S - i) / S);
  for (int i = 0; i < S; ++i)
    require(ts[i] > ts[i + 1], ErrorKind::contract, "timestep ladder must strictly decrease");

  Rng rng(scfg.seed);
  Rng rz = rng.child("z_T");
  Rng rnoise = rng.child("ddpm");
  std::vector<float> z(n);
  rz.fill_normal(z);

  int active = (int)std::llround((double)gcfg.window * S);

  CoreResult res;
  for (int i = 0; i < S; ++i) {
    int t = ts[i], next = ts[i + 1];
    StepLog log;
    log.t = t;
    double nrm = 0;
    for (float v : z) nrm += (double)v * v;
    log.z_norm = std::sqrt(nrm);
    if (scfg.keep_latents) res.traj.latents.push_back(z);

    std::vector<float> e = fn(z, t, i < active, log);
    require(e.size() == z.size(), ErrorKind::dimension,
            "noise prediction does not match the latent size");

    double at = sch.alpha[t], st = sch.sigma[t];
    double as = sch.alpha[next], ss = sch.sigma[next];
    double eta_eff = scfg.method == SamplerConfig::Method::ddpm ? 1.0 : (double)scfg.eta;
    double sig = st > 0 ? eta_eff * (ss / st) * std::sqrt(std::max(0.0, 1.0 - (at * at) / (as * as)))
                        : 0.0;
    double keep = std::sqrt(std::max(0.0, ss * ss - sig * sig));
    std::vector<float> xi;
    if (sig > 0) {
      xi.resize(z.size());
      rnoise.fill_normal(xi);
    }
    for (size_t p = 0; p < z.size(); ++p) {
      double x0 = (z[p] - st * e[p]) / at;
      double v = as * x0 + keep * e[p];
      if (sig > 0) v += sig * xi[p];
      z[p] = (float)v;
    }
    res.traj.steps.push_back(log);
  }
  if (scfg.keep_latents) res.traj.latents.push_back(z);
  res.z = std::move(z);
  return res;
}

SampleResult sample_with_cond(const Backbone& bb, const std::vector<KV>& cond,
                              const std::vector<KV>& uncond, const SamplerConfig& scfg,
                              const GuidanceConfig& gcfg,
                              const std::vector<templates::Span>& spans) {
  std::vector<KV> c = constant_copy(cond);
  std::vector<KV> u = constant_copy(uncond);
  EpsFn fn = [&](const std::vector<float>& z, int t, bool in_window, StepLog& log) {
    return guided_eps(bb, c, u, z, t, scfg, gcfg, spans, in_window, &log);
  };
  CoreResult core =
      sample_core(bb.sch, bb.den_cfg.h * bb.den_cfg.w * bb.den_cfg.ch, scfg, gcfg, fn);
  SampleResult out;
  out.z0 = std::move(core.z);
  out.traj = std::move(core.traj);
  out.image = latent_to_image(out.z0, bb.den_cfg.h, bb.den_cfg.w);
  return out;
}

SampleResult sample(const Backbone& bb, const Vocab& vocab, const BlendPlan& plan,
                    const SamplerConfig& scfg, const GuidanceConfig& gcfg) {
  std::vector<KV> base = bb.condition(plan.tok.ids);
  std::vector<KV> cond = blend_multi(base, plan);
  Tokenized empty = tokenize(vocab, "", bb.enc_cfg.max_len);
  std::vector<KV> uncond = bb.condition(empty.ids);
  return sample_with_cond(bb, cond, uncond, scfg, gcfg, plan.spans());
}

}  // namespace ltxb
