#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ltxb/bank.hpp"
#include "ltxb/model.hpp"

namespace ltxb {

// Resolved multi-concept query: the article-form prompt the base flow will
// encode, plus one (record, span) pair per concept to splice in.
struct BlendEntry {
  std::string name;
  templates::Span span;
  ConceptRecord rec;
};

struct BlendPlan {
  std::string prompt;
  Tokenized tok;
  std::vector<BlendEntry> entries;

  std::vector<templates::Span> spans() const;
};

// Resolves concepts against the prompt. Two forms are accepted:
//   - the prompt names identifiers directly ("a photo of v1* circle.") and
//     the concept list is empty; identifiers are matched to bank records and
//     rewritten to "a" so the base flow sees a natural sentence;
//   - the prompt is plain and each concept is given by name, optionally with
//     an explicit noun position as "name@pos" when the noun is ambiguous.
// Every record must match the backbone hash, and spans must be disjoint.
BlendPlan plan_blend(const std::string& prompt, const std::vector<std::string>& concepts,
                     const ConceptBank& bank, const Backbone& bb, const Vocab& vocab);

// Splices each record's K and V rows over its span in every layer. Rows
// outside the spans are returned bit-identical; entry order cannot matter.
std::vector<KV> blend_multi(const std::vector<KV>& base, const BlendPlan& plan);

// Normalized intersection of two nonnegative maps of identical shape:
// sum of elementwise min after dividing each map by its mass.
Tensor overlap(const Tensor& a, const Tensor& b);

// Head-averaged per-layer attention maps -> one [half_pixels x tokens] map:
// full-resolution layers are 2x2 box-pooled to the half grid, then all
// layers are averaged. Differentiable so guidance can run through it.
Tensor aggregate_attention(const DenoiserConfig& cfg, const std::vector<Tensor>& attn);

// Attention-overlap guidance terms over the aggregated map. g1 rewards
// identifier/noun agreement within each concept; g2 penalizes overlap
// between tokens of different concepts, averaged over the 2N concept tokens.
std::pair<Tensor, Tensor> guidance_terms(const Tensor& agg,
                                         const std::vector<templates::Span>& spans);

struct SamplerConfig {
  enum class Method { ddim, ddpm };
  Method method = Method::ddim;
  int steps = 100;
  float eta = 0.f;  // extra stochasticity for ddim; ddpm always uses 1
  float cfg_scale = 6.f;
  uint64_t seed = 0;
  bool keep_latents = false;
};

struct GuidanceConfig {
  float lambda = 1.f;
  float window = 0.8f;  // leading fraction of steps where guidance is active
  bool log_terms = false;  // record g1/g2 even when no gradient is applied
};

struct StepLog {
  int t = 0;
  double z_norm = 0;
  double g1 = 0, g2 = 0;
};

struct Trajectory {
  std::vector<StepLog> steps;
  // With keep_latents: z at the start of every step plus the final z.
  std::vector<std::vector<float>> latents;
};

struct SampleResult {
  Image image;
  std::vector<float> z0;
  Trajectory traj;
};

// One denoising query: z values and level in, predicted noise out. The
// sampler core is generic over this so update rules are testable against
// closed forms without a network.
using EpsFn =
    std::function<std::vector<float>(const std::vector<float>& z, int t, bool in_window,
                                     StepLog& log)>;

struct CoreResult {
  std::vector<float> z;
  Trajectory traj;
};

// Runs the reverse process from seeded unit-normal z over `steps` levels
// spread across the schedule. DDIM with eta 0 is deterministic; stochastic
// updates draw from a dedicated child stream.
CoreResult sample_core(const Schedule& sch, int n, const SamplerConfig& scfg,
                       const GuidanceConfig& gcfg, const EpsFn& fn);

// Classifier-free-guided noise prediction with optional attention-overlap
// guidance: eps' = eps_mix + lambda * d(g1+g2)/dz, the gradient taken
// through the conditional branch's attention capture. Outside the window,
// with lambda 0, or with no spans, the result is the plain mixed eps.
std::vector<float> guided_eps(const Backbone& bb, const std::vector<KV>& cond,
                              const std::vector<KV>& uncond, const std::vector<float>& z, int t,
                              const SamplerConfig& scfg, const GuidanceConfig& gcfg,
                              const std::vector<templates::Span>& spans, bool in_window,
                              StepLog* log = nullptr);

// Full pipeline on explicit conditioning grids (both CFG branches).
SampleResult sample_with_cond(const Backbone& bb, const std::vector<KV>& cond,
                              const std::vector<KV>& uncond, const SamplerConfig& scfg,
                              const GuidanceConfig& gcfg,
                              const std::vector<templates::Span>& spans = {});

// Full pipeline on a plan: base flow conditioning, record splicing, CFG
// against the empty prompt, guidance over the plan's spans.
SampleResult sample(const Backbone& bb, const Vocab& vocab, const BlendPlan& plan,
                    const SamplerConfig& scfg, const GuidanceConfig& gcfg);

}  // namespace ltxb
