#pragma once

#include <string>
#include <vector>

#include "ltxb/config.hpp"
#include "ltxb/dataset.hpp"
#include "ltxb/model.hpp"
#include "ltxb/text.hpp"

namespace ltxb {

struct ConceptSpec {
  std::string name;
  std::string identifier;  // reserved vocabulary token, e.g. "v1*"
  std::string noun;        // class word, e.g. "circle"
  std::vector<std::string> ref_files;  // corpus-relative reference images
};

// Binds a reserved subject's reference set to an identifier token.
// Validates the identifier block and the 3..5 reference count.
ConceptSpec concept_spec_from_corpus(const Corpus& corpus, const Vocab& vocab,
                                     const std::string& name, const std::string& identifier);

enum class TemplateMode { variable, fixed };
enum class Ablation {
  none,          // dual flows, span replacement
  no_base,       // concept-flow conditioning used directly, full-sentence prompt
  no_base_bare,  // concept-flow conditioning, bare "V* <noun>" prompt
};

struct FinetuneConfig {
  int steps = 500;
  float lr = 1e-3f;  // desk-scale default; the reference setting at full scale is 1e-5
  float clip = 1.f;
  float prior_weight = 1.f;
  float flip_prob = 0.5f;
  TemplateMode template_mode = TemplateMode::variable;
  Ablation ablation = Ablation::none;

  static FinetuneConfig from_config(const Config& cfg);
  uint64_t fingerprint() const;
};

struct DualPrompts {
  int tb = 0, tc = 0;  // template indices drawn for the two flows
  std::string base, conc;
  Tokenized base_tok, conc_tok;
  templates::Span base_span, conc_span;  // (article, noun) and (identifier, noun)
};

// Base prompt around "a <noun>", concept prompt around "<identifier> <noun>".
// Variable mode draws the two templates independently; fixed mode pins both.
DualPrompts build_dual_prompts(const Vocab& vocab, const ConceptSpec& spec, TemplateMode mode,
                               Rng& rng);

// Span replacement in the latent textual space: the (article, noun) rows of
// the base grids are overwritten with the (identifier, noun) rows of the
// concept grids, per layer, for K and V. The base side enters as fixed
// values, so the output depends on trainable state only through the two
// replaced rows.
std::vector<KV> train_blend(const std::vector<KV>& base, const std::vector<KV>& conc,
                            templates::Span conc_span, templates::Span base_span);

// Trainable state of one customized subject: the identifier embedding row
// plus a private copy of every cross-attention projection.
struct ConceptState {
  ConceptSpec spec;
  Tensor emb;          // [1 x d_model]
  ProjectionSet proj;  // learnable copies of W_k/W_v
  uint64_t backbone_hash = 0;
  uint64_t config_hash = 0;
  int steps_trained = 0;

  // positions of the identifier token in the window
  std::vector<int> identifier_positions(const Tokenized& tok, const Vocab& vocab) const;
  // concept-flow conditioning: encoder with the embedding override, then the
  // learnable projections
  std::vector<KV> flow(const Backbone& bb, const Vocab& vocab, const Tokenized& tok) const;

  void save(const std::string& path) const;
  static ConceptState load(const std::string& path, const Backbone& bb);
};

// Fresh state: identifier row initialized from the class noun plus small
// noise, projections cloned from the backbone.
ConceptState init_concept_state(const Backbone& bb, const Vocab& vocab, const ConceptSpec& spec,
                                Rng& rng);

struct FinetuneReport {
  std::vector<float> losses;
  double recon_start = 0, recon_end = 0;
};

// Denoising loss on a reference image under the blended conditioning, plus
// the class-prior term on corpus images of the same noun, gradient descent
// on the identifier row and the projection copies only.
ConceptState finetune_concept(const Backbone& bb, const Corpus& corpus, const Vocab& vocab,
                              const ConceptSpec& spec, const FinetuneConfig& fc, const Rng& rng,
                              FinetuneReport* rep = nullptr);

// Deterministic reconstruction fixture: every reference image against a
// small grid of noise levels with pinned noise draws, fixed-template
// conditioning. Used to compare states of the same concept.
double reconstruction_loss(const Backbone& bb, const Corpus& corpus, const Vocab& vocab,
                           const ConceptState& state, Ablation ablation = Ablation::none);

// Class-prior denoising loss: corpus images of the concept's noun under the
// state's projections and the plain "a <noun>." prompt, averaged over a
// pinned set of draws.
double prior_loss(const Backbone& bb, const Corpus& corpus, const Vocab& vocab,
                  const ConceptState& state, int draws, const Rng& rng);

}  // namespace ltxb
