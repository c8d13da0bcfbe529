#pragma once

#include <string>
#include <vector>

#include "ltxb/blend.hpp"
#include "ltxb/customize.hpp"
#include "ltxb/dataset.hpp"

namespace ltxb {

// Relative L2 distance between two aligned latent trajectories, the signal
// for "how far a customized run strays from the pretrained denoising path".
struct DeviationReport {
  std::vector<double> per_step;
  double mean = 0;
};
DeviationReport deviation_magnitude(const Trajectory& test, const Trajectory& ref);

// Pearson correlation of 8x8 box-downsampled grayscale intensities; a cheap
// proxy for "same composition".
double layout_similarity(const Image& a, const Image& b);

inline constexpr int kOracleClasses = kCombos + 1;
inline constexpr int kBackgroundClass = kCombos;

struct OracleReport {
  int steps_run = 0;
  double val_accuracy = 0;
  std::vector<int> confusion;  // [kOracleClasses x kOracleClasses], row = true class
};

// Small convolutional judge over the 48 renderable subjects plus an empty
// background class. Trained once, then frozen and hash-pinned so every arm
// of a comparison is scored by the same referee.
class PresenceOracle {
 public:
  static PresenceOracle train(const Corpus& corpus, const Config& cfg, const Rng& rng,
                              OracleReport* report = nullptr);

  std::vector<float> class_probs(const Image& img) const;
  // A subject counts as present when its class probability clears 0.5 on the
  // full frame or on any upscaled quadrant.
  bool present(const Image& img, int combo) const;

  double eval_accuracy(const Corpus& corpus, std::vector<int>* confusion = nullptr) const;

  void save(const std::string& path) const;
  static PresenceOracle load(const std::string& path);
  uint64_t hash() const { return hash_; }

 private:
  PresenceOracle() = default;
  void build_params();
  Tensor logits_batch(const Tensor& x, int batch) const;
  uint64_t param_hash() const;
  double eval_pairs(const std::vector<std::pair<std::vector<float>, int>>& items,
                    std::vector<int>* confusion) const;

  Params params_;
  uint64_t hash_ = 0;
};

struct PresenceReport {
  int samples = 0;
  std::vector<int> combos;
  std::vector<std::vector<bool>> detected;  // [sample][combo]
  std::vector<double> rates;                // per combo
  double joint_rate = 0;
};
PresenceReport presence_eval(const std::vector<Image>& images, const std::vector<int>& combos,
                             const PresenceOracle& oracle);

// Comparison arm that skips blending entirely: the tuned projections replace
// the pretrained ones for the whole prompt, identifiers encoded with their
// learned embedding rows. Multiple concepts average their tuned projections.
ProjectionSet average_projections(const std::vector<const ConceptState*>& states);
std::vector<KV> direct_condition(const Backbone& bb, const Vocab& vocab,
                                 const std::vector<const ConceptState*>& states,
                                 const Tokenized& tok);
SampleResult run_direct(const Backbone& bb, const Vocab& vocab,
                        const std::vector<const ConceptState*>& states,
                        const std::string& prompt, const SamplerConfig& scfg,
                        const GuidanceConfig& gcfg);

}  // namespace ltxb
