#pragma once

#include <utility>
#include <vector>

#include "ltxb/config.hpp"
#include "ltxb/dataset.hpp"
#include "ltxb/model.hpp"
#include "ltxb/text.hpp"

namespace ltxb {

struct PretrainReport {
  int steps_run = 0;
  bool plateaued = false;
  double final_val = 0;
  std::vector<std::pair<int, double>> val_curve;  // (step, validation loss)
  std::vector<float> train_losses;
};

// Joint denoising training of encoder, projections and denoiser on the
// generation split. Conditioning is dropped to the empty prompt with a small
// probability so the sampler's unconditional branch is meaningful. Stops when
// the fixed-fixture validation loss plateaus; a run that is still improving
// when the step budget runs out is reported as a training error rather than
// silently truncated. On success the backbone carries the config fingerprint
// and the step count.
PretrainReport pretrain(Backbone& bb, const Corpus& corpus, const Vocab& vocab,
                        const Config& cfg, const Rng& rng);

}  // namespace ltxb
