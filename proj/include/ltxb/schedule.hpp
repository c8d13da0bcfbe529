#pragma once

#include <functional>
#include <vector>

#include "ltxb/tensor.hpp"

namespace ltxb {

// Cosine signal/noise schedule over discrete levels 0..T, level 0 clean.
// alpha[t]^2 + sigma[t]^2 == 1 at every level; the signal fraction is
// floored a hair above zero so level-T ratios stay finite.
struct Schedule {
  int T = 0;
  std::vector<float> alpha;  // size T+1, decreasing, alpha[0] == 1
  std::vector<float> sigma;  // size T+1, increasing, sigma[0] == 0

  static Schedule cosine(int T, double s = 0.008);

  // z_t = alpha[t] * z + sigma[t] * eps
  Tensor add_noise(const Tensor& z, const Tensor& eps, int t) const;

  void check_level(int t) const {
    require(t >= 0 && t <= T, ErrorKind::range,
            "noise level " + std::to_string(t) + " outside schedule 0.." + std::to_string(T));
  }
};

}  // namespace ltxb
