#pragma once

#include <vector>

#include "ltxb/tensor.hpp"

namespace ltxb {

double global_grad_norm(const std::vector<Tensor>& params);

// Scales all gradients down so their joint norm is at most max_norm.
// Returns the pre-clip norm.
double clip_global_norm(std::vector<Tensor>& params, double max_norm);

void zero_grads(std::vector<Tensor>& params);

// Plain gradient descent with optional global-norm clipping.
struct SgdClip {
  float lr = 1e-3f;
  float clip = 0.f;  // 0 disables clipping

  // Applies one update and clears the gradients. Parameters without a
  // gradient this step are left alone.
  void step(std::vector<Tensor>& params);
};

struct Adam {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float clip = 0.f;

  void step(std::vector<Tensor>& params);

 private:
  int t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

}  // namespace ltxb
