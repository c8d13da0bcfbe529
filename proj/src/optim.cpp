#include "ltxb/optim.hpp"

#include <cmath>

namespace ltxb {

namespace {

std::vector<float>& grad_of(Tensor& p) { return p.node_ref().grad; }

}  // namespace

double global_grad_norm(const std::vector<Tensor>& params) {
  double s = 0;
  for (const Tensor& p : params)
    if (p.has_grad())
      for (float g : p.grad()) s += (double)g * g;
  return std::sqrt(s);
}

double clip_global_norm(std::vector<Tensor>& params, double max_norm) {
  double norm = global_grad_norm(params);
  if (max_norm > 0 && norm > max_norm) {
    float sc = (float)(max_norm / norm);
    for (Tensor& p : params)
      if (p.has_grad())
        for (float& g : grad_of(p)) g *= sc;
  }
  return norm;
}

void zero_grads(std::vector<Tensor>& params) {
  for (Tensor& p : params) p.node_ref().grad.clear();
}

void SgdClip::step(std::vector<Tensor>& params) {
  if (clip > 0) clip_global_norm(params, clip);
  for (Tensor& p : params) {
    if (!p.has_grad()) continue;
    auto& v = p.data();
    const auto& g = p.grad();
    for (size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
  }
  zero_grads(params);
}

void Adam::step(std::vector<Tensor>& params) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
  }
  require(m_.size() == params.size(), ErrorKind::contract,
          "optimizer state does not match the parameter list");
  if (clip > 0) clip_global_norm(params, clip);
  ++t_;
  float c1 = 1.f - std::pow(beta1, (float)t_);
  float c2 = 1.f - std::pow(beta2, (float)t_);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    if (!p.has_grad()) continue;
    auto& val = p.data();
    const auto& g = p.grad();
    auto& m = m_[pi];
    auto& v = v_[pi];
    if (m.empty()) {
      m.assign(val.size(), 0.f);
      v.assign(val.size(), 0.f);
    }
    for (size_t i = 0; i < val.size(); ++i) {
      m[i] = beta1 * m[i] + (1.f - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.f - beta2) * g[i] * g[i];
      float mh = m[i] / c1, vh = v[i] / c2;
      val[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
  zero_grads(params);
}

}  // namespace ltxb
