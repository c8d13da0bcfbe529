#include "ltxb/schedule.hpp"

#include <cmath>

namespace ltxb {

Schedule Schedule::cosine(int T, double s) {
  require(T >= 1, ErrorKind::config, "schedule needs at least one level");
  Schedule sch;
  sch.T = T;
  sch.alpha.resize(T + 1);
  sch.sigma.resize(T + 1);
  auto f = [&](double t) {
    double u = ((t / T + s) / (1.0 + s)) * (3.14159265358979323846 / 2.0);
    double c = std::cos(u);
    return c * c;
  };
  double f0 = f(0.0);
  for (int t = 0; t <= T; ++t) {
    double abar = f((double)t) / f0;
    abar = std::min(1.0, std::max(abar, 1e-5));
    if (t == 0) abar = 1.0;
    sch.alpha[t] = (float)std::sqrt(abar);
    sch.sigma[t] = (float)std::sqrt(1.0 - abar);
  }
  return sch;
}

Tensor Schedule::add_noise(const Tensor& z, const Tensor& eps, int t) const {
  check_level(t);
  require(z.shape() == eps.shape(), ErrorKind::dimension, "add_noise: shape mismatch");
  return add(scale(z, alpha[t]), scale(eps, sigma[t]));
}

}  // namespace ltxb
