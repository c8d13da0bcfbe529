#include "ltxb/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <unordered_set>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace ltxb {

namespace {

std::atomic<int64_t> g_next_id{1};

std::shared_ptr<Node> new_node(Shape shape, std::vector<float> value) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->id = g_next_id.fetch_add(1);
  return n;
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

// Rank-1 tensors are treated as a single row where a 2-D view is needed.
void rows_cols(const Node& n, int& r, int& c) {
  require(n.shape.size() == 1 || n.shape.size() == 2, ErrorKind::dimension,
          "rank-1 or rank-2 tensor required");
  if (n.shape.size() == 1) {
    r = 1;
    c = n.shape[0];
  } else {
    r = n.shape[0];
    c = n.shape[1];
  }
}

bool any_requires_grad(const std::vector<Tensor>& ps) {
  for (const auto& p : ps)
    if (p.requires_grad()) return true;
  return false;
}

// Builds an interior node. The backprop closure is only attached when some
// parent requires gradient, so inference-time graphs carry no closures.
Tensor make_op(Shape shape, std::vector<float> value, std::vector<Tensor> parents,
               const std::function<std::function<void()>(Node*)>& make_bp) {
  auto n = new_node(std::move(shape), std::move(value));
  n->leaf = false;
  n->requires_grad = any_requires_grad(parents);
  n->parents.reserve(parents.size());
  for (auto& p : parents) n->parents.push_back(p.node());
  if (n->requires_grad && make_bp) n->backprop = make_bp(n.get());
  return Tensor(n);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), ErrorKind::dimension,
          std::string(op) + ": operand shapes differ");
}

void check_finite(const std::vector<float>& v, const char* op) {
  for (float x : v)
    require(std::isfinite(x), ErrorKind::numeric,
            std::string(op) + ": non-finite input value");
}

}  // namespace

// ---- kernels ---------------------------------------------------------------

namespace {

// Row dot product with float64 accumulators. The lane layout is fixed, so
// results are identical from run to run.
inline double dot_f64(const float* x, const float* y, int n) {
#if defined(__AVX512F__)
  __m512d acc0 = _mm512_setzero_pd();
  __m512d acc1 = _mm512_setzero_pd();
  int j = 0;
  for (; j + 16 <= n; j += 16) {
    acc0 = _mm512_fmadd_pd(_mm512_cvtps_pd(_mm256_loadu_ps(x + j)),
                           _mm512_cvtps_pd(_mm256_loadu_ps(y + j)), acc0);
    acc1 = _mm512_fmadd_pd(_mm512_cvtps_pd(_mm256_loadu_ps(x + j + 8)),
                           _mm512_cvtps_pd(_mm256_loadu_ps(y + j + 8)), acc1);
  }
  if (j + 8 <= n) {
    acc0 = _mm512_fmadd_pd(_mm512_cvtps_pd(_mm256_loadu_ps(x + j)),
                           _mm512_cvtps_pd(_mm256_loadu_ps(y + j)), acc0);
    j += 8;
  }
  double acc = _mm512_reduce_add_pd(_mm512_add_pd(acc0, acc1));
  for (; j < n; ++j) acc += (double)x[j] * (double)y[j];
  return acc;
#else
  double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
  int j = 0;
  for (; j + 4 <= n; j += 4) {
    a0 += (double)x[j] * (double)y[j];
    a1 += (double)x[j + 1] * (double)y[j + 1];
    a2 += (double)x[j + 2] * (double)y[j + 2];
    a3 += (double)x[j + 3] * (double)y[j + 3];
  }
  double acc = ((a0 + a1) + (a2 + a3));
  for (; j < n; ++j) acc += (double)x[j] * (double)y[j];
  return acc;
#endif
}

}  // namespace

void mm_nt(const float* a, const float* b, float* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const float* ar = a + (size_t)i * n;
    for (int kk = 0; kk < k; ++kk)
      c[(size_t)i * k + kk] += (float)dot_f64(ar, b + (size_t)kk * n, n);
  }
}

void mm_nn(const float* a, const float* b, float* c, int m, int k, int n) {
  std::vector<float> bt((size_t)k * n);
  for (int kk = 0; kk < k; ++kk)
    for (int j = 0; j < n; ++j) bt[(size_t)j * k + kk] = b[(size_t)kk * n + j];
  mm_nt(a, bt.data(), c, m, k, n);
}

void mm_tn_acc(const float* a, const float* b, float* c, int m, int k, int n) {
  std::vector<double> scratch((size_t)k * n, 0.0);
  for (int i = 0; i < m; ++i) {
    const float* ar = a + (size_t)i * k;
    const float* br = b + (size_t)i * n;
    for (int kk = 0; kk < k; ++kk) {
      double av = ar[kk];
      double* sr = scratch.data() + (size_t)kk * n;
      int j = 0;
#if defined(__AVX512F__)
      __m512d avv = _mm512_set1_pd(av);
      for (; j + 8 <= n; j += 8) {
        __m512d s = _mm512_loadu_pd(sr + j);
        s = _mm512_fmadd_pd(avv, _mm512_cvtps_pd(_mm256_loadu_ps(br + j)), s);
        _mm512_storeu_pd(sr + j, s);
      }
#endif
      for (; j < n; ++j) sr[j] += av * (double)br[j];
    }
  }
  for (size_t i = 0; i < scratch.size(); ++i) c[i] += (float)scratch[i];
}

// ---- Tensor basics ---------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = new_node(shape, std::vector<float>(shape_numel(shape), 0.f));
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::full(Shape shape, float v, bool requires_grad) {
  auto n = new_node(shape, std::vector<float>(shape_numel(shape), v));
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::from(Shape shape, std::vector<float> data, bool requires_grad) {
  require((int64_t)data.size() == shape_numel(shape), ErrorKind::dimension,
          "from: data size does not match shape");
  auto n = new_node(std::move(shape), std::move(data));
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::randn(Shape shape, Rng& rng, float stdev, bool requires_grad) {
  std::vector<float> d(shape_numel(shape));
  for (auto& v : d) v = (float)(rng.normal() * stdev);
  return from(std::move(shape), std::move(d), requires_grad);
}

int Tensor::rows() const {
  int r, c;
  rows_cols(node_ref(), r, c);
  return r;
}

int Tensor::cols() const {
  int r, c;
  rows_cols(node_ref(), r, c);
  return c;
}

const std::vector<float>& Tensor::grad() const {
  require(has_grad(), ErrorKind::contract, "gradient not populated");
  return n_->grad;
}

void Tensor::set_requires_grad(bool v) {
  Node& n = node_ref();
  require(n.leaf, ErrorKind::contract, "requires_grad can only be set on leaves");
  n.requires_grad = v;
}

float Tensor::item() const {
  require(numel() == 1, ErrorKind::contract, "item() on non-scalar tensor");
  return node_ref().value[0];
}

float Tensor::at(int r, int c) const {
  int rr, cc;
  rows_cols(node_ref(), rr, cc);
  require(r >= 0 && r < rr && c >= 0 && c < cc, ErrorKind::range, "at: index out of range");
  return node_ref().value[(size_t)r * cc + c];
}

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2, ErrorKind::dimension, "matmul: rank-2 required");
  int m = a.shape()[0], k = a.shape()[1];
  require(b.shape()[0] == k, ErrorKind::dimension, "matmul: inner dimensions differ");
  int n = b.shape()[1];
  std::vector<float> out((size_t)m * n, 0.f);
  mm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_op({m, n}, std::move(out), {a, b}, [=](Node* self) {
    Node* pa = self->parents[0].get();
    Node* pb = self->parents[1].get();
    return [self, pa, pb, m, k, n] {
      self->ensure_grad();
      if (pa->requires_grad) {
        pa->ensure_grad();
        mm_nt(self->grad.data(), pb->value.data(), pa->grad.data(), m, n, k);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        mm_tn_acc(pa->value.data(), self->grad.data(), pb->grad.data(), m, k, n);
      }
    };
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<float> out(a.data());
  const auto& bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](Node* self) {
    Node* pa = self->parents[0].get();
    Node* pb = self->parents[1].get();
    return [self, pa, pb] {
      self->ensure_grad();
      for (Node* p : {pa, pb}) {
        if (!p->requires_grad) continue;
        p->ensure_grad();
        for (size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += self->grad[i];
      }
    };
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.f)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<float> out(a.data());
  const auto& bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](Node* self) {
    Node* pa = self->parents[0].get();
    Node* pb = self->parents[1].get();
    return [self, pa, pb] {
      self->ensure_grad();
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < pa->grad.size(); ++i)
          pa->grad[i] += self->grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < pb->grad.size(); ++i)
          pb->grad[i] += self->grad[i] * pa->value[i];
      }
    };
  });
}

Tensor scale(const Tensor& a, float c) {
  std::vector<float> out(a.data());
  for (auto& v : out) v *= c;
  return make_op(a.shape(), std::move(out), {a}, [c](Node* self) {
    Node* pa = self->parents[0].get();
    return [self, pa, c] {
      self->ensure_grad();
      pa->ensure_grad();
      for (size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += c * self->grad[i];
    };
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(), ErrorKind::dimension,
          "reshape: element count mismatch");
  std::vector<float> out(a.data());
  return make_op(std::move(shape), std::move(out), {a}, [](Node* self) {
    Node* pa = self->parents[0].get();
    return [self, pa] {
      self->ensure_grad();
      pa->ensure_grad();
      for (size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += self->grad[i];
    };
  });
}

Tensor transpose(const Tensor& a) {
  require(a.ndim() == 2, ErrorKind::dimension, "transpose: rank-2 required");
  int m = a.shape()[0], n = a.shape()[1];
  std::vector<float> out((size_t)m * n);
  const auto& av = a.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[(size_t)j * m + i] = av[(size_t)i * n + j];
  return make_op({n, m}, std::move(out), {a}, [m, n](Node* self) {
    Node* pa = self->parents[0].get();
    return [self, pa, m, n] {
      self->ensure_grad();
      pa->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          pa->grad[(size_t)i * n + j] += self->grad[(size_t)j * m + i];
    };
  });
}

Tensor softmax_rows(const Tensor& a) {
  require(a.ndim() == 2, ErrorKind::dimension, "softmax_rows: rank-2 required");
  check_finite(a.data(), "softmax_rows");
  int m = a.shape()[0], n = a.shape()[1];
  std::vector<float> out((size_t)m * n);
  const auto& av = a.data();
  for (int i = 0; i < m; ++i) {
    const float* x = av.data() + (size_t)i * n;
    float* y = out.data() + (size_t)i * n;
    float mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    float inv = (float)(1.0 / s);
    for (int j = 0; j < n; ++j) y[j] *= inv;
  }
  return make_op({m, n}, std::move(out), {a}, [m, n](Node* self) {
    Node* pa = self->parents[0].get();
    return [self, pa, m, n] {
      self->ensure_grad();
      pa->ensure_grad();
      for (int i = 0; i < m; ++i) {
        const float* y = self->value.data() + (size_t)i * n;
        const float* g = self->grad.data() + (size_t)i * n;
        float* d = pa->grad.data() + (size_t)i * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += (double)g[j] * (double)y[j];
        for (int j = 0; j < n; ++j) d[j] += y[j] * (g[j] - (float)dot);
      }
    };
  });
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  require(x.ndim() == 2, ErrorKind::dimension, "layer_norm_rows: rank-2 required");
  int m = x.shape()[0], n = x.shape()[1];
  require(gamma.ndim() == 1 && gamma.shape()[0] == n, ErrorKind::dimension,
          "layer_norm_rows: gamma shape");
  require(beta.ndim() == 1 && beta.shape()[0] == n, ErrorKind::dimension,
          "layer_norm_rows: beta shape");
  check_finite(x.data(), "layer_norm_rows");
  std::vector<float> out((size_t)m * n);
  std::vector<float> xhat((size_t)m * n);
  std::vector<float> inv_std(m);
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  for (int i = 0; i < m; ++i) {
    const float* xr = xv.data() + (size_t)i * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += xr[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      double d = xr[j] - mu;
      var += d * d;
    }
    var /= n;
    float inv = (float)(1.0 / std::sqrt(var + eps));
    inv_std[i] = inv;
    for (int j = 0; j < n; ++j) {
      float h = (float)((xr[j] - mu)) * inv;
      xhat[(size_t)i * n + j] = h;
      out[(size_t)i * n + j] = h * gv[j] + bv[j];
    }
  }
  return make_op({m, n}, std::move(out), {x, gamma, beta},
                 [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node* self) {
                   Node* px = self->parents[0].get();
                   Node* pg = self->parents[1].get();
                   Node* pb = self->parents[2].get();
                   return [self, px, pg, pb, m, n, xhat, inv_std] {
                     self->ensure_grad();
                     if (pg->requires_grad) pg->ensure_grad();
                     if (pb->requires_grad) pb->ensure_grad();
                     if (px->requires_grad) px->ensure_grad();
                     for (int i = 0; i < m; ++i) {
                       const float* g = self->grad.data() + (size_t)i * n;
                       const float* xh = xhat.data() + (size_t)i * n;
                       if (pg->requires_grad)
                         for (int j = 0; j < n; ++j) pg->grad[j] += g[j] * xh[j];
                       if (pb->requires_grad)
                         for (int j = 0; j < n; ++j) pb->grad[j] += g[j];
                       if (px->requires_grad) {
                         double mean_gy = 0.0, mean_gyxh = 0.0;
                         for (int j = 0; j < n; ++j) {
                           double gy = (double)g[j] * (double)pg->value[j];
                           mean_gy += gy;
                           mean_gyxh += gy * xh[j];
                         }
                         mean_gy /= n;
                         mean_gyxh /= n;
                         float* d = px->grad.data() + (size_t)i * n;
                         for (int j = 0; j < n; ++j) {
                           double gy = (double)g[j] * (double)pg->value[j];
                           d[j] += (float)((gy - mean_gy - xh[j] * mean_gyxh) * inv_std[i]);
                         }
                       }
                     }
                   };
                 });
}

Tensor silu(const Tensor& x) {
  std::vector<float> out(x.data());
  for (auto& v : out) {
    float s = 1.f / (1.f + std::exp(-v));
    v = v * s;
  }
  return make_op(x.shape(), std::move(out), {x}, [](Node* self) {
    Node* px = self->parents[0].get();
    return [self, px] {
      self->ensure_grad();
      px->ensure_grad();
      for (size_t i = 0; i < px->grad.size(); ++i) {
        float v = px->value[i];
        float s = 1.f / (1.f + std::exp(-v));
        px->grad[i] += self->grad[i] * s * (1.f + v * (1.f - s));
      }
    };
  });
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
  require(table.ndim() == 2, ErrorKind::dimension, "embedding_rows: rank-2 table required");
  int v = table.shape()[0], c = table.shape()[1];
  for (int id : ids)
    require(id >= 0 && id < v, ErrorKind::range, "embedding_rows: id out of range");
  std::vector<float> out(ids.size() * (size_t)c);
  const auto& tv = table.data();
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out.data() + i * c, tv.data() + (size_t)ids[i] * c, sizeof(float) * c);
  return make_op({(int)ids.size(), c}, std::move(out), {table}, [ids, c](Node* self) {
    Node* pt = self->parents[0].get();
    return [self, pt, ids, c] {
      self->ensure_grad();
      pt->ensure_grad();
      for (size_t i = 0; i < ids.size(); ++i) {
        const float* g = self->grad.data() + i * c;
        float* d = pt->grad.data() + (size_t)ids[i] * c;
        for (int j = 0; j < c; ++j) d[j] += g[j];
      }
    };
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
  require(x.ndim() == 2, ErrorKind::dimension, "gather_rows: rank-2 required");
  int m = x.shape()[0], c = x.shape()[1];
  for (int i : idx)
    require(i >= 0 && i < m, ErrorKind::range, "gather_rows: index out of range");
  std::vector<float> out(idx.size() * (size_t)c);
  const auto& xv = x.data();
  for (size_t i = 0; i < idx.size(); ++i)
    std::memcpy(out.data() + i * c, xv.data() + (size_t)idx[i] * c, sizeof(float) * c);
  return make_op({(int)idx.size(), c}, std::move(out), {x}, [idx, c](Node* self) {
    Node* px = self->parents[0].get();
    return [self, px, idx, c] {
      self->ensure_grad();
      px->ensure_grad();
      for (size_t i = 0; i < idx.size(); ++i) {
        const float* g = self->grad.data() + i * c;
        float* d = px->grad.data() + (size_t)idx[i] * c;
        for (int j = 0; j < c; ++j) d[j] += g[j];
      }
    };
  });
}

Tensor scatter_rows(const Tensor& x, const std::vector<int>& idx, int out_rows) {
  require(x.ndim() == 2, ErrorKind::dimension, "scatter_rows: rank-2 required");
  int m = x.shape()[0], c = x.shape()[1];
  require((int)idx.size() == m, ErrorKind::contract,
          "scatter_rows: one index per input row required");
  for (int i : idx)
    require(i >= 0 && i < out_rows, ErrorKind::range, "scatter_rows: index out of range");
  std::vector<float> out((size_t)out_rows * c, 0.f);
  const auto& xv = x.data();
  for (int i = 0; i < m; ++i) {
    const float* src = xv.data() + (size_t)i * c;
    float* dst = out.data() + (size_t)idx[i] * c;
    for (int j = 0; j < c; ++j) dst[j] += src[j];
  }
  return make_op({out_rows, c}, std::move(out), {x}, [idx, c](Node* self) {
    Node* px = self->parents[0].get();
    return [self, px, idx, c] {
      self->ensure_grad();
      px->ensure_grad();
      for (size_t i = 0; i < idx.size(); ++i) {
        const float* g = self->grad.data() + (size_t)idx[i] * c;
        float* d = px->grad.data() + i * c;
        for (int j = 0; j < c; ++j) d[j] += g[j];
      }
    };
  });
}

Tensor replace_rows(const Tensor& base, const Tensor& rows, const std::vector<int>& idx) {
  require(base.ndim() == 2 && rows.ndim() == 2, ErrorKind::dimension,
          "replace_rows: rank-2 required");
  int m = base.shape()[0], c = base.shape()[1];
  require(rows.shape()[1] == c, ErrorKind::dimension, "replace_rows: column count differs");
  require((int)idx.size() == rows.shape()[0], ErrorKind::contract,
          "replace_rows: one index per replacement row required");
  for (size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < m, ErrorKind::range, "replace_rows: index out of range");
    for (size_t j = i + 1; j < idx.size(); ++j)
      require(idx[i] != idx[j], ErrorKind::contract, "replace_rows: duplicate target row");
  }
  std::vector<float> out(base.data());
  const auto& rv = rows.data();
  for (size_t i = 0; i < idx.size(); ++i)
    std::memcpy(out.data() + (size_t)idx[i] * c, rv.data() + i * c, sizeof(float) * c);
  return make_op({m, c}, std::move(out), {base, rows}, [idx, c](Node* self) {
    Node* pb = self->parents[0].get();
    Node* pr = self->parents[1].get();
    return [self, pb, pr, idx, c] {
      self->ensure_grad();
      if (pr->requires_grad) {
        pr->ensure_grad();
        for (size_t i = 0; i < idx.size(); ++i) {
          const float* g = self->grad.data() + (size_t)idx[i] * c;
          float* d = pr->grad.data() + i * c;
          for (int j = 0; j < c; ++j) d[j] += g[j];
        }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        std::vector<char> replaced(pb->grad.size() / c, 0);
        for (int i : idx) replaced[i] = 1;
        for (size_t r = 0; r < replaced.size(); ++r) {
          if (replaced[r]) continue;
          const float* g = self->grad.data() + r * c;
          float* d = pb->grad.data() + r * c;
          for (int j = 0; j < c; ++j) d[j] += g[j];
        }
      }
    };
  });
}

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return make_op({1}, {(float)acc}, {x}, [](Node* self) {
    Node* px = self->parents[0].get();
    return [self, px] {
      self->ensure_grad();
      px->ensure_grad();
      float g = self->grad[0];
      for (auto& d : px->grad) d += g;
    };
  });
}

Tensor mean_all(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  double inv = 1.0 / (double)x.numel();
  return make_op({1}, {(float)(acc * inv)}, {x}, [inv](Node* self) {
    Node* px = self->parents[0].get();
    return [self, px, inv] {
      self->ensure_grad();
      px->ensure_grad();
      float g = (float)(self->grad[0] * inv);
      for (auto& d : px->grad) d += g;
    };
  });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "minimum");
  std::vector<float> out(a.data());
  const auto& bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(out[i], bv[i]);
  return make_op(a.shape(), std::move(out), {a, b}, [](Node* self) {
    Node* pa = self->parents[0].get();
    Node* pb = self->parents[1].get();
    return [self, pa, pb] {
      self->ensure_grad();
      if (pa->requires_grad) pa->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (size_t i = 0; i < self->grad.size(); ++i) {
        // ties route the gradient to the first argument
        if (pa->value[i] <= pb->value[i]) {
          if (pa->requires_grad) pa->grad[i] += self->grad[i];
        } else if (pb->requires_grad) {
          pb->grad[i] += self->grad[i];
        }
      }
    };
  });
}

Tensor recip(const Tensor& x) {
  check_finite(x.data(), "recip");
  std::vector<float> out(x.data());
  for (auto& v : out) v = 1.f / v;
  check_finite(out, "recip");
  return make_op(x.shape(), std::move(out), {x}, [](Node* self) {
    Node* px = self->parents[0].get();
    return [self, px] {
      self->ensure_grad();
      px->ensure_grad();
      for (size_t i = 0; i < px->grad.size(); ++i) {
        float y = self->value[i];
        px->grad[i] += -self->grad[i] * y * y;
      }
    };
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  require(logits.ndim() == 2, ErrorKind::dimension, "softmax_cross_entropy: rank-2 required");
  int m = logits.shape()[0], n = logits.shape()[1];
  require((int)labels.size() == m, ErrorKind::contract,
          "softmax_cross_entropy: one label per row required");
  for (int l : labels)
    require(l >= 0 && l < n, ErrorKind::range, "softmax_cross_entropy: label out of range");
  check_finite(logits.data(), "softmax_cross_entropy");

  std::vector<float> probs((size_t)m * n);
  const auto& xv = logits.data();
  double loss = 0.0;
  for (int i = 0; i < m; ++i) {
    const float* x = xv.data() + (size_t)i * n;
    float* p = probs.data() + (size_t)i * n;
    float mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      p[j] = std::exp(x[j] - mx);
      s += p[j];
    }
    float inv = (float)(1.0 / s);
    for (int j = 0; j < n; ++j) p[j] *= inv;
    loss -= std::log(std::max((double)p[labels[i]], 1e-30));
  }
  loss /= m;
  return make_op({1}, {(float)loss}, {logits},
                 [labels, m, n, probs = std::move(probs)](Node* self) {
                   Node* px = self->parents[0].get();
                   return [self, px, labels, m, n, probs] {
                     self->ensure_grad();
                     px->ensure_grad();
                     float g = self->grad[0] / (float)m;
                     for (int i = 0; i < m; ++i) {
                       const float* p = probs.data() + (size_t)i * n;
                       float* d = px->grad.data() + (size_t)i * n;
                       for (int j = 0; j < n; ++j)
                         d[j] += g * (p[j] - (j == labels[i] ? 1.f : 0.f));
                     }
                   };
                 });
}

Tensor broadcast_row(const Tensor& row, int nrows) {
  require(row.ndim() == 2 && row.shape()[0] == 1, ErrorKind::dimension,
          "broadcast_row: [1 x C] row required");
  Tensor ones = Tensor::full({nrows, 1}, 1.f);
  return matmul(ones, row);
}

// ---- backward --------------------------------------------------------------

void backward(const Tensor& loss) {
  require(loss.defined(), ErrorKind::contract, "backward: undefined tensor");
  require(loss.numel() == 1, ErrorKind::contract, "backward: loss must be scalar");
  require(loss.requires_grad(), ErrorKind::contract,
          "backward: loss does not require gradient");

  // iterative post-order DFS to get a topological order
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({loss.node().get(), 0});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.f;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop();
}

const char* error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::contract: return "contract";
    case ErrorKind::range: return "range";
    case ErrorKind::vocabulary: return "vocabulary";
    case ErrorKind::length: return "length";
    case ErrorKind::template_id: return "template";
    case ErrorKind::config: return "config";
    case ErrorKind::io: return "io";
    case ErrorKind::corruption: return "corruption";
    case ErrorKind::version: return "version";
    case ErrorKind::not_found: return "not_found";
    case ErrorKind::compatibility: return "compatibility";
    case ErrorKind::planning: return "planning";
    case ErrorKind::guidance: return "guidance";
    case ErrorKind::degenerate: return "degenerate";
    case ErrorKind::training: return "training";
    case ErrorKind::oracle_quality: return "oracle_quality";
    case ErrorKind::argument: return "argument";
  }
  return "unknown";
}

}  // namespace ltxb
