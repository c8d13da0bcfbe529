#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "ltxb/error.hpp"
#include "ltxb/rng.hpp"

namespace ltxb {

// Reverse-mode autodiff over float32 tensors. Graphs are built implicitly:
// each op returns a new node holding shared_ptr links to its parents plus a
// closure that routes incoming gradient to them. backward() topologically
// sorts the graph from the loss and runs the closures once each.
//
// Data is float32; every reduction (dot products, sums, means, statistics)
// accumulates in float64 before rounding back.

using Shape = std::vector<int>;

struct Node {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // allocated on first gradient touch
  bool requires_grad = false;
  bool leaf = true;
  int64_t id = 0;  // creation order, for stable diagnostics
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backprop;  // null for leaves and no-grad nodes

  int64_t numel() const {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.f);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, float stdev = 1.f, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return node_ref().shape; }
  int64_t numel() const { return node_ref().numel(); }
  int ndim() const { return static_cast<int>(shape().size()); }
  // Row/column view of a rank-1/2 tensor; rank-1 counts as a single row.
  int rows() const;
  int cols() const;

  std::vector<float>& data() { return node_ref().value; }
  const std::vector<float>& data() const { return node_ref().value; }
  const std::vector<float>& grad() const;
  bool has_grad() const { return defined() && n_->grad.size() == n_->value.size(); }

  bool requires_grad() const { return node_ref().requires_grad; }
  void set_requires_grad(bool v);

  float item() const;
  float at(int r, int c) const;

  std::shared_ptr<Node> node() const { return n_; }
  Node& node_ref() const {
    require(defined(), ErrorKind::contract, "use of undefined tensor");
    return *n_;
  }

 private:
  std::shared_ptr<Node> n_;
};

// ---- op set ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float c);
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       float eps = 1e-5f);
Tensor silu(const Tensor& x);
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
Tensor gather_rows(const Tensor& x, const std::vector<int>& idx);
Tensor scatter_rows(const Tensor& x, const std::vector<int>& idx, int out_rows);
Tensor replace_rows(const Tensor& base, const Tensor& rows, const std::vector<int>& idx);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor minimum(const Tensor& a, const Tensor& b);  // ties route gradient to a
Tensor recip(const Tensor& x);
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Repeats a [1 x C] row n times via a ones-column matmul.
Tensor broadcast_row(const Tensor& row, int nrows);

void backward(const Tensor& loss);

// ---- raw kernels (shared with non-autodiff code paths) ---------------------

// c[m x n] = a[m x k] * b[k x n]; accumulation in float64.
void mm_nn(const float* a, const float* b, float* c, int m, int k, int n);
// c[m x k] = a[m x n] * b[k x n]^T   (rows dot rows)
void mm_nt(const float* a, const float* b, float* c, int m, int n, int k);
// c[k x n] += a[m x k]^T * b[m x n]; c must be zeroed by the caller.
void mm_tn_acc(const float* a, const float* b, float* c, int m, int k, int n);

}  // namespace ltxb
