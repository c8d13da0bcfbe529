#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ltxb/serialize.hpp"
#include "ltxb/tensor.hpp"

namespace ltxb {

// Named parameter registry. Modules register their tensors under stable
// names; save/load moves them through the tensor container, and optimizers
// walk the trainable subset.
class Params {
 public:
  void add(const std::string& name, Tensor t) {
    require(find(name) == nullptr, ErrorKind::contract, "duplicate parameter '" + name + "'");
    items_.emplace_back(name, std::move(t));
  }

  Tensor& at(const std::string& name) {
    Tensor* t = find(name);
    require(t != nullptr, ErrorKind::not_found, "no parameter '" + name + "'");
    return *t;
  }
  const Tensor& at(const std::string& name) const {
    return const_cast<Params*>(this)->at(name);
  }

  Tensor* find(const std::string& name) {
    for (auto& [n, t] : items_)
      if (n == name) return &t;
    return nullptr;
  }

  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  size_t size() const { return items_.size(); }

  void set_trainable(bool v) {
    for (auto& [n, t] : items_) t.set_requires_grad(v);
  }

  std::vector<Tensor> trainable() const {
    std::vector<Tensor> out;
    for (const auto& [n, t] : items_)
      if (t.requires_grad()) out.push_back(t);
    return out;
  }

  size_t numel() const {
    size_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

  void save_into(TensorFile& tf, const std::string& prefix = "") const {
    for (const auto& [n, t] : items_) tf.tensors.emplace_back(prefix + n, t);
  }

  // Copies values from the container into the registered tensors. Every
  // parameter must be present with a matching shape.
  void load_from(const TensorFile& tf, const std::string& prefix = "") {
    for (auto& [n, t] : items_) {
      const Tensor* src = tf.find(prefix + n);
      require(src != nullptr, ErrorKind::compatibility, "missing parameter '" + prefix + n + "'");
      require(src->shape() == t.shape(), ErrorKind::compatibility,
              "parameter '" + prefix + n + "' has mismatched shape");
      t.data() = src->data();
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

}  // namespace ltxb
