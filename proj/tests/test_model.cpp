#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>

#include "ltxb/model.hpp"
#include "ltxb/optim.hpp"

using namespace ltxb;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  throw std::logic_error("expected an Error");
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("gradient descent walks a quadratic downhill") {
  Rng rng(1);
  Tensor x = Tensor::randn({4, 4}, rng, 2.f, true);
  std::vector<Tensor> ps{x};
  SgdClip opt;
  opt.lr = 0.1f;
  for (int i = 0; i < 200; ++i) {
    backward(sum_all(mul(x, x)));
    opt.step(ps);
  }
  for (float v : x.data()) CHECK(std::abs(v) < 1e-3f);
  CHECK(!x.has_grad());
}

TEST_CASE("global norm clip caps the step") {
  Tensor x = Tensor::from({2, 2}, {3.f, 4.f, 0.f, 0.f}, true);
  std::vector<Tensor> ps{x};
  backward(sum_all(mul(x, x)));  // grad = 2x, norm 10
  CHECK(global_grad_norm(ps) == doctest::Approx(10.0));
  double pre = clip_global_norm(ps, 1.0);
  CHECK(pre == doctest::Approx(10.0));
  CHECK(global_grad_norm(ps) == doctest::Approx(1.0).epsilon(1e-5));
  zero_grads(ps);
  CHECK(!x.has_grad());
}

TEST_CASE("adam takes near-constant first steps and converges") {
  Tensor x = Tensor::from({1, 3}, {5.f, -3.f, 0.5f}, true);
  std::vector<Tensor> ps{x};
  Adam opt;
  opt.lr = 0.05f;
  std::vector<float> before = x.data();
  backward(sum_all(mul(x, x)));
  opt.step(ps);
  for (int i = 0; i < 3; ++i) {
    float moved = before[i] - x.data()[i];
    CHECK(std::abs(moved) == doctest::Approx(0.05f).epsilon(1e-3));
    CHECK(moved * before[i] > 0);
  }
  for (int i = 0; i < 400; ++i) {
    backward(sum_all(mul(x, x)));
    opt.step(ps);
  }
  for (float v : x.data()) CHECK(std::abs(v) < 1e-2f);
}

TEST_CASE("frozen parameters are skipped by the optimizer") {
  Tensor a = Tensor::from({1, 2}, {1.f, 1.f}, true);
  Tensor b = Tensor::from({1, 2}, {1.f, 1.f}, false);
  std::vector<Tensor> ps{a, b};
  backward(sum_all(mul(add(a, b), add(a, b))));
  SgdClip opt;
  opt.lr = 0.1f;
  opt.step(ps);
  CHECK(a.data()[0] != 1.f);
  CHECK(b.data()[0] == 1.f);
}

TEST_CASE("backbone builds from config and conditions prompts") {
  Vocab v = Vocab::standard();
  Config cfg = Config::parse_string("");
  Backbone b = Backbone::from_config(cfg, v);
  Rng rng(5);
  b.init(rng);
  CHECK(b.enc_cfg.vocab_size == v.size());
  CHECK(b.den_cfg.t_levels == b.sch.T + 1);

  std::vector<KV> kv = b.condition(tokenize(v, "a red circle.").ids);
  REQUIRE(kv.size() == 4);
  Tensor z = Tensor::randn({1024, 3}, rng);
  DenoiserOut out = b.den.forward(z, 42, kv);
  CHECK(out.eps.shape() == Shape{1024, 3});

  Params all = b.all_params();
  CHECK(all.find("enc.tok_emb") != nullptr);
  CHECK(all.find("proj.l3.wv") != nullptr);
  CHECK(all.find("den.out.w") != nullptr);
}

TEST_CASE("backbone bundles survive save and load") {
  Vocab v = Vocab::standard();
  Config cfg = Config::parse_string("[model]\ngrid = 16\nw1 = 8\nw2 = 16\n");
  Backbone a = Backbone::from_config(cfg, v);
  Rng rng(9);
  a.init(rng);
  a.model_hash = 0xdeadbeef12345678ull;
  a.trained_steps = 321;

  std::string path = temp_path("ltxb_backbone_test.ltxb");
  a.save(path);
  Backbone b = Backbone::load(path);
  CHECK(b.model_hash == a.model_hash);
  CHECK(b.trained_steps == 321);
  CHECK(b.den_cfg.h == 16);
  CHECK(b.enc_cfg.vocab_size == v.size());

  std::vector<int> ids = tokenize(v, "a dotted green cross.").ids;
  std::vector<KV> ka = a.condition(ids), kb = b.condition(ids);
  for (int l = 0; l < 4; ++l) {
    CHECK(std::memcmp(ka[l].k.data().data(), kb[l].k.data().data(),
                      ka[l].k.numel() * sizeof(float)) == 0);
    CHECK(std::memcmp(ka[l].v.data().data(), kb[l].v.data().data(),
                      ka[l].v.numel() * sizeof(float)) == 0);
  }
  Tensor z = Tensor::randn({256, 3}, rng);
  CHECK(std::memcmp(a.den.forward(z, 7, ka).eps.data().data(),
                    b.den.forward(z, 7, kb).eps.data().data(), 256 * 3 * sizeof(float)) == 0);
  std::remove(path.c_str());
}

TEST_CASE("loading a foreign file is a compatibility error") {
  std::string path = temp_path("ltxb_not_backbone.ltxb");
  TensorFile tf;
  tf.metadata_json = R"({"kind":"other"})";
  tf.tensors.emplace_back("x", Tensor::zeros({2, 2}));
  write_tensor_file(path, tf);
  CHECK(kind_of([&] { Backbone::load(path); }) == ErrorKind::compatibility);
  std::remove(path.c_str());
}
