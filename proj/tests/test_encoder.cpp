#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "ltxb/encoder.hpp"
#include "ltxb/rng.hpp"
#include "ltxb/text.hpp"

using namespace ltxb;

namespace {

using dvec = std::vector<double>;

dvec to_d(const std::vector<float>& v) { return dvec(v.begin(), v.end()); }

// mat [m x k] * mat [k x n]
dvec dmm(const dvec& a, const dvec& b, int m, int k, int n) {
  dvec c((size_t)m * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      double av = a[(size_t)i * k + p];
      for (int j = 0; j < n; ++j) c[(size_t)i * n + j] += av * b[(size_t)p * n + j];
    }
  return c;
}

dvec dln(const dvec& x, const dvec& g, const dvec& b, int m, int n) {
  dvec out((size_t)m * n);
  for (int i = 0; i < m; ++i) {
    double mu = 0, var = 0;
    for (int j = 0; j < n; ++j) mu += x[(size_t)i * n + j];
    mu /= n;
    for (int j = 0; j < n; ++j) {
      double d = x[(size_t)i * n + j] - mu;
      var += d * d;
    }
    var /= n;
    double inv = 1.0 / std::sqrt(var + 1e-5);
    for (int j = 0; j < n; ++j)
      out[(size_t)i * n + j] = (x[(size_t)i * n + j] - mu) * inv * g[j] + b[j];
  }
  return out;
}

double dsilu(double v) { return v / (1.0 + std::exp(-v)); }

// Independent full-precision forward of the encoder, reading the engine's
// parameter values by name.
dvec reference_encode(const TextEncoder& enc, const std::vector<int>& ids,
                      const dvec* override_row, const std::vector<int>& positions) {
  const EncoderConfig& c = enc.config();
  int M = c.max_len, d = c.d_model, H = c.heads, hd = d / H;
  auto P = [&](const std::string& n) { return to_d(enc.params().at(n).data()); };

  dvec tok = P("enc.tok_emb"), pos = P("enc.pos_emb");
  dvec x((size_t)M * d);
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < d; ++j) x[(size_t)i * d + j] = tok[(size_t)ids[i] * d + j];
  if (override_row)
    for (int p : positions)
      for (int j = 0; j < d; ++j) x[(size_t)p * d + j] = (*override_row)[j];
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < d; ++j) x[(size_t)i * d + j] += pos[(size_t)i * d + j];

  for (int l = 0; l < c.layers; ++l) {
    std::string pre = "enc.l" + std::to_string(l) + ".";
    dvec a = dln(x, P(pre + "ln1.g"), P(pre + "ln1.b"), M, d);
    dvec q = dmm(a, P(pre + "attn.wq"), M, d, d);
    dvec k = dmm(a, P(pre + "attn.wk"), M, d, d);
    dvec v = dmm(a, P(pre + "attn.wv"), M, d, d);
    dvec merged((size_t)M * d, 0.0);
    for (int h = 0; h < H; ++h) {
      for (int i = 0; i < M; ++i) {
        dvec scores(M);
        for (int j = 0; j < M; ++j) {
          double s = 0;
          for (int t = 0; t < hd; ++t)
            s += q[(size_t)i * d + h * hd + t] * k[(size_t)j * d + h * hd + t];
          s /= std::sqrt((double)hd);
          if (c.causal && j > i) s -= 1e9;
          scores[j] = s;
        }
        double mx = scores[0];
        for (double s : scores) mx = std::max(mx, s);
        double z = 0;
        for (double& s : scores) {
          s = std::exp(s - mx);
          z += s;
        }
        for (double& s : scores) s /= z;
        for (int t = 0; t < hd; ++t) {
          double o = 0;
          for (int j = 0; j < M; ++j) o += scores[j] * v[(size_t)j * d + h * hd + t];
          merged[(size_t)i * d + h * hd + t] = o;
        }
      }
    }
    dvec attn_out = dmm(merged, P(pre + "attn.wo"), M, d, d);
    for (size_t i = 0; i < x.size(); ++i) x[i] += attn_out[i];

    dvec m = dln(x, P(pre + "ln2.g"), P(pre + "ln2.b"), M, d);
    int dm = d * enc.config().mlp_mult;
    dvec h1 = dmm(m, P(pre + "mlp.w1"), M, d, dm);
    dvec b1 = P(pre + "mlp.b1");
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < dm; ++j) h1[(size_t)i * dm + j] = dsilu(h1[(size_t)i * dm + j] + b1[j]);
    dvec h2 = dmm(h1, P(pre + "mlp.w2"), M, dm, d);
    dvec b2 = P(pre + "mlp.b2");
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < d; ++j) x[(size_t)i * d + j] += h2[(size_t)i * d + j] + b2[j];
  }
  return dln(x, P("enc.ln_f.g"), P("enc.ln_f.b"), M, d);
}

double max_rel_gap(const std::vector<float>& got, const dvec& want) {
  double scale = 1.0;
  for (double w : want) scale = std::max(scale, std::abs(w));
  double worst = 0;
  for (size_t i = 0; i < want.size(); ++i)
    worst = std::max(worst, std::abs((double)got[i] - want[i]) / scale);
  return worst;
}

std::vector<int> prompt_ids(const Vocab& v, const std::string& p) { return tokenize(v, p).ids; }

}  // namespace

TEST_CASE("encoder forward matches the full-precision reference") {
  Vocab v = Vocab::standard();
  for (bool causal : {false, true}) {
    EncoderConfig cfg;
    cfg.vocab_size = v.size();
    cfg.causal = causal;
    TextEncoder enc(cfg);
    Rng rng(causal ? 11 : 10);
    enc.init(rng);
    for (const char* p : {"a circle.", "A photo of a striped yellow circle.",
                          "a red square beside a blue cross.", "the", ""}) {
      std::vector<int> ids = prompt_ids(v, p);
      Tensor h = enc.encode(ids);
      REQUIRE(h.shape() == Shape{16, 64});
      dvec want = reference_encode(enc, ids, nullptr, {});
      CHECK(max_rel_gap(h.data(), want) < 1e-4);
    }
  }
}

TEST_CASE("override splice matches the reference and degenerates to the base prompt") {
  Vocab v = Vocab::standard();
  EncoderConfig cfg;
  cfg.vocab_size = v.size();
  TextEncoder enc(cfg);
  Rng rng(21);
  enc.init(rng);

  std::vector<int> cids = prompt_ids(v, "photo of v1* circle.");
  int pos = 3;
  REQUIRE(cids[pos] == v.id("v1*"));

  Tensor row = Tensor::randn({1, 64}, rng, 0.1f, true);
  Tensor h = enc.encode(cids, row, {pos});
  dvec row_d = to_d(row.data());
  dvec want = reference_encode(enc, cids, &row_d, {pos});
  CHECK(max_rel_gap(h.data(), want) < 1e-4);

  // identical values in the spliced row and the plain article row mean the
  // two encodings are the same floats, bit for bit
  const auto& table = enc.token_table().data();
  std::vector<float> arow(table.begin() + (size_t)v.id("a") * 64,
                          table.begin() + (size_t)(v.id("a") + 1) * 64);
  Tensor same = Tensor::from({1, 64}, arow);
  Tensor hc = enc.encode(cids, same, {pos});
  Tensor hb = enc.encode(prompt_ids(v, "photo of a circle."));
  CHECK(std::memcmp(hc.data().data(), hb.data().data(), hb.numel() * sizeof(float)) == 0);
}

TEST_CASE("causal flag controls whether the future reaches earlier rows") {
  Vocab v = Vocab::standard();
  for (bool causal : {true, false}) {
    EncoderConfig cfg;
    cfg.vocab_size = v.size();
    cfg.causal = causal;
    TextEncoder enc(cfg);
    Rng rng(5);
    enc.init(rng);
    std::vector<int> a = prompt_ids(v, "a red circle.");
    std::vector<int> b = prompt_ids(v, "a red square.");
    Tensor ha = enc.encode(a);
    Tensor hb = enc.encode(b);
    bool prefix_same = true;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 64; ++j)
        if (ha.data()[(size_t)i * 64 + j] != hb.data()[(size_t)i * 64 + j]) prefix_same = false;
    CHECK(prefix_same == causal);
  }
}

TEST_CASE("frozen encoder routes gradient to the override only") {
  Vocab v = Vocab::standard();
  EncoderConfig cfg;
  cfg.vocab_size = v.size();
  TextEncoder enc(cfg);
  Rng rng(31);
  enc.init(rng);
  enc.params().set_trainable(false);

  std::vector<int> cids = prompt_ids(v, "photo of v2* square.");
  Tensor row = Tensor::randn({1, 64}, rng, 0.1f, true);
  Tensor h = enc.encode(cids, row, {3});
  backward(mean_all(h));

  REQUIRE(row.has_grad());
  double gn = 0;
  for (float g : row.grad()) gn += std::abs(g);
  CHECK(gn > 0);
  for (const auto& [name, t] : enc.params().items()) CHECK(!t.has_grad());

  enc.params().set_trainable(true);
  Tensor h2 = enc.encode(cids, row, {3});
  backward(mean_all(h2));
  CHECK(enc.params().at("enc.tok_emb").has_grad());
}

TEST_CASE("same seed means bit-identical encoders") {
  Vocab v = Vocab::standard();
  EncoderConfig cfg;
  cfg.vocab_size = v.size();
  TextEncoder e1(cfg), e2(cfg);
  Rng r1(77), r2(77);
  e1.init(r1);
  e2.init(r2);
  std::vector<int> ids = prompt_ids(v, "a fancy photo of a triangle.");
  Tensor h1 = e1.encode(ids), h2 = e2.encode(ids);
  CHECK(std::memcmp(h1.data().data(), h2.data().data(), h1.numel() * sizeof(float)) == 0);
}

TEST_CASE("projections map features to per-layer latent streams") {
  Rng rng(9);
  ProjectionSet ps;
  ps.init(rng);
  Tensor h = Tensor::randn({16, 64}, rng);
  std::vector<KV> kvs = ps.project(h);
  REQUIRE(kvs.size() == 4);
  for (int l = 0; l < 4; ++l) {
    REQUIRE(kvs[l].k.shape() == Shape{16, 64});
    REQUIRE(kvs[l].v.shape() == Shape{16, 64});
    dvec want = dmm(to_d(h.data()), to_d(ps.wk[l].data()), 16, 64, 64);
    CHECK(max_rel_gap(kvs[l].k.data(), want) < 1e-5);
  }

  ProjectionSet copy = ps.clone(true);
  CHECK(copy.wk[0].requires_grad());
  copy.wk[0].data()[0] += 1.f;
  CHECK(ps.wk[0].data()[0] != copy.wk[0].data()[0]);

  Params reg;
  ps.collect(reg);
  CHECK(reg.size() == 8);
  CHECK(reg.find("proj.l0.wk") != nullptr);
  CHECK(reg.find("proj.l3.wv") != nullptr);
}

TEST_CASE("parameters survive a save and load") {
  Vocab v = Vocab::standard();
  EncoderConfig cfg;
  cfg.vocab_size = v.size();
  TextEncoder a(cfg), b(cfg);
  Rng r1(1), r2(2);
  a.init(r1);
  b.init(r2);

  TensorFile tf;
  a.params().save_into(tf);
  std::vector<char> bytes = serialize_tensor_file(tf);
  TensorFile back = parse_tensor_file(bytes);
  b.params().load_from(back);

  std::vector<int> ids = prompt_ids(v, "a dotted green cross.");
  Tensor ha = a.encode(ids), hb = b.encode(ids);
  CHECK(std::memcmp(ha.data().data(), hb.data().data(), ha.numel() * sizeof(float)) == 0);
}
