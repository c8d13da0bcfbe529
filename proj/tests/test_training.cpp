#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "ltxb/training.hpp"

using namespace ltxb;

namespace {

const char* kTinyModel =
    "seed = 7\n"
    "[model]\n"
    "d_model = 32\n"
    "enc_layers = 1\n"
    "heads = 2\n"
    "w1 = 8\n"
    "w2 = 16\n"
    "d_latent = 32\n"
    "temb = 32\n"
    "[schedule]\n"
    "T = 20\n"
    "[data]\n"
    "train_n = 40\n"
    "val_n = 8\n"
    "concept_refs = 3\n"
    "oracle_per_combo = 1\n"
    "oracle_val_per_combo = 1\n";

const std::string& corpus_root() {
  static std::string root;
  if (root.empty()) {
    root = (std::filesystem::temp_directory_path() / "ltxb_train_corpus").string();
    std::filesystem::remove_all(root);
    Corpus::synthesize(Config::parse_string(kTinyModel), root);
  }
  return root;
}

Backbone make_backbone(const Config& cfg, const Vocab& vocab) {
  Backbone bb = Backbone::from_config(cfg, vocab);
  Rng rng((uint64_t)cfg.get_int("seed", 0));
  bb.init(rng);
  return bb;
}

}  // namespace

TEST_CASE("zero-step pretrain emits a loadable container") {
  Vocab vocab = Vocab::standard();
  Config cfg = Config::parse_string(kTinyModel);
  cfg.set("pretrain.steps", (int64_t)0);
  Corpus corpus = Corpus::load(corpus_root());
  Backbone bb = make_backbone(cfg, vocab);
  PretrainReport rep = pretrain(bb, corpus, vocab, cfg, Rng(7).child("pretrain"));
  CHECK(rep.steps_run == 0);
  CHECK(bb.model_hash == cfg.model_hash());

  auto path = (std::filesystem::temp_directory_path() / "ltxb_zero.ltxb").string();
  bb.save(path);
  Backbone back = Backbone::load(path);
  CHECK(back.trained_steps == 0);
  CHECK(back.model_hash == bb.model_hash);
  CHECK(back.enc.token_table().data() == bb.enc.token_table().data());
  std::filesystem::remove(path);
}

TEST_CASE("same seed reproduces the container bit for bit") {
  Vocab vocab = Vocab::standard();
  Corpus corpus = Corpus::load(corpus_root());
  auto run = [&](const std::string& name) {
    Config cfg = Config::parse_string(kTinyModel);
    cfg.set("pretrain.steps", (int64_t)10);
    cfg.set("pretrain.min_steps", (int64_t)0);
    cfg.set("pretrain.batch", (int64_t)2);
    cfg.set("pretrain.val_every", (int64_t)5);
    cfg.set("pretrain.val_batch", (int64_t)4);
    cfg.set("pretrain.require_convergence", false);
    Backbone bb = make_backbone(cfg, vocab);
    pretrain(bb, corpus, vocab, cfg, Rng(7).child("pretrain"));
    auto path = (std::filesystem::temp_directory_path() / name).string();
    bb.save(path);
    return path;
  };
  std::string a = run("ltxb_rep_a.ltxb"), b = run("ltxb_rep_b.ltxb");
  CHECK(read_tensor_file_hash(a) == read_tensor_file_hash(b));
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

TEST_CASE("training loss trends downhill on a tiny run") {
  Vocab vocab = Vocab::standard();
  Corpus corpus = Corpus::load(corpus_root());
  Config cfg = Config::parse_string(kTinyModel);
  cfg.set("pretrain.steps", (int64_t)60);
  cfg.set("pretrain.min_steps", (int64_t)0);
  cfg.set("pretrain.batch", (int64_t)4);
  cfg.set("pretrain.val_every", (int64_t)20);
  cfg.set("pretrain.val_batch", (int64_t)8);
  cfg.set("pretrain.require_convergence", false);
  Backbone bb = make_backbone(cfg, vocab);
  PretrainReport rep = pretrain(bb, corpus, vocab, cfg, Rng(7).child("pretrain"));
  REQUIRE(rep.steps_run == 60);
  REQUIRE(rep.val_curve.size() == 3);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += rep.train_losses[i];
    tail += rep.train_losses[rep.train_losses.size() - 1 - i];
  }
  CHECK(tail < head);
  CHECK(bb.trained_steps == 60);
}

TEST_CASE("a run that never plateaus is reported as a training error") {
  Vocab vocab = Vocab::standard();
  Corpus corpus = Corpus::load(corpus_root());
  Config cfg = Config::parse_string(kTinyModel);
  cfg.set("pretrain.steps", (int64_t)10);
  cfg.set("pretrain.min_steps", (int64_t)0);
  cfg.set("pretrain.batch", (int64_t)1);
  cfg.set("pretrain.val_every", (int64_t)5);
  cfg.set("pretrain.val_batch", (int64_t)2);
  cfg.set("pretrain.patience", (int64_t)50);
  Backbone bb = make_backbone(cfg, vocab);
  try {
    pretrain(bb, corpus, vocab, cfg, Rng(7).child("pretrain"));
    FAIL("expected a training error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::training);
  }
}
