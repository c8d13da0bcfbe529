#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "ltxb/dataset.hpp"
#include "ltxb/text.hpp"

using namespace ltxb;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

int count_color(const Image& img, const float* col) {
  int n = 0;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      bool hit = true;
      for (int c = 0; c < 3; ++c)
        if (std::abs(img.at(c, y, x) - col[c]) > 0.05f) hit = false;
      if (hit) ++n;
    }
  return n;
}

const float kRed[3] = {1, -1, -1};
const float kWhiteC[3] = {1, 1, 1};

}  // namespace

TEST_CASE("combo coordinates round trip and reserved subjects are marked") {
  for (int c = 0; c < kCombos; ++c) {
    CHECK(combo_index(combo_shape(c), combo_color(c), combo_texture(c)) == c);
  }
  CHECK(combo_phrase(10) == "striped yellow circle");
  CHECK(combo_phrase(14) == "dotted red square");
  CHECK(combo_phrase(31) == "striped blue triangle");
  CHECK(combo_phrase(41) == "dotted green cross");
  CHECK(combo_phrase(combo_index(0, 0, 0)) == "red circle");
  CHECK(combo_noun(10) == "circle");
  int reserved = 0;
  for (int c = 0; c < kCombos; ++c) reserved += is_reserved(c);
  CHECK(reserved == 4);
}

TEST_CASE("renderer drawn textures behave") {
  int solid_red_circle = combo_index(0, 0, 0);
  int striped_red_circle = combo_index(0, 0, 1);
  int dotted_red_circle = combo_index(0, 0, 2);

  Image solid = render_scene({{solid_red_circle, 16, 16, 9}});
  Image striped = render_scene({{striped_red_circle, 16, 16, 9}});
  Image dotted = render_scene({{dotted_red_circle, 16, 16, 9}});

  CHECK(count_color(solid, kRed) > 150);
  CHECK(count_color(solid, kWhiteC) == 0);
  CHECK(count_color(striped, kRed) > 40);
  CHECK(count_color(striped, kWhiteC) > 40);
  CHECK(count_color(dotted, kRed) > 10);
  CHECK(count_color(dotted, kWhiteC) > 80);

  Image again = render_scene({{striped_red_circle, 16, 16, 9}});
  CHECK(std::memcmp(striped.px.data(), again.px.data(), striped.px.size() * sizeof(float)) == 0);

  bool differs = false;
  Image square = render_scene({{combo_index(1, 0, 0), 16, 16, 9}});
  for (size_t i = 0; i < solid.px.size(); ++i)
    if (solid.px[i] != square.px[i]) differs = true;
  CHECK(differs);
}

TEST_CASE("pair scenes place the first subject left") {
  int a = combo_index(0, 0, 0), b = combo_index(1, 2, 0);  // red circle, blue square
  Image img = render_scene({{a, 8, 16, 5.5f}, {b, 24, 16, 5.5f}});
  const float kBlue[3] = {-1, -1, 1};
  int red_left = 0, blue_right = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 16; ++x) {
      bool r = std::abs(img.at(0, y, x) - 1) < 0.05f && std::abs(img.at(2, y, x) + 1) < 0.05f;
      red_left += r;
    }
  for (int y = 0; y < 32; ++y)
    for (int x = 16; x < 32; ++x)
      blue_right += std::abs(img.at(2, y, x) - 1) < 0.05f && std::abs(img.at(0, y, x) + 1) < 0.05f;
  CHECK(red_left > 50);
  CHECK(blue_right > 50);
  CHECK(count_color(img, kBlue) > 50);
}

TEST_CASE("synthesized corpus has the pinned composition") {
  std::string root = fresh_dir("ltxb_corpus_a");
  Config cfg = Config::parse_string(
      "[data]\ntrain_n = 600\nval_n = 80\nconcept_refs = 4\n"
      "oracle_per_combo = 3\noracle_val_per_combo = 2\n");
  Corpus::synthesize(cfg, root);
  Corpus c = Corpus::load(root);

  CHECK(c.train.size() == 600);
  CHECK(c.val.size() == 80);
  CHECK(c.oracle_train.size() == 48 * 3);
  CHECK(c.oracle_val.size() == 48 * 2);
  REQUIRE(c.concepts.size() == 4);
  CHECK(c.concepts[0].name == "c1");
  CHECK(c.concepts[0].noun == "circle");
  CHECK(c.concepts[0].files.size() == 4);

  Vocab v = Vocab::standard();
  int bare = 0, beside = 0;
  std::map<int, int> primary;
  for (const Example& e : c.train) {
    Tokenized t = tokenize(v, e.caption);  // throws on any bad caption
    CHECK(t.length <= 16);
    for (int combo : e.combos) {
      CHECK(!is_reserved(combo));
      CHECK(combo >= 0);
      CHECK(combo < kCombos);
    }
    primary[e.combos[0]]++;
    if (e.caption.find("beside") != std::string::npos) {
      ++beside;
      CHECK(e.combos.size() == 2);
    } else {
      CHECK(e.combos.size() == 1);
      bool has_color = false;
      for (int ci = 0; ci < kColors; ++ci)
        if (e.caption.find(kColorNames[ci]) != std::string::npos) has_color = true;
      bare += !has_color;
    }
    CHECK(e.caption.find("solid") == std::string::npos);
  }
  CHECK(beside > 600 * 0.22);
  CHECK(beside < 600 * 0.38);
  CHECK(bare > 600 * 0.17);
  CHECK(bare < 600 * 0.33);

  CHECK((int)primary.size() == 44);
  int lo = 1 << 30, hi = 0;
  for (auto& [combo, n] : primary) {
    lo = std::min(lo, n);
    hi = std::max(hi, n);
  }
  CHECK(hi - lo <= 2);

  for (const Example& e : c.oracle_train) CHECK(e.combos.size() == 1);
  std::set<int> oracle_classes;
  for (const Example& e : c.oracle_train) oracle_classes.insert(e.combos[0]);
  CHECK(oracle_classes.size() == 48);

  Image img = c.image(c.train.front());
  CHECK(img.w == 32);
  CHECK(img.h == 32);
  Image ref = c.image(c.concepts[0].files[0]);
  CHECK(count_color(ref, kWhiteC) > 20);  // striped subject carries white bands
}

TEST_CASE("resynthesis is bit identical") {
  std::string ra = fresh_dir("ltxb_corpus_b1");
  std::string rb = fresh_dir("ltxb_corpus_b2");
  Config ca = Config::parse_string("[data]\ntrain_n = 60\nval_n = 10\nconcept_refs = 2\n"
                                   "oracle_per_combo = 1\noracle_val_per_combo = 1\n");
  Config cb = Config::parse_string("[data]\ntrain_n = 60\nval_n = 10\nconcept_refs = 2\n"
                                   "oracle_per_combo = 1\noracle_val_per_combo = 1\n");
  Corpus::synthesize(ca, ra);
  Corpus::synthesize(cb, rb);
  CHECK(slurp(ra + "/manifest.json") == slurp(rb + "/manifest.json"));
  Corpus a = Corpus::load(ra);
  for (const Example& e : {a.train[0], a.train[30], a.val[5]})
    CHECK(slurp(ra + "/" + e.file) == slurp(rb + "/" + e.file));
  CHECK(slurp(ra + "/concepts/c3/ref_1.png") == slurp(rb + "/concepts/c3/ref_1.png"));

  std::string rc = fresh_dir("ltxb_corpus_b3");
  Config cc = Config::parse_string("[data]\nseed = 99\ntrain_n = 60\nval_n = 10\n"
                                   "concept_refs = 2\noracle_per_combo = 1\n"
                                   "oracle_val_per_combo = 1\n");
  Corpus::synthesize(cc, rc);
  CHECK(slurp(ra + "/manifest.json") != slurp(rc + "/manifest.json"));
}
