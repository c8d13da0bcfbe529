#include "ltxb/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "ltxb/text.hpp"

namespace ltxb {

namespace fs = std::filesystem;
using nlohmann::json;

const std::array<const char*, kShapes> kShapeNames = {"circle", "square", "triangle", "cross"};
const std::array<const char*, kColors> kColorNames = {"red", "green", "blue", "yellow"};
const std::array<const char*, kTextures> kTextureNames = {"solid", "striped", "dotted"};

const std::array<ReservedConcept, 4> kReserved = {{
    {"c1", 10},  // striped yellow circle
    {"c2", 14},  // dotted red square
    {"c3", 31},  // striped blue triangle
    {"c4", 41},  // dotted green cross
}};

int combo_index(int shape, int color, int texture) {
  require(shape >= 0 && shape < kShapes && color >= 0 && color < kColors && texture >= 0 &&
              texture < kTextures,
          ErrorKind::range, "subject coordinates out of range");
  return (shape * kColors + color) * kTextures + texture;
}
int combo_shape(int combo) { return combo / (kColors * kTextures); }
int combo_color(int combo) { return combo / kTextures % kColors; }
int combo_texture(int combo) { return combo % kTextures; }

std::string combo_phrase(int combo) {
  require(combo >= 0 && combo < kCombos, ErrorKind::range, "subject index out of range");
  std::string p;
  if (combo_texture(combo) != 0) p += std::string(kTextureNames[combo_texture(combo)]) + " ";
  p += kColorNames[combo_color(combo)];
  p += " ";
  p += kShapeNames[combo_shape(combo)];
  return p;
}

std::string combo_noun(int combo) {
  require(combo >= 0 && combo < kCombos, ErrorKind::range, "subject index out of range");
  return kShapeNames[combo_shape(combo)];
}

bool is_reserved(int combo) {
  for (const auto& r : kReserved)
    if (r.combo == combo) return true;
  return false;
}

namespace {

const float kColorVals[kColors][3] = {
    {1, -1, -1}, {-1, 1, -1}, {-1, -1, 1}, {1, 1, -1}};
const float kWhite[3] = {1, 1, 1};
const float kBackground[3] = {-0.2f, -0.2f, -0.2f};

bool inside(int shape, float dx, float dy, float r) {
  switch (shape) {
    case 0:
      return dx * dx + dy * dy <= r * r;
    case 1:
      return std::max(std::abs(dx), std::abs(dy)) <= r * 0.88f;
    case 2: {
      // apex up, base slightly above the bounding circle's bottom
      float depth = dy + r;
      return depth >= 0 && dy <= r * 0.8f && std::abs(dx) <= depth * 0.58f;
    }
    default:
      return (std::abs(dx) <= r * 0.34f && std::abs(dy) <= r) ||
             (std::abs(dy) <= r * 0.34f && std::abs(dx) <= r);
  }
}

// Texture coordinates ride on the object's center so the pattern travels
// with it, bands and dots on an 8 pixel pitch.
const float* texel(int combo, float dx, float dy) {
  int tex = combo_texture(combo);
  const float* col = kColorVals[combo_color(combo)];
  if (tex == 0) return col;
  if (tex == 1) {
    int band = (int)std::floor((dx + 64.f) / 4.f);
    return band % 2 == 0 ? col : kWhite;
  }
  float mx = dx - std::floor((dx + 64.f) / 8.f) * 8.f + 64.f;
  float my = dy - std::floor((dy + 64.f) / 8.f) * 8.f + 64.f;
  float ux = mx - std::floor(mx / 8.f) * 8.f - 4.f;
  float uy = my - std::floor(my / 8.f) * 8.f - 4.f;
  return ux * ux + uy * uy <= 2.4f * 2.4f ? col : kWhite;
}

}  // namespace

Image render_scene(const std::vector<Placement>& objects, int side) {
  Image img(side, side);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) img.at(c, y, x) = kBackground[c];
  for (const Placement& p : objects) {
    require(p.combo >= 0 && p.combo < kCombos, ErrorKind::range, "subject index out of range");
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        float dx = x + 0.5f - p.cx, dy = y + 0.5f - p.cy;
        if (!inside(combo_shape(p.combo), dx, dy, p.r)) continue;
        const float* col = texel(p.combo, dx, dy);
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = col[c];
      }
  }
  return img;
}

namespace {

struct Emitter {
  fs::path root;
  std::vector<Example>* out;
  int counter = 0;
  std::string subdir;

  std::string emit(const Image& img, const std::string& caption, std::vector<int> combos) {
    char name[64];
    std::snprintf(name, sizeof(name), "%s/img_%05d.png", subdir.c_str(), counter++);
    write_png((root / name).string(), img);
    out->push_back({name, caption, std::move(combos)});
    return name;
  }
};

// Shuffled cycle over the generation subjects, so every subject leads
// almost exactly the same number of scenes.
struct ComboCycle {
  std::vector<int> pool, cur;
  Rng* rng;
  int next() {
    if (cur.empty()) {
      cur = pool;
      rng->shuffle(cur);
    }
    int c = cur.back();
    cur.pop_back();
    return c;
  }
};

Placement jitter_single(int combo, Rng& rng) {
  Placement p;
  p.combo = combo;
  p.cx = (float)rng.uniform(13.0, 19.0);
  p.cy = (float)rng.uniform(13.0, 19.0);
  p.r = (float)rng.uniform(7.0, 10.0);
  return p;
}

Placement jitter_side(int combo, Rng& rng) {
  Placement p;
  p.combo = combo;
  p.cx = rng.bernoulli(0.5) ? (float)rng.uniform(7.0, 9.5) : (float)rng.uniform(22.5, 25.0);
  p.cy = (float)rng.uniform(13.0, 19.0);
  p.r = (float)rng.uniform(5.0, 6.5);
  return p;
}

void gen_split(Emitter& em, int n, ComboCycle& cycle, Rng& rng) {
  for (int i = 0; i < n; ++i) {
    double kind = rng.uniform();
    if (kind < 0.30) {
      int left = cycle.next();
      int right = left;
      while (right == left || is_reserved(right)) right = (int)rng.uniform_int(0, kCombos - 1);
      Placement pl, pr;
      pl.combo = left;
      pl.cx = (float)rng.uniform(7.0, 9.5);
      pl.cy = (float)rng.uniform(13.0, 19.0);
      pl.r = (float)rng.uniform(5.0, 6.5);
      pr.combo = right;
      pr.cx = (float)rng.uniform(22.5, 25.0);
      pr.cy = (float)rng.uniform(13.0, 19.0);
      pr.r = (float)rng.uniform(5.0, 6.5);
      std::string lp = rng.uniform() < 0.2 ? combo_noun(left) : combo_phrase(left);
      std::string rp = rng.uniform() < 0.2 ? combo_noun(right) : combo_phrase(right);
      std::string caption = "a " + lp + " beside a " + rp + ".";
      em.emit(render_scene({pl, pr}), caption, {left, right});
    } else {
      int combo = cycle.next();
      bool bare = kind < 0.55;
      std::string phrase = bare ? combo_noun(combo) : combo_phrase(combo);
      int tmpl = (int)rng.uniform_int(0, templates::kCount - 1);
      std::string caption = templates::subject_prompt(tmpl, "a", phrase);
      em.emit(render_scene({jitter_single(combo, rng)}), caption, {combo});
    }
  }
}

// The judge split covers every view the presence check will look at:
// centered subjects as generated from single-subject prompts, off-center
// small subjects as placed in two-subject scenes, and upscaled quadrant
// crops of the latter.
void gen_oracle(Emitter& em, int per_combo, Rng& rng) {
  std::vector<int> order;
  for (int c = 0; c < kCombos; ++c)
    for (int i = 0; i < per_combo; ++i) order.push_back(c);
  rng.shuffle(order);
  for (int combo : order) {
    double kind = rng.uniform();
    if (kind < 0.5) {
      em.emit(render_scene({jitter_single(combo, rng)}), combo_phrase(combo), {combo});
      continue;
    }
    Placement p = jitter_side(combo, rng);
    Image scene = render_scene({p});
    if (kind < 0.75) {
      em.emit(scene, combo_phrase(combo), {combo});
    } else {
      int x0 = p.cx < 16 ? 0 : 16;
      int y0 = p.cy < 16 ? 0 : 16;
      em.emit(upscale2x_crop(scene, x0, y0), combo_phrase(combo), {combo});
    }
  }
}

json examples_json(const std::vector<Example>& v) {
  json arr = json::array();
  for (const Example& e : v)
    arr.push_back({{"file", e.file}, {"caption", e.caption}, {"combos", e.combos}});
  return arr;
}

std::vector<Example> examples_from(const json& arr) {
  std::vector<Example> out;
  for (const auto& e : arr)
    out.push_back({e["file"], e["caption"], e["combos"].get<std::vector<int>>()});
  return out;
}

}  // namespace

void resolve_data_keys(const Config& cfg) {
  cfg.get_int("data.seed", 1234);
  cfg.get_int("data.train_n", 3000);
  cfg.get_int("data.val_n", 200);
  cfg.get_int("data.concept_refs", 5);
  cfg.get_int("data.oracle_per_combo", 60);
  cfg.get_int("data.oracle_val_per_combo", 10);
}

void Corpus::synthesize(const Config& cfg, const std::string& root) {
  uint64_t seed = (uint64_t)cfg.get_int("data.seed", 1234);
  int train_n = (int)cfg.get_int("data.train_n", 3000);
  int val_n = (int)cfg.get_int("data.val_n", 200);
  int refs = (int)cfg.get_int("data.concept_refs", 5);
  int oracle_n = (int)cfg.get_int("data.oracle_per_combo", 60);
  int oracle_val_n = (int)cfg.get_int("data.oracle_val_per_combo", 10);

  fs::create_directories(fs::path(root) / "train");
  fs::create_directories(fs::path(root) / "val");
  fs::create_directories(fs::path(root) / "oracle_train");
  fs::create_directories(fs::path(root) / "oracle_val");

  Rng base(seed);
  std::vector<int> open;
  for (int i = 0; i < kCombos; ++i)
    if (!is_reserved(i)) open.push_back(i);

  json meta;
  meta["seed"] = seed;
  meta["grid"] = 32;

  std::vector<Example> train, val, otrain, oval;
  {
    Rng rng = base.child("train");
    ComboCycle cyc{open, {}, &rng};
    Emitter em{root, &train, 0, "train"};
    gen_split(em, train_n, cyc, rng);
  }
  {
    Rng rng = base.child("val");
    ComboCycle cyc{open, {}, &rng};
    Emitter em{root, &val, 0, "val"};
    gen_split(em, val_n, cyc, rng);
  }
  {
    Rng rng = base.child("oracle_train");
    Emitter em{root, &otrain, 0, "oracle_train"};
    gen_oracle(em, oracle_n, rng);
  }
  {
    Rng rng = base.child("oracle_val");
    Emitter em{root, &oval, 0, "oracle_val"};
    gen_oracle(em, oracle_val_n, rng);
  }

  json cjs = json::array();
  for (const auto& rc : kReserved) {
    Rng rng = base.child(std::string("concept_") + rc.name);
    fs::create_directories(fs::path(root) / "concepts" / rc.name);
    json files = json::array();
    for (int i = 0; i < refs; ++i) {
      std::string name = std::string("concepts/") + rc.name + "/ref_" + std::to_string(i) + ".png";
      write_png((fs::path(root) / name).string(), render_scene({jitter_single(rc.combo, rng)}));
      files.push_back(name);
    }
    cjs.push_back({{"name", rc.name},
                   {"noun", combo_noun(rc.combo)},
                   {"phrase", combo_phrase(rc.combo)},
                   {"combo", rc.combo},
                   {"files", files}});
  }

  meta["train"] = examples_json(train);
  meta["val"] = examples_json(val);
  meta["oracle_train"] = examples_json(otrain);
  meta["oracle_val"] = examples_json(oval);
  meta["concepts"] = cjs;

  std::ofstream out(fs::path(root) / "manifest.json");
  require(out.good(), ErrorKind::io, "cannot write manifest under '" + root + "'");
  out << meta.dump(1);
  require(out.good(), ErrorKind::io, "manifest write failed under '" + root + "'");
}

Corpus Corpus::load(const std::string& root) {
  std::ifstream in(fs::path(root) / "manifest.json");
  require(in.good(), ErrorKind::io, "no corpus manifest under '" + root + "'");
  json meta = json::parse(in, nullptr, false);
  require(!meta.is_discarded(), ErrorKind::corruption, "corpus manifest is not valid JSON");

  Corpus c;
  c.root_ = root;
  c.seed = meta["seed"];
  c.train = examples_from(meta["train"]);
  c.val = examples_from(meta["val"]);
  c.oracle_train = examples_from(meta["oracle_train"]);
  c.oracle_val = examples_from(meta["oracle_val"]);
  for (const auto& e : meta["concepts"]) {
    ConceptSet cs;
    cs.name = e["name"];
    cs.noun = e["noun"];
    cs.phrase = e["phrase"];
    cs.combo = e["combo"];
    cs.files = e["files"].get<std::vector<std::string>>();
    c.concepts.push_back(std::move(cs));
  }
  return c;
}

Image Corpus::image(const Example& ex) const { return image(ex.file); }

Image Corpus::image(const std::string& rel_file) const {
  return read_png((fs::path(root_) / rel_file).string());
}

const ConceptSet& Corpus::concept_set(const std::string& name) const {
  for (const auto& cs : concepts)
    if (cs.name == name) return cs;
  fail(ErrorKind::not_found, "no concept '" + name + "' in the corpus");
}

}  // namespace ltxb
