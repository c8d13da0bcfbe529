#pragma once

#include <array>
#include <string>
#include <vector>

#include "ltxb/config.hpp"
#include "ltxb/image.hpp"
#include "ltxb/rng.hpp"

namespace ltxb {

// 48 renderable subjects: shape x color x texture.
inline constexpr int kShapes = 4, kColors = 4, kTextures = 3, kCombos = 48;
extern const std::array<const char*, kShapes> kShapeNames;      // circle square triangle cross
extern const std::array<const char*, kColors> kColorNames;      // red green blue yellow
extern const std::array<const char*, kTextures> kTextureNames;  // solid striped dotted

int combo_index(int shape, int color, int texture);
int combo_shape(int combo);
int combo_color(int combo);
int combo_texture(int combo);

// Word form used in captions; solid subjects are described without their
// texture word, so "a red circle" always means the solid one.
std::string combo_phrase(int combo);
std::string combo_noun(int combo);

// Subjects held out of the generation corpus and reserved for
// customization.
struct ReservedConcept {
  const char* name;
  int combo;
};
extern const std::array<ReservedConcept, 4> kReserved;
bool is_reserved(int combo);

struct Placement {
  int combo = 0;
  float cx = 16, cy = 16, r = 8;
};
Image render_scene(const std::vector<Placement>& objects, int side = 32);

struct Example {
  std::string file;
  std::string caption;
  std::vector<int> combos;
};

struct ConceptSet {
  std::string name;
  std::string noun;
  std::string phrase;
  int combo = 0;
  std::vector<std::string> files;
};

// Marks every corpus config key as resolved so the model fingerprint covers
// them even in runs that load a prebuilt corpus instead of synthesizing.
void resolve_data_keys(const Config& cfg);

// On-disk corpus: generation splits with captions, label-only splits for
// the presence judge, and reference images for each reserved subject.
class Corpus {
 public:
  static void synthesize(const Config& cfg, const std::string& root);
  static Corpus load(const std::string& root);

  const std::string& root() const { return root_; }
  Image image(const Example& ex) const;
  Image image(const std::string& rel_file) const;
  const ConceptSet& concept_set(const std::string& name) const;  // not_found

  uint64_t seed = 0;
  std::vector<Example> train, val;
  std::vector<Example> oracle_train, oracle_val;
  std::vector<ConceptSet> concepts;

 private:
  std::string root_;
};

}  // namespace ltxb
