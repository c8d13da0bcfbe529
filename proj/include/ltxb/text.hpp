#pragma once

#include <string>
#include <vector>

#include "ltxb/error.hpp"

namespace ltxb {

// Closed word list. Ordinary words first, then a reserved block of subject
// identifiers (v1* .. v8*) at the tail, so is_identifier is a range check.
class Vocab {
 public:
  static Vocab standard();

  int id(const std::string& word) const;           // vocabulary error when unknown
  const std::string& word(int id) const;           // range error
  bool has(const std::string& word) const;

  int size() const { return (int)words_.size(); }
  int base_size() const { return base_size_; }
  bool is_identifier(int id) const { return id >= base_size_ && id < size(); }

  int pad_id() const { return 0; }
  int bos_id() const { return 1; }

  std::vector<int> identifier_ids() const;

  // test-only constructor for vocabularies with a different identifier block
  Vocab(std::vector<std::string> words, int base_size);

 private:
  std::vector<std::string> words_;
  int base_size_ = 0;
};

// Prompts are lowercased, '.' and ',' split off as their own tokens, and the
// id sequence is BOS-prefixed then padded to max_len.
struct Tokenized {
  std::vector<int> ids;  // max_len entries
  int length = 0;        // real tokens including BOS
};

std::vector<std::string> split_words(const std::string& prompt);
Tokenized tokenize(const Vocab& vocab, const std::string& prompt, int max_len = 16);
std::string detokenize(const Vocab& vocab, const std::vector<int>& ids);

namespace templates {

// Subject prompt pool. Filling a slot always yields "<article> <noun>"
// adjacent in the prompt; patterns that already carry the article next to
// the slot have that word swapped for the requested one.
inline constexpr int kCount = 7;
inline constexpr int kExtractDefault = 2;
inline constexpr int kFixedMode = 3;

const std::string& pattern(int idx);  // template_id error on bad index

std::string subject_prompt(int idx, const std::string& article, const std::string& noun);

// Positions of the article and noun tokens in the BOS-prefixed tokenization
// of subject_prompt(idx, ...), valid for single-token articles and nouns.
struct Span {
  int article_pos = 0;
  int noun_pos = 0;
};
Span span(int idx);

}  // namespace templates

}  // namespace ltxb
