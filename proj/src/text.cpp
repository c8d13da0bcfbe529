#include "ltxb/text.hpp"

#include <algorithm>
#include <array>
#include <cctype>

namespace ltxb {

Vocab::Vocab(std::vector<std::string> words, int base_size)
    : words_(std::move(words)), base_size_(base_size) {
  require(base_size_ >= 2 && base_size_ <= (int)words_.size(), ErrorKind::config,
          "vocab identifier block out of range");
}

Vocab Vocab::standard() {
  std::vector<std::string> words = {
      "<pad>", "<bos>", ".",      ",",      "a",      "the",    "photo",    "of",
      "fancy", "detailed", "beside", "red",  "green",  "blue",   "yellow",
      "striped", "dotted", "solid", "circle", "square", "triangle", "cross",
  };
  int base = (int)words.size();
  for (int i = 1; i <= 8; ++i) words.push_back("v" + std::to_string(i) + "*");
  return Vocab(std::move(words), base);
}

int Vocab::id(const std::string& word) const {
  for (int i = 0; i < (int)words_.size(); ++i)
    if (words_[i] == word) return i;
  fail(ErrorKind::vocabulary, "unknown word '" + word + "'");
}

const std::string& Vocab::word(int id) const {
  require(id >= 0 && id < (int)words_.size(), ErrorKind::range,
          "token id " + std::to_string(id) + " outside vocabulary of " +
              std::to_string(words_.size()));
  return words_[id];
}

bool Vocab::has(const std::string& word) const {
  return std::find(words_.begin(), words_.end(), word) != words_.end();
}

std::vector<int> Vocab::identifier_ids() const {
  std::vector<int> out;
  for (int i = base_size_; i < (int)words_.size(); ++i) out.push_back(i);
  return out;
}

std::vector<std::string> split_words(const std::string& prompt) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (char raw : prompt) {
    char c = (char)std::tolower((unsigned char)raw);
    if (std::isspace((unsigned char)c)) {
      flush();
    } else if (c == '.' || c == ',') {
      flush();
      out.emplace_back(1, c);
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

Tokenized tokenize(const Vocab& vocab, const std::string& prompt, int max_len) {
  std::vector<std::string> words = split_words(prompt);
  require((int)words.size() + 1 <= max_len, ErrorKind::length,
          "prompt '" + prompt + "' needs " + std::to_string(words.size() + 1) +
              " tokens, limit is " + std::to_string(max_len));
  Tokenized t;
  t.ids.reserve(max_len);
  t.ids.push_back(vocab.bos_id());
  for (const auto& w : words) t.ids.push_back(vocab.id(w));
  t.length = (int)t.ids.size();
  t.ids.resize(max_len, vocab.pad_id());
  return t;
}

std::string detokenize(const Vocab& vocab, const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (id == vocab.pad_id() || id == vocab.bos_id()) continue;
    const std::string& w = vocab.word(id);
    bool punct = (w == "." || w == ",");
    if (!out.empty() && !punct) out.push_back(' ');
    out += w;
  }
  return out;
}

namespace templates {

namespace {

const std::array<std::string, kCount> kPatterns = {
    "{}.",
    "A {}.",
    "Photo of {}.",
    "A photo of {}.",
    "A photo of a {}.",
    "a fancy photo of a {}.",
    "A fancy, detailed photo of {}.",
};

void check_idx(int idx) {
  require(idx >= 0 && idx < kCount, ErrorKind::template_id,
          "template index " + std::to_string(idx) + " outside pool of " +
              std::to_string(kCount));
}

}  // namespace

const std::string& pattern(int idx) {
  check_idx(idx);
  return kPatterns[idx];
}

std::string subject_prompt(int idx, const std::string& article, const std::string& noun) {
  check_idx(idx);
  const std::string& p = kPatterns[idx];
  size_t slot = p.find("{}");
  std::string before = p.substr(0, slot);
  std::string after = p.substr(slot + 2);

  // "A {}." and "... of a {}." carry the article themselves; swap it out so
  // the emitted prompt reads "<article> <noun>" either way.
  bool own_article = false;
  if (before == "A " || (before.size() >= 2 && before.compare(before.size() - 2, 2, "a ") == 0))
    own_article = true;
  if (own_article) {
    size_t cut = before.size() - 2;
    if (before == "A ") cut = 0;
    return before.substr(0, cut) + article + " " + noun + after;
  }
  return before + article + " " + noun + after;
}

Span span(int idx) {
  check_idx(idx);
  std::vector<std::string> words = split_words(subject_prompt(idx, "a", "circle"));
  for (int i = 0; i + 1 < (int)words.size(); ++i)
    if (words[i] == "a" && words[i + 1] == "circle") {
      int last_a = i;
      for (int j = i; j + 1 < (int)words.size(); ++j)
        if (words[j] == "a" && words[j + 1] == "circle") last_a = j;
      return {last_a + 1, last_a + 2};  // +1 for BOS
    }
  fail(ErrorKind::template_id, "template " + std::to_string(idx) + " has no subject slot");
}

}  // namespace templates

}  // namespace ltxb
