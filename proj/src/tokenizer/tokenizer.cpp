#include "mllmreid/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <map>

#include "mllmreid/error.hpp"

namespace mllmreid::text {
namespace {

constexpr std::array<std::string_view, kNumReserved> kReserved{
    "<pad>", "<bos>", "<eos>", "<unk>", "<img>", "###Human:", "###Assistant:", "<Img>", "</Img>"};

// Markers that survive tokenization verbatim, longest first.
constexpr std::array<std::string_view, 7> kMarkers{
    "###Assistant:", "<ImageFeature>", "###Human:", "</Img>", "<Img>", "<img>", "<eos>"};

bool is_word_char(unsigned char c) { return std::isalnum(c) || c == '\'' || c >= 0x80; }

}  // namespace

std::span<const std::string_view> reserved_tokens() { return kReserved; }

Vocabulary::Vocabulary() {
  for (std::string_view t : kReserved) {
    index_.emplace(std::string(t), tokens_.size());
    tokens_.emplace_back(t);
  }
}

Vocabulary::Vocabulary(std::span<const std::string> words) : Vocabulary() {
  for (const std::string& w : words) {
    if (w.empty() || w.find_first_of(" \t\r\n") != std::string::npos) {
      throw ValueError("vocabulary token '" + w + "' is empty or contains whitespace");
    }
    if (!index_.emplace(w, tokens_.size()).second) throw ValueError("duplicate vocabulary token '" + w + "'");
    tokens_.push_back(w);
  }
}

std::size_t Vocabulary::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

const std::string& Vocabulary::token(std::size_t id) const {
  if (id >= tokens_.size()) {
    throw ValueError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[id];
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write vocabulary to " + path.string());
  for (const std::string& t : tokens_) os << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read vocabulary " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(is, line);) lines.push_back(line);
  if (lines.size() < kNumReserved) throw FormatError("vocabulary file " + path.string() + " is missing reserved tokens");
  for (std::size_t i = 0; i < kNumReserved; ++i) {
    if (lines[i] != kReserved[i]) {
      throw FormatError("vocabulary file " + path.string() + ": line " + std::to_string(i) + " should be reserved token " +
                        std::string(kReserved[i]));
    }
  }
  return Vocabulary(std::span<const std::string>(lines).subspan(kNumReserved));
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    bool marker = false;
    for (std::string_view m : kMarkers) {
      if (text.substr(i, m.size()) == m) {
        out.emplace_back(m);
        i += m.size();
        marker = true;
        break;
      }
    }
    if (marker) continue;
    if (is_word_char(c)) {
      std::string w;
      while (i < text.size() && is_word_char(static_cast<unsigned char>(text[i]))) {
        w.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[i]))));
        ++i;
      }
      out.push_back(std::move(w));
    } else {
      out.emplace_back(1, static_cast<char>(c));
      ++i;
    }
  }
  return out;
}

std::string normalize(std::string_view text) {
  std::string out;
  for (const std::string& t : tokenize(text)) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t min_count) {
  if (corpus.empty()) throw ValueError("build_vocab: empty corpus");
  const Vocabulary reserved;
  std::map<std::string, std::size_t> counts;
  for (const std::string& doc : corpus) {
    for (std::string& t : tokenize(doc)) {
      if (reserved.contains(t) || t == kImageFeaturePlaceholder) continue;
      ++counts[std::move(t)];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts)
    if (n >= min_count) kept.emplace_back(tok, n);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  words.reserve(kept.size());
  for (auto& [tok, n] : kept) words.push_back(tok);
  return Vocabulary(words);
}

std::vector<std::size_t> encode(std::string_view text, const Vocabulary& vocab) {
  std::vector<std::size_t> ids;
  for (const std::string& t : tokenize(text)) ids.push_back(vocab.id(t));
  return ids;
}

std::string decode(std::span<const std::size_t> ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

TokenSequence format_dialogue(const DialogueSample& sample, const Vocabulary& vocab, std::size_t num_image_slots) {
  if (sample.turns.empty()) throw ValueError("format_dialogue: sample has no turns");
  std::size_t placeholders = 0;
  for (const DialogueTurn& t : sample.turns) {
    for (std::size_t pos = t.instruction.find(kImageFeaturePlaceholder); pos != std::string::npos;
         pos = t.instruction.find(kImageFeaturePlaceholder, pos + 1))
      ++placeholders;
  }
  if ((num_image_slots > 0) != (placeholders == 1) || placeholders > 1) {
    throw ValueError("format_dialogue: " + std::to_string(placeholders) + " image placeholder(s) but the encoder provides " +
                     std::to_string(num_image_slots) + " slot(s)");
  }

  TokenSequence seq;
  auto push = [&](std::size_t id, std::uint8_t mask) {
    seq.ids.push_back(id);
    seq.loss_mask.push_back(mask);
  };
  push(kBos, 0);
  for (const DialogueTurn& turn : sample.turns) {
    const std::vector<std::size_t> answer = encode(turn.answer, vocab);
    if (answer.empty()) throw ValueError("format_dialogue: empty continuation");
    push(kHuman, 0);
    const std::size_t ph = turn.instruction.find(kImageFeaturePlaceholder);
    const std::string_view instr(turn.instruction);
    for (std::size_t id : encode(instr.substr(0, ph), vocab)) push(id, 0);
    if (ph != std::string::npos) {
      for (std::size_t s = 0; s < num_image_slots; ++s) {
        seq.image_slots.push_back(seq.ids.size());
        push(kImg, 0);
      }
      for (std::size_t id : encode(instr.substr(ph + kImageFeaturePlaceholder.size()), vocab)) push(id, 0);
    }
    push(kAssistant, 0);
    for (std::size_t id : answer) push(id, 1);
    push(kEos, 1);
  }
  return seq;
}

}  // namespace mllmreid::text
