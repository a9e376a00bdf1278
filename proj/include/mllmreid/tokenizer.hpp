#pragma once
// Word-level vocabulary, encode/decode and dialogue formatting with image
// slots and a continuation-only loss mask.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mllmreid::text {

// Reserved ids. Every vocabulary starts with these, in this order.
inline constexpr std::size_t kPad = 0;
inline constexpr std::size_t kBos = 1;
inline constexpr std::size_t kEos = 2;
inline constexpr std::size_t kUnk = 3;
inline constexpr std::size_t kImg = 4;
inline constexpr std::size_t kHuman = 5;
inline constexpr std::size_t kAssistant = 6;
inline constexpr std::size_t kImgOpen = 7;
inline constexpr std::size_t kImgClose = 8;
inline constexpr std::size_t kNumReserved = 9;

inline constexpr std::string_view kImageFeaturePlaceholder = "<ImageFeature>";

std::span<const std::string_view> reserved_tokens();

class Vocabulary {
 public:
  /// Reserved tokens only.
  Vocabulary();
  /// Reserved tokens followed by `words` in the given order. Throws on
  /// duplicates or on words that collide with reserved tokens.
  explicit Vocabulary(std::span<const std::string> words);

  std::size_t size() const { return tokens_.size(); }
  /// kUnk for unknown tokens.
  std::size_t id(std::string_view token) const;
  bool contains(std::string_view token) const;
  /// Throws ValueError for ids >= size().
  const std::string& token(std::size_t id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// UTF-8 text, one token per line; line number (0-based) is the id.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Lowercased words, single-character punctuation tokens, and the role and
/// image markers kept verbatim.
std::vector<std::string> tokenize(std::string_view text);
/// Space-joined tokens.
std::string normalize(std::string_view text);

/// Tokens with count >= min_count, ordered by frequency (desc) then
/// lexicographically. Throws ValueError on an empty corpus.
Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t min_count = 1);

std::vector<std::size_t> encode(std::string_view text, const Vocabulary& vocab);
std::string decode(std::span<const std::size_t> ids, const Vocabulary& vocab);

struct DialogueTurn {
  std::string instruction;  // may contain <ImageFeature>
  std::string answer;       // the supervised continuation
};

/// One image plus its instruction/answer turns.
struct DialogueSample {
  std::size_t image_index = 0;
  std::vector<DialogueTurn> turns;
};

struct TokenSequence {
  std::vector<std::size_t> ids;
  std::vector<std::uint8_t> loss_mask;  // 1 on answer tokens and their <eos>
  std::vector<std::size_t> image_slots;

  std::size_t size() const { return ids.size(); }
};

/// <bos>, then per turn: ###Human: + instruction (placeholder expanded into
/// `num_image_slots` <img> tokens) + ###Assistant: + answer + <eos>.
/// Throws ValueError when a turn has an empty answer, when there are no
/// turns, or when placeholders and num_image_slots disagree (exactly one
/// placeholder is required iff num_image_slots > 0).
TokenSequence format_dialogue(const DialogueSample& sample, const Vocabulary& vocab, std::size_t num_image_slots);

}  // namespace mllmreid::text
