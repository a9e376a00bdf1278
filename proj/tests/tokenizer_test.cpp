#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "mllmreid/error.hpp"
#include "mllmreid/ops.hpp"
#include "mllmreid/prompts.hpp"
#include "mllmreid/tokenizer.hpp"
#include "test_util.hpp"

using namespace mllmreid;
using namespace mllmreid::text;

namespace {

DialogueSample image_sample(std::string answer) {
  return {0, {{image_continuation_instruction(), std::move(answer)}}};
}

}  // namespace

TEST_CASE("reserved tokens have fixed ids") {
  const Vocabulary v;
  CHECK(v.size() == kNumReserved);
  CHECK(v.token(kPad) == "<pad>");
  CHECK(v.token(kBos) == "<bos>");
  CHECK(v.token(kEos) == "<eos>");
  CHECK(v.token(kUnk) == "<unk>");
  CHECK(v.token(kImg) == "<img>");
  CHECK(v.token(kHuman) == "###Human:");
  CHECK(v.token(kAssistant) == "###Assistant:");
  CHECK(v.token(kImgOpen) == "<Img>");
  CHECK(v.token(kImgClose) == "</Img>");
}

TEST_CASE("build_vocab") {
  const std::vector<std::string> corpus{"a b", "a c"};
  SUBCASE("min_count 1 keeps every word") {
    const Vocabulary v = build_vocab(corpus, 1);
    CHECK(v.size() == kNumReserved + 3);
    CHECK(v.contains("a"));
    CHECK(v.contains("b"));
    CHECK(v.contains("c"));
    // frequency first, then lexicographic
    CHECK(v.id("a") == kNumReserved);
    CHECK(v.id("b") == kNumReserved + 1);
    CHECK(v.id("c") == kNumReserved + 2);
  }
  SUBCASE("min_count 2 keeps only a") {
    const Vocabulary v = build_vocab(corpus, 2);
    CHECK(v.size() == kNumReserved + 1);
    CHECK(v.contains("a"));
    CHECK_FALSE(v.contains("b"));
  }
  SUBCASE("deterministic") { CHECK(build_vocab(corpus, 1) == build_vocab(corpus, 1)); }
  SUBCASE("lowercases and splits punctuation") {
    const std::vector<std::string> c{"Hello, World."};
    const Vocabulary v = build_vocab(c, 1);
    CHECK(v.contains("hello"));
    CHECK(v.contains(","));
    CHECK(v.contains("."));
    CHECK_FALSE(v.contains("Hello"));
  }
  SUBCASE("markers are not added twice") {
    const std::vector<std::string> c{"###Human: <Img> <ImageFeature> </Img> hi ###Assistant:"};
    CHECK(build_vocab(c, 1).size() == kNumReserved + 1);
  }
  CHECK_THROWS_AS(build_vocab(std::vector<std::string>{}, 1), ValueError);
}

TEST_CASE("encode and decode") {
  const std::vector<std::string> corpus{"a b", "a c"};
  const Vocabulary v = build_vocab(corpus, 1);
  CHECK(encode("a b", v) == std::vector<std::size_t>{v.id("a"), v.id("b")});
  CHECK(encode("a zebra", v) == std::vector<std::size_t>{v.id("a"), kUnk});

  const std::string caption = "A slim person wearing a red shirt, and blue pants.";
  const std::vector<std::string> c2{caption};
  const Vocabulary v2 = build_vocab(c2, 1);
  CHECK(decode(encode(caption, v2), v2) == normalize(caption));
  CHECK(normalize(caption) == "a slim person wearing a red shirt , and blue pants .");

  const std::vector<std::size_t> bad{v2.size()};
  CHECK_THROWS_AS(decode(bad, v2), ValueError);
}

TEST_CASE("vocabulary save/load round trip") {
  const std::vector<std::string> corpus{"the quick brown fox", "the lazy dog"};
  const Vocabulary v = build_vocab(corpus, 1);
  const auto path = std::filesystem::temp_directory_path() / "mllmreid_vocab_test.txt";
  v.save(path);
  CHECK(Vocabulary::load(path) == v);
  std::filesystem::remove(path);
}

TEST_CASE("format_dialogue single turn") {
  const std::string answer = "sturdy walker strides on in red top";
  const std::vector<std::string> corpus{image_continuation_instruction(), answer};
  const Vocabulary v = build_vocab(corpus, 1);
  const TokenSequence seq = format_dialogue(image_sample(answer), v, 32);

  REQUIRE(seq.loss_mask.size() == seq.ids.size());
  CHECK(seq.ids.front() == kBos);
  CHECK(seq.ids.back() == kEos);
  std::size_t masked = 0;
  for (auto m : seq.loss_mask) masked += m;
  CHECK(masked == encode(answer, v).size() + 1);

  REQUIRE(seq.image_slots.size() == 32);
  for (std::size_t p : seq.image_slots) {
    CHECK(seq.ids[p] == kImg);
    CHECK(seq.loss_mask[p] == 0);
  }
  CHECK(seq.ids[seq.image_slots.front() - 1] == kImgOpen);
  CHECK(seq.ids[seq.image_slots.back() + 1] == kImgClose);
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (seq.ids[i] == kHuman || seq.ids[i] == kAssistant || seq.ids[i] == kBos) CHECK(seq.loss_mask[i] == 0);
  }
  CHECK(format_dialogue(image_sample(answer), v, 32).ids == seq.ids);
}

TEST_CASE("format_dialogue two turns") {
  const std::string caption = "a slim person wearing a red shirt";
  const std::string answer = "slender walker strides on in red top";
  DialogueSample s = image_sample(answer);
  s.turns.push_back({std::string(kTextContinuationInstruction) + " " + caption, answer});
  const std::vector<std::string> corpus{image_continuation_instruction(), answer, caption,
                                        std::string(kTextContinuationInstruction)};
  const Vocabulary v = build_vocab(corpus, 1);
  const TokenSequence seq = format_dialogue(s, v, 4);

  // Count maximal masked runs; each must end with <eos> and follow ###Assistant:.
  std::size_t spans = 0;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (seq.loss_mask[i] == 1 && (i == 0 || seq.loss_mask[i - 1] == 0)) {
      ++spans;
      CHECK(seq.ids[i - 1] == kAssistant);
    }
    if (seq.loss_mask[i] == 1 && (i + 1 == seq.ids.size() || seq.loss_mask[i + 1] == 0)) CHECK(seq.ids[i] == kEos);
  }
  CHECK(spans == 2);
  std::size_t masked = 0;
  for (auto m : seq.loss_mask) masked += m;
  CHECK(masked == 2 * (encode(answer, v).size() + 1));
}

TEST_CASE("format_dialogue errors") {
  const Vocabulary v;
  CHECK_THROWS_AS(format_dialogue(image_sample(""), v, 4), ValueError);
  CHECK_THROWS_AS(format_dialogue(DialogueSample{}, v, 4), ValueError);
  CHECK_THROWS_AS(format_dialogue(image_sample("x"), v, 0), ValueError);
  DialogueSample no_image{0, {{"describe", "x"}}};
  CHECK_THROWS_AS(format_dialogue(no_image, v, 4), ValueError);
  CHECK_NOTHROW(format_dialogue(no_image, v, 0));
}

TEST_CASE("masked cross-entropy ignores instruction-position logits") {
  const std::string answer = "broad walker marches in blue top";
  const std::vector<std::string> corpus{image_continuation_instruction(), answer};
  const Vocabulary v = build_vocab(corpus, 1);
  const TokenSequence seq = format_dialogue(image_sample(answer), v, 8);
  const std::size_t n = seq.ids.size() - 1, V = v.size();

  std::vector<std::size_t> targets(n);
  std::vector<double> weights(n);
  for (std::size_t i = 0; i < n; ++i) {
    targets[i] = seq.ids[i + 1];
    weights[i] = seq.loss_mask[i + 1];
  }
  auto loss_with_fill = [&](std::uint64_t seed) {
    std::vector<double> logits = testutil::randn(n * V, 7);
    const std::vector<double> fill = testutil::randn(n * V, seed, 5.0);
    for (std::size_t i = 0; i < n; ++i)
      if (weights[i] == 0.0)
        for (std::size_t k = 0; k < V; ++k) logits[i * V + k] = fill[i * V + k];
    return ad::softmax_cross_entropy(ad::Tensor::constant({n, V}, logits), targets, weights).item();
  };
  const double a = loss_with_fill(100), b = loss_with_fill(200);
  CHECK(std::abs(a - b) <= 1e-12);

  // Oracle: mean of -log softmax over masked rows, computed directly.
  std::vector<double> logits = testutil::randn(n * V, 7);
  double total = 0, count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == 0.0) continue;
    double mx = -1e300;
    for (std::size_t k = 0; k < V; ++k) mx = std::max(mx, logits[i * V + k]);
    double z = 0;
    for (std::size_t k = 0; k < V; ++k) z += std::exp(logits[i * V + k] - mx);
    total += -(logits[i * V + targets[i]] - mx - std::log(z));
    count += 1;
  }
  CHECK(a == doctest::Approx(total / count).epsilon(1e-12));
}
