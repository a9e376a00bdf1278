#include <cmath>
#include <cstring>
#include <map>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "mllmreid/error.hpp"
#include "mllmreid/prompts.hpp"
#include "mllmreid/synthdata.hpp"

using namespace mllmreid;
using namespace mllmreid::synth;

namespace {

DataConfig small_config(std::uint64_t seed = 3) {
  DataConfig c;
  c.num_train_ids = 6;
  c.num_eval_ids = 4;
  c.imgs_per_id = 4;
  c.cams = 3;
  c.seed = seed;
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("default config statistics") {
  const Dataset ds = build_dataset(DataConfig{});
  const DatasetStats s = dataset_stats(ds);
  CHECK(s.id_t == 100);
  CHECK(s.id_q == 50);
  CHECK(s.id_g == 50);
  CHECK(s.img_t == 800);
  CHECK(s.cam_n == 4);
  CHECK(s.img_q + s.img_g == 400);
  CHECK(s.img_q >= s.id_q);
  CHECK(s.img_g >= s.id_g);
}

TEST_CASE("split protocol") {
  const Dataset ds = build_dataset(DataConfig{});
  std::set<std::size_t> train_ids, eval_ids;
  for (std::size_t i : ds.train) train_ids.insert(ds.images[i].identity);
  for (std::size_t i : ds.query) eval_ids.insert(ds.images[i].identity);
  for (std::size_t i : ds.gallery) eval_ids.insert(ds.images[i].identity);
  for (std::size_t id : eval_ids) CHECK(train_ids.count(id) == 0);

  // Each eval identity shows up in query and gallery, across at least two cameras.
  std::map<std::size_t, std::set<std::size_t>> q_cams, g_cams, all_cams;
  for (std::size_t i : ds.query) q_cams[ds.images[i].identity].insert(ds.images[i].camera);
  for (std::size_t i : ds.gallery) g_cams[ds.images[i].identity].insert(ds.images[i].camera);
  for (std::size_t id : eval_ids) {
    REQUIRE(q_cams.count(id));
    REQUIRE(g_cams.count(id));
    std::set<std::size_t> cams = q_cams[id];
    cams.insert(g_cams[id].begin(), g_cams[id].end());
    CHECK(cams.size() >= 2);
    // every query has a gallery match under another camera
    for (std::size_t qc : q_cams[id]) {
      bool other = false;
      for (std::size_t gc : g_cams[id]) other |= gc != qc;
      CHECK(other);
    }
  }
  for (const PersonImage& img : ds.images) {
    CHECK(img.camera < ds.num_cameras);
    CHECK(img.pixels.size() == kPixelCount);
  }
  std::set<Attributes> attrs;
  for (const IdentitySpec& s : ds.identities) attrs.insert(s.attributes);
  CHECK(attrs.size() == ds.identities.size());
}

TEST_CASE("rendering is deterministic and quantized") {
  const Dataset a = build_dataset(small_config());
  const Dataset b = build_dataset(small_config());
  REQUIRE(a.images.size() == b.images.size());
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    CHECK(std::memcmp(a.images[i].pixels.data(), b.images[i].pixels.data(), kPixelCount * sizeof(double)) == 0);
  }
  for (double v : a.images[0].pixels) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(std::abs(v * 255.0 - std::round(v * 255.0)) < 1e-9);
  }
  const Dataset c = build_dataset(small_config(4));
  CHECK(c.images[0].pixels != a.images[0].pixels);

  // One image depends only on (seed, style, id, camera, index).
  const IdentitySpec& id = a.identities[2];
  const PersonImage& ref = a.images[2 * 4 + 1];
  CHECK(render_person(id, ref.camera, ref.index, ref.split, small_config()).pixels == ref.pixels);
}

TEST_CASE("camera perturbations make views of one identity differ") {
  const Dataset ds = build_dataset(small_config());
  const auto& p0 = ds.images[0].pixels;
  const auto& p1 = ds.images[1].pixels;
  double diff = 0;
  for (std::size_t i = 0; i < kPixelCount; ++i) diff += std::abs(p0[i] - p1[i]);
  CHECK(diff / kPixelCount > 0.01);
}

TEST_CASE("domain style shifts the image distribution") {
  DataConfig a = small_config(), b = small_config();
  b.domain_style = 1;
  const Dataset da = build_dataset(a), db = build_dataset(b);
  // Same identities, different look.
  CHECK(da.captions == db.captions);
  double diff = 0;
  for (std::size_t i = 0; i < kPixelCount; ++i) diff += std::abs(da.images[0].pixels[i] - db.images[0].pixels[i]);
  CHECK(diff / kPixelCount > 0.05);
}

TEST_CASE("build_dataset errors") {
  DataConfig c = small_config();
  c.cams = 1;
  CHECK_THROWS_AS(build_dataset(c), ValueError);
  c = small_config();
  c.imgs_per_id = 1;
  CHECK_THROWS_AS(build_dataset(c), ValueError);
  c = small_config();
  c.num_train_ids = kAttributeSpace;
  CHECK_THROWS_AS(build_dataset(c), ValueError);
}

TEST_CASE("reference statistics table") {
  const DatasetStats& m = reference_stats("Market1501");
  CHECK(m == DatasetStats{750, 750, 751, 3368, 19732, 12936, 6});
  CHECK(reference_stats().size() == 4);
  CHECK(reference_stats("MSMT17").cam_n == 15);
  CHECK_THROWS_AS(reference_stats("VIPeR"), ValueError);
}

TEST_CASE("captions over the whole attribute space") {
  std::set<std::string> seen;
  for (std::size_t i = 0; i < kAttributeSpace; ++i) {
    const Attributes a = attributes_from_index(i);
    CHECK(attributes_index(a) == i);
    const std::string cap = gen_caption(a);
    const std::size_t n = word_count(cap);
    CHECK(n >= 8);
    CHECK(n <= 25);
    CHECK(gen_caption(a) == cap);
    const auto parsed = parse_caption(cap);
    REQUIRE(parsed.has_value());
    CHECK(*parsed == a);
    seen.insert(cap);
  }
  CHECK(seen.size() == kAttributeSpace);
  CHECK_FALSE(parse_caption("a person in a hat").has_value());
  CHECK_FALSE(parse_caption("a slim person wearing a teal shirt and red pants with red shoes").has_value());
}

TEST_CASE("continuations over the whole attribute space") {
  std::set<std::string> seen;
  for (std::size_t i = 0; i < kAttributeSpace; ++i) {
    const std::string cap = gen_caption(attributes_from_index(i));
    const std::string cont = gen_continuation(cap);
    CHECK(word_count(cont) < 20);
    CHECK(word_count(cont) > 0);
    CHECK(gen_continuation(cap) == cont);
    seen.insert(cont);
  }
  CHECK(seen.size() == kAttributeSpace);

  Attributes a;
  a.shirt = 2;
  a.pants = 3;
  Attributes b = a;
  b.pants = 4;
  CHECK(gen_continuation(gen_caption(a)) != gen_continuation(gen_caption(b)));
  CHECK_THROWS_AS(gen_continuation("an unrelated sentence"), ValueError);
}

TEST_CASE("continuation oracle prefers external text") {
  const std::string cap = gen_caption(Attributes{});
  const ContinuationOracle oracle({{cap, "an external continuation"}});
  CHECK(oracle(cap) == "an external continuation");
  CHECK(oracle(gen_caption(attributes_from_index(5))) == gen_continuation(gen_caption(attributes_from_index(5))));
  CHECK_THROWS_AS(oracle("not a caption"), ValueError);

  const auto path = std::filesystem::temp_directory_path() / "mllmreid_conts.json";
  {
    std::ofstream os(path);
    os << "{\"odd caption\": \"odd continuation\"}";
  }
  CHECK(ContinuationOracle::from_file(path)("odd caption") == "odd continuation");
  {
    std::ofstream os(path);
    os << "[1, 2]";
  }
  CHECK_THROWS_AS(ContinuationOracle::from_file(path), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("build_dialogue") {
  const std::string cap = gen_caption(Attributes{});
  const std::string cont = gen_continuation(cap);
  std::mt19937_64 rng(1);
  SUBCASE("common instruction") {
    const auto s = build_dialogue(3, cap, cont, DialogueMode::common_instruction, rng);
    REQUIRE(s.turns.size() == 1);
    CHECK(s.image_index == 3);
    CHECK(s.turns[0].instruction.find("continue the following image") != std::string::npos);
    CHECK(s.turns[0].instruction.find(text::kImageFeaturePlaceholder) != std::string::npos);
    CHECK(s.turns[0].answer == cont);
  }
  SUBCASE("baseline prompt") {
    std::size_t used = 99;
    const auto s = build_dialogue(0, cap, cont, DialogueMode::baseline_prompt, rng, 1, &used);
    CHECK(text::kBaselinePrompts.size() == 20);
    REQUIRE(used < 20);
    CHECK(s.turns[0].instruction.find(text::kBaselinePrompts[used]) != std::string::npos);
    CHECK(s.turns[0].instruction.find(text::kImageFeaturePlaceholder) != std::string::npos);
    CHECK(s.turns[0].answer == cap);
  }
  SUBCASE("extra turns continue the caption") {
    const auto s = build_dialogue(0, cap, cont, DialogueMode::common_instruction, rng, 2);
    REQUIRE(s.turns.size() == 2);
    CHECK(s.turns[1].instruction.find(cap) != std::string::npos);
    CHECK(s.turns[1].answer == cont);
  }
  CHECK_THROWS_AS(build_dialogue(0, cap, "", DialogueMode::common_instruction, rng), ValueError);
  CHECK_THROWS_AS(parse_dialogue_mode("fancy"), ValueError);
  CHECK(parse_dialogue_mode("baseline_prompt") == DialogueMode::baseline_prompt);
}

TEST_CASE("baseline prompts are drawn uniformly") {
  const std::string cap = gen_caption(Attributes{});
  const std::string cont = gen_continuation(cap);
  std::mt19937_64 rng(2024);
  constexpr std::size_t draws = 10000, k = 20;
  std::vector<std::size_t> counts(k);
  for (std::size_t i = 0; i < draws; ++i) {
    std::size_t used = 0;
    build_dialogue(0, cap, cont, DialogueMode::baseline_prompt, rng, 1, &used);
    ++counts[used];
  }
  const double p = 1.0 / k, expected = draws * p, sigma = std::sqrt(draws * p * (1 - p));
  for (std::size_t c : counts) CHECK(std::abs(static_cast<double>(c) - expected) <= 3 * sigma);
}

TEST_CASE("save, load and manifest statistics") {
  const Dataset ds = build_dataset(small_config());
  const auto dir = temp_dir("mllmreid_synth_test");
  save_dataset(ds, dir);
  const Dataset back = load_dataset(dir);
  REQUIRE(back.images.size() == ds.images.size());
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    CHECK(back.images[i].pixels == ds.images[i].pixels);
    CHECK(back.images[i].identity == ds.images[i].identity);
    CHECK(back.images[i].split == ds.images[i].split);
  }
  CHECK(back.captions == ds.captions);
  CHECK(back.continuations == ds.continuations);
  CHECK(dataset_stats(dir / "manifest.json") == dataset_stats(ds));
  CHECK(std::filesystem::exists(dir / "train" / "0_0_0.ppm"));

  {
    std::ofstream os(dir / "manifest.json");
    os << "{\"format_version\": 1, \"images\": ";
  }
  CHECK_THROWS_AS(dataset_stats(dir / "manifest.json"), FormatError);
  CHECK_THROWS_AS(load_dataset(dir), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("empty gallery split") {
  Dataset ds = build_dataset(small_config());
  std::vector<PersonImage> kept;
  for (const PersonImage& img : ds.images)
    if (img.split != Split::gallery) kept.push_back(img);
  ds.images = kept;
  ds.gallery.clear();
  const DatasetStats s = dataset_stats(ds);
  CHECK(s.img_g == 0);
  CHECK(s.id_g == 0);
}

TEST_CASE("statistics are additive under concatenation") {
  DataConfig cb = small_config(9);
  cb.domain_style = 1;
  cb.cams = 2;
  const Dataset a = build_dataset(small_config()), b = build_dataset(cb);
  const Dataset ab = concatenate(a, b);
  CHECK(dataset_stats(ab) == dataset_stats(a) + dataset_stats(b));
  CHECK(ab.train_identity_ids().size() == a.train_identity_ids().size() + b.train_identity_ids().size());
}

TEST_CASE("text corpus covers every dialogue string") {
  const Dataset ds = build_dataset(small_config());
  const auto corpus = text_corpus(ds);
  CHECK(corpus.size() == 2 * ds.identities.size() + 20 + 2);
}
