#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "doctest.h"
#include "mllmreid/error.hpp"
#include "mllmreid/gradcheck.hpp"
#include "mllmreid/losses.hpp"
#include "mllmreid/models.hpp"
#include "mllmreid/ops.hpp"
#include "test_util.hpp"

using namespace mllmreid;
using namespace mllmreid::model;

namespace {

std::vector<double> random_image(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> img(64 * 32 * 3);
  for (double& v : img) v = u(rng);
  return img;
}

CausalLMConfig small_lm() {
  CausalLMConfig c;
  c.vocab = 40;
  c.dim = 16;
  c.layers = 2;
  c.heads = 2;
  c.max_len = 48;
  return c;
}

text::TokenSequence make_seq(std::size_t len, std::size_t slots_at, std::size_t slots, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> tok(text::kNumReserved, 39);
  text::TokenSequence s;
  for (std::size_t i = 0; i < len; ++i) {
    const bool slot = i >= slots_at && i < slots_at + slots;
    s.ids.push_back(slot ? text::kImg : tok(rng));
    s.loss_mask.push_back(i > slots_at + slots ? 1 : 0);
    if (slot) s.image_slots.push_back(i);
  }
  return s;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("visual encoder shapes, tap points and determinism") {
  VisualEncoderConfig cfg;
  CHECK(cfg.num_patches() == 32);
  const VisualEncoder post = VisualEncoder::init(cfg, 1);
  const auto img = random_image(5);
  const Tensor f = encode_image(post, img);
  CHECK(f.shape() == ad::Shape{32, 64});
  CHECK(encode_image(post, img).data()[7] == f.data()[7]);
  const Tensor f2 = encode_image(post, img);
  CHECK(std::equal(f.data().begin(), f.data().end(), f2.data().begin()));

  cfg.tap = TapPoint::pre_last_layer;
  const VisualEncoder pre = VisualEncoder::init(cfg, 1);
  CHECK(max_abs_diff(encode_image(pre, img).data(), f.data()) > 0.0);
  CHECK(pre.active_parameters().size() + pre.blocks.back().parameters().size() == pre.parameters().size());
  CHECK(post.active_parameters().size() == post.parameters().size());

  // batch rows match per-image runs
  const std::vector<std::vector<double>> batch{img, random_image(6)};
  const Tensor fb = encode_images(post, batch);
  CHECK(fb.shape() == ad::Shape{64, 64});
  CHECK(max_abs_diff(fb.data().subspan(0, 32 * 64), f.data()) < 1e-12);

  CHECK_THROWS_AS(encode_image(post, std::vector<double>(10)), ShapeError);
  VisualEncoderConfig bad;
  bad.patch = 7;
  CHECK_THROWS_AS(bad.validate(), ValueError);
  bad = VisualEncoderConfig{};
  bad.heads = 5;
  CHECK_THROWS_AS(VisualEncoder::init(bad, 0), ValueError);
}

TEST_CASE("projection") {
  Projection p = Projection::init(4, 3, 0);
  const Tensor x = Tensor::constant({2, 4}, testutil::randn(8, 1));
  SUBCASE("zero weights give the bias") {
    std::fill(p.linear.w.mutable_data().begin(), p.linear.w.mutable_data().end(), 0.0);
    const std::vector<double> b{0.5, -1.0, 2.0};
    std::copy(b.begin(), b.end(), p.linear.b.mutable_data().begin());
    const Tensor y = project(x, p);
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < 3; ++c) CHECK(y.at(r, c) == b[c]);
  }
  SUBCASE("identity weights") {
    Projection sq = Projection::init(4, 4, 0);
    auto w = sq.linear.w.mutable_data();
    for (std::size_t i = 0; i < 16; ++i) w[i] = (i % 5 == 0) ? 1.0 : 0.0;
    const Tensor y = project(x, sq);
    for (std::size_t i = 0; i < 8; ++i) CHECK(y.at(i) == x.at(i));
  }
  SUBCASE("gradient matches finite differences") {
    std::vector<Tensor> in{p.linear.w, p.linear.b};
    const Tensor wts = Tensor::constant({2, 3}, testutil::randn(6, 9));
    CHECK(ad::grad_check([&] { return ad::sum(ad::mul(project(x, p), wts)); }, in, 1e-5) <= 1e-6);
  }
  CHECK_THROWS_AS(project(Tensor::constant({2, 5}, std::vector<double>(10)), p), ShapeError);
}

TEST_CASE("causal LM shapes and causality") {
  const CausalLM lm = CausalLM::init(small_lm(), 3);
  const text::TokenSequence seq = make_seq(20, 3, 4, 1);
  const Tensor embeds = Tensor::constant({4, 16}, testutil::randn(64, 2));
  const LMOutput out = lm_forward(lm, std::span(&seq, 1), embeds);
  CHECK(out.logits.shape() == ad::Shape{20, 40});
  CHECK(out.hidden.shape() == ad::Shape{20, 16});
  CHECK(out.slot_rows == std::vector<std::vector<std::size_t>>{{3, 4, 5, 6}});

  for (std::size_t j : {1u, 9u, 15u}) {
    text::TokenSequence changed = seq;
    changed.ids[j] = changed.ids[j] == 20 ? 21 : 20;
    const LMOutput o2 = lm_forward(lm, std::span(&changed, 1), embeds);
    for (std::size_t i = 0; i < 20; ++i) {
      const double d = max_abs_diff(out.logits.data().subspan(i * 40, 40), o2.logits.data().subspan(i * 40, 40));
      if (i < j) {
        CHECK(d == 0.0);
      } else if (i == j) {
        CHECK(d > 0.0);
      }
    }
  }
  // perturbing an image embedding only affects later positions
  std::vector<double> e2(embeds.data().begin(), embeds.data().end());
  e2[2 * 16] += 1.0;  // slot at position 5
  const LMOutput o3 = lm_forward(lm, std::span(&seq, 1), Tensor::constant({4, 16}, e2));
  CHECK(max_abs_diff(out.logits.data().subspan(0, 5 * 40), o3.logits.data().subspan(0, 5 * 40)) == 0.0);
  CHECK(max_abs_diff(out.logits.data().subspan(5 * 40, 40), o3.logits.data().subspan(5 * 40, 40)) > 0.0);
}

TEST_CASE("causal LM batching, text-only input and errors") {
  const CausalLM lm = CausalLM::init(small_lm(), 3);
  const std::vector<text::TokenSequence> seqs{make_seq(12, 2, 3, 1), make_seq(17, 4, 3, 2)};
  const Tensor embeds = Tensor::constant({6, 16}, testutil::randn(96, 2));
  const LMOutput both = lm_forward(lm, seqs, embeds);
  CHECK(both.seq_len == 17);
  CHECK(both.logits.shape() == ad::Shape{34, 40});
  const LMOutput first = lm_forward(lm, std::span(&seqs[0], 1), ad::slice_rows(embeds, 0, 3));
  CHECK(max_abs_diff(both.logits.data().subspan(0, 12 * 40), first.logits.data()) < 1e-12);
  const LMOutput second = lm_forward(lm, std::span(&seqs[1], 1), ad::slice_rows(embeds, 3, 3));
  CHECK(max_abs_diff(both.logits.data().subspan(17 * 40, 17 * 40), second.logits.data()) < 1e-12);

  const text::TokenSequence plain = make_seq(10, 100, 0, 4);
  const LMOutput p = lm_forward(lm, std::span(&plain, 1), Tensor());
  CHECK(p.logits.shape() == ad::Shape{10, 40});

  CHECK_THROWS_AS(lm_forward(lm, std::span(&seqs[0], 1), Tensor()), ShapeError);
  CHECK_THROWS_AS(lm_forward(lm, std::span(&plain, 1), embeds), ShapeError);
  const text::TokenSequence too_long = make_seq(49, 100, 0, 4);
  CHECK_THROWS_AS(lm_forward(lm, std::span(&too_long, 1), Tensor()), ValueError);
  text::TokenSequence bad_id = plain;
  bad_id.ids[2] = 40;
  CHECK_THROWS_AS(lm_forward(lm, std::span(&bad_id, 1), Tensor()), ValueError);
}

TEST_CASE("pooling image latents") {
  const std::vector<double> v{1.0, -2.0, 3.0};
  std::vector<double> h;
  for (int r = 0; r < 4; ++r) h.insert(h.end(), v.begin(), v.end());
  const Tensor hidden = Tensor::constant({4, 3}, h);
  const Tensor pooled = pool_image_latents(hidden, {{0, 1, 3}});
  CHECK(pooled.shape() == ad::Shape{1, 3});
  for (std::size_t c = 0; c < 3; ++c) CHECK(pooled.at(c) == doctest::Approx(v[c]).epsilon(1e-15));

  const Tensor sym = Tensor::constant({2, 3}, {1.0, -2.0, 3.0, -1.0, 2.0, -3.0});
  const Tensor z = pool_image_latents(sym, {{0, 1}});
  for (std::size_t c = 0; c < 3; ++c) CHECK(z.at(c) == 0.0);

  const Tensor last = pool_image_latents(sym, {{0, 1}}, Pooling::last_slot);
  CHECK(last.at(0) == -1.0);
  CHECK_THROWS_AS(pool_image_latents(sym, {{}}), ValueError);
  CHECK(parse_pooling("last_slot") == Pooling::last_slot);
  CHECK_THROWS_AS(parse_pooling("max"), ValueError);
}

TEST_CASE("gradients reach the projection and the visual encoder") {
  VisualEncoderConfig vc;
  vc.dim = 16;
  vc.heads = 2;
  const VisualEncoder enc = VisualEncoder::init(vc, 1);
  const Projection proj = Projection::init(16, 16, 2);
  const CausalLM lm = CausalLM::init(small_lm(), 3);
  const std::vector<std::vector<double>> imgs{random_image(1), random_image(2), random_image(3), random_image(4)};
  std::vector<text::TokenSequence> seqs;
  for (int i = 0; i < 4; ++i) seqs.push_back(make_seq(40, 1, 32, static_cast<std::uint64_t>(i)));
  const Tensor embeds = project(encode_images(enc, imgs), proj);
  const LMOutput out = lm_forward(lm, seqs, embeds);
  const Tensor pooled = pool_image_latents(out.hidden, out.slot_rows);
  const std::vector<std::size_t> labels{0, 0, 1, 1};
  const Tensor total = loss::overall_loss(loss::lm_nll(out.logits, seqs, out.seq_len), ad::Tensor::scalar(0.0),
                                          loss::triplet_loss(pooled, labels, {10.0}), 0.3);
  ad::backward(total);
  auto nonzero = [](const Tensor& t) {
    for (double g : t.grad())
      if (g != 0.0) return true;
    return false;
  };
  CHECK(nonzero(proj.linear.w));
  CHECK(nonzero(enc.patch_embed.w));
  CHECK(nonzero(lm.tok_embed));
}

TEST_CASE("reid embedding") {
  const VisualEncoder enc = VisualEncoder::init(VisualEncoderConfig{}, 4);
  const auto img = random_image(8);
  const std::vector<std::vector<double>> batch{img, img};
  const Tensor e = reid_embed(enc, batch);
  CHECK(e.shape() == ad::Shape{2, 64});
  for (std::size_t c = 0; c < 64; ++c) CHECK(e.at(0, c) == e.at(1, c));
  const Tensor f = encode_image(enc, img);
  double m0 = 0;
  for (std::size_t r = 0; r < 32; ++r) m0 += f.at(r, 0);
  CHECK(e.at(0, 0) == doctest::Approx(m0 / 32).epsilon(1e-12));
}

TEST_CASE("greedy decode stops within budget") {
  const CausalLM lm = CausalLM::init(small_lm(), 3);
  const text::TokenSequence prompt = make_seq(6, 100, 0, 1);
  const auto ids = greedy_decode(lm, prompt, Tensor(), 5);
  CHECK(ids.size() <= 5);
  CHECK(!ids.empty());
}

TEST_CASE("checkpoint round trip and errors") {
  const auto dir = std::filesystem::temp_directory_path() / "mllmreid_ckpt_test";
  std::filesystem::remove_all(dir);
  ModelSet m;
  m.stage = "stage1";
  VisualEncoderConfig vc;
  vc.dim = 16;
  vc.heads = 2;
  vc.tap = TapPoint::pre_last_layer;
  m.encoder = VisualEncoder::init(vc, 1);
  m.projection = Projection::init(16, 16, 2);
  m.lm = CausalLM::init(small_lm(), 3);
  const std::vector<std::string> words{"red", "shirt"};
  m.vocab = text::Vocabulary(words);
  m.id_head = IdHead::init(16, 7, 5, "id_head");
  m.meta["recipe"] = "full";

  save_checkpoint(m, dir / "a.ckpt");
  const ModelSet back = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(back, dir / "b.ckpt");
  CHECK(file_bytes(dir / "a.ckpt") == file_bytes(dir / "b.ckpt"));
  CHECK(back.stage == "stage1");
  CHECK(back.encoder.config.tap == TapPoint::pre_last_layer);
  CHECK(back.meta.at("recipe") == "full");
  REQUIRE(back.vocab.has_value());
  CHECK(*back.vocab == *m.vocab);
  CHECK(back.id_head->classes() == 7);
  const auto pa = m.parameters(), pb = back.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name() == pb[i].name());
    CHECK(std::equal(pa[i].data().begin(), pa[i].data().end(), pb[i].data().begin()));
  }
  CHECK(read_checkpoint(dir / "a.ckpt").version == kCheckpointVersion);

  const std::string bytes = file_bytes(dir / "a.ckpt");
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream os(dir / name, std::ios::binary);
    os << content;
    return dir / name;
  };
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_WITH_AS(load_checkpoint(write("m.ckpt", bad_magic)), doctest::Contains("bad magic"), FormatError);
  std::string bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_WITH_AS(load_checkpoint(write("v.ckpt", bad_version)), doctest::Contains("version 9"), FormatError);
  CHECK_THROWS_WITH_AS(load_checkpoint(write("t.ckpt", bytes.substr(0, bytes.size() / 2))),
                       doctest::Contains("truncated"), FormatError);
  CHECK_THROWS_AS(load_checkpoint(write("e.ckpt", "")), FormatError);

  // Encoder-only set as produced by the retrieval stage.
  ModelSet enc_only;
  enc_only.stage = "reid";
  enc_only.encoder = back.encoder;
  save_checkpoint(enc_only, dir / "c.ckpt");
  const ModelSet c = load_checkpoint(dir / "c.ckpt");
  CHECK_FALSE(c.lm.has_value());
  CHECK_FALSE(c.projection.has_value());
  std::filesystem::remove_all(dir);
}
