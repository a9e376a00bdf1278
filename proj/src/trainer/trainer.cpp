#include "mllmreid/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"
#include "mllmreid/error.hpp"
#include "mllmreid/ops.hpp"
#include "mllmreid/optim.hpp"
#include "mllmreid/prompts.hpp"

namespace mllmreid::train {
namespace {

using synth::kChannels;
using synth::kImageHeight;
using synth::kImageWidth;

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t which) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(which)};
  return std::mt19937_64(seq);
}

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t which) { return stream(seed, which)(); }

void validate_stage(const StageConfig& c, const IdentityIndex& index) {
  if (c.P < 2 || c.K < 2) throw ValueError("P and K must both be at least 2 for the triplet loss");
  if (c.lr <= 0.0 || !std::isfinite(c.lr)) throw ValueError("learning rate must be positive");
  std::size_t images = 0;
  for (const auto& [id, imgs] : index.images) images += imgs.size();
  if (c.P * c.K > images) {
    throw ValueError("P*K = " + std::to_string(c.P * c.K) + " exceeds the " + std::to_string(images) +
                     " training images");
  }
}

std::vector<std::vector<double>> batch_images(const synth::Dataset& ds, const PKBatch& batch, std::mt19937_64& rng,
                                              const AugmentConfig& aug, const std::array<double, 3>& fill) {
  std::vector<std::vector<double>> out;
  out.reserve(batch.images.size());
  for (std::size_t i : batch.images) out.push_back(augment(ds.images[i].pixels, rng, aug, fill));
  return out;
}

void check_finite(double v, std::size_t step) {
  if (!std::isfinite(v)) throw NumericError("non-finite loss at step " + std::to_string(step));
}

template <typename F>
void guarded_step(std::size_t step, F&& f) {
  try {
    f();
  } catch (const NumericError& e) {
    const std::string what = e.what();
    if (what.find("at step") != std::string::npos) throw;
    throw NumericError(what + " (at step " + std::to_string(step) + ")");
  }
}

void append(std::vector<ad::Tensor>& to, const std::vector<ad::Tensor>& from) { to.insert(to.end(), from.begin(), from.end()); }

}  // namespace

std::string recipe_name(Recipe r) {
  switch (r) {
    case Recipe::baseline:
      return "baseline";
    case Recipe::common:
      return "common";
    case Recipe::syncreid:
      return "syncreid";
    case Recipe::full:
      return "full";
  }
  return "?";
}

Recipe parse_recipe(std::string_view s) {
  if (s == "baseline") return Recipe::baseline;
  if (s == "common") return Recipe::common;
  if (s == "syncreid") return Recipe::syncreid;
  if (s == "full" || s == "mllmreid") return Recipe::full;
  throw ValueError("unknown recipe '" + std::string(s) + "' (expected baseline, common, syncreid or full)");
}

synth::DialogueMode recipe_mode(Recipe r) {
  return r == Recipe::common || r == Recipe::full ? synth::DialogueMode::common_instruction
                                                  : synth::DialogueMode::baseline_prompt;
}

double recipe_lambda(Recipe r, double configured) {
  return r == Recipe::baseline || r == Recipe::common ? 1.0 : configured;
}

IdentityIndex IdentityIndex::from_split(const synth::Dataset& ds, std::span<const std::size_t> split) {
  IdentityIndex idx;
  for (std::size_t i : split) idx.images[ds.images.at(i).identity].push_back(i);
  for (const auto& [id, imgs] : idx.images) {
    idx.label[id] = idx.identities.size();
    idx.identities.push_back(id);
  }
  return idx;
}

PKBatch pk_sample(const IdentityIndex& index, std::size_t P, std::size_t K, std::mt19937_64& rng) {
  if (P == 0 || K == 0) throw ValueError("pk_sample: P and K must be positive");
  if (index.identities.size() < P) {
    throw ValueError("pk_sample: " + std::to_string(index.identities.size()) + " identities available, P = " +
                     std::to_string(P));
  }
  std::vector<std::size_t> ids = index.identities;
  for (std::size_t i = 0; i < P; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  PKBatch b;
  for (std::size_t p = 0; p < P; ++p) {
    std::vector<std::size_t> imgs = index.images.at(ids[p]);
    if (imgs.size() >= K) {
      for (std::size_t k = 0; k < K; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, imgs.size() - 1);
        std::swap(imgs[k], imgs[pick(rng)]);
      }
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, imgs.size() - 1);
      std::vector<std::size_t> drawn(K);
      for (std::size_t& d : drawn) d = imgs[pick(rng)];
      imgs = drawn;
    }
    for (std::size_t k = 0; k < K; ++k) {
      b.images.push_back(imgs[k]);
      b.identities.push_back(ids[p]);
      b.labels.push_back(index.label.at(ids[p]));
    }
  }
  return b;
}

void check_pk_batch(const PKBatch& batch, std::size_t P, std::size_t K) {
  std::map<std::size_t, std::size_t> counts;
  for (std::size_t l : batch.labels) ++counts[l];
  bool ok = batch.labels.size() == P * K && batch.images.size() == P * K && counts.size() == P;
  for (const auto& [l, n] : counts) ok = ok && n == K;
  if (!ok) throw Error("PK batch invariant violated: expected " + std::to_string(P) + " labels x " + std::to_string(K));
}

std::vector<double> augment(const std::vector<double>& image, std::mt19937_64& rng, const AugmentConfig& c,
                            const std::array<double, 3>& fill) {
  constexpr std::size_t H = kImageHeight, W = kImageWidth, C = kChannels;
  if (image.size() != H * W * C) throw ShapeError("augment: unexpected image size");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> img = image;
  auto at = [&](std::vector<double>& v, std::size_t y, std::size_t x, std::size_t ch) -> double& {
    return v[(y * W + x) * C + ch];
  };

  if (c.flip && u(rng) < c.flip_p) {
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W / 2; ++x)
        for (std::size_t ch = 0; ch < C; ++ch) std::swap(at(img, y, x, ch), at(img, y, W - 1 - x, ch));
  }
  if (c.crop && c.pad > 0) {
    std::uniform_int_distribution<long> off(0, 2 * static_cast<long>(c.pad));
    const long oy = off(rng) - static_cast<long>(c.pad), ox = off(rng) - static_cast<long>(c.pad);
    std::vector<double> out(img.size(), 0.0);
    for (std::size_t y = 0; y < H; ++y) {
      const long sy = static_cast<long>(y) + oy;
      if (sy < 0 || sy >= static_cast<long>(H)) continue;
      for (std::size_t x = 0; x < W; ++x) {
        const long sx = static_cast<long>(x) + ox;
        if (sx < 0 || sx >= static_cast<long>(W)) continue;
        for (std::size_t ch = 0; ch < C; ++ch) at(out, y, x, ch) = at(img, sy, sx, ch);
      }
    }
    img = std::move(out);
  }
  if (c.erase && u(rng) < c.erase_p) {
    const double area = static_cast<double>(H * W);
    std::uniform_real_distribution<double> frac(c.erase_min_area, c.erase_max_area);
    std::uniform_real_distribution<double> log_ratio(std::log(0.3), std::log(1.0 / 0.3));
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double target = frac(rng) * area, r = std::exp(log_ratio(rng));
      const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target * r)));
      const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target / r)));
      const double covered = static_cast<double>(h * w) / area;
      if (h == 0 || w == 0 || h > H || w > W || covered < c.erase_min_area || covered > c.erase_max_area) continue;
      const std::size_t y0 = std::uniform_int_distribution<std::size_t>(0, H - h)(rng);
      const std::size_t x0 = std::uniform_int_distribution<std::size_t>(0, W - w)(rng);
      for (std::size_t y = y0; y < y0 + h; ++y)
        for (std::size_t x = x0; x < x0 + w; ++x)
          for (std::size_t ch = 0; ch < C; ++ch) at(img, y, x, ch) = fill[ch];
      break;
    }
  }
  return img;
}

std::array<double, 3> channel_mean(const synth::Dataset& ds, std::span<const std::size_t> indices) {
  std::array<double, 3> sum{0, 0, 0};
  std::size_t n = 0;
  for (std::size_t i : indices) {
    const auto& px = ds.images.at(i).pixels;
    for (std::size_t k = 0; k < px.size(); ++k) sum[k % kChannels] += px[k];
    n += px.size() / kChannels;
  }
  if (n == 0) return {0.5, 0.5, 0.5};
  for (double& s : sum) s /= static_cast<double>(n);
  return sum;
}

std::size_t StageConfig::steps(std::size_t num_images) const {
  const std::size_t per_epoch = (num_images + P * K - 1) / (P * K);
  const std::size_t total = epochs * per_epoch;
  return max_steps > 0 ? std::min(total, max_steps) : total;
}

model::VisualEncoder clone_encoder(const model::VisualEncoder& enc) {
  model::VisualEncoder copy = model::VisualEncoder::init(enc.config, 0);
  auto dst = copy.parameters();
  const auto src = enc.parameters();
  for (std::size_t i = 0; i < src.size(); ++i)
    std::copy(src[i].data().begin(), src[i].data().end(), dst[i].mutable_data().begin());
  return copy;
}

std::vector<text::TokenSequence> batch_dialogues(const synth::Dataset& ds, const PKBatch& batch,
                                                 const text::Vocabulary& vocab, synth::DialogueMode mode,
                                                 std::mt19937_64& prompt_rng, std::size_t turns, std::size_t slots,
                                                 std::vector<std::size_t>* prompt_counts) {
  std::vector<text::TokenSequence> seqs;
  for (std::size_t b = 0; b < batch.images.size(); ++b) {
    const std::size_t id = batch.identities[b];
    std::size_t used = 0;
    const text::DialogueSample sample = synth::build_dialogue(batch.images[b], ds.captions.at(id),
                                                              ds.continuations.at(id), mode, prompt_rng, turns, &used);
    if (prompt_counts && mode == synth::DialogueMode::baseline_prompt) ++prompt_counts->at(used);
    seqs.push_back(text::format_dialogue(sample, vocab, slots));
  }
  return seqs;
}

Stage1Losses stage1_losses(const model::ModelSet& m, std::span<const std::vector<double>> images,
                           std::span<const text::TokenSequence> seqs, std::span<const std::size_t> labels,
                           model::Pooling pooling, const loss::TripletConfig& triplet) {
  if (!m.projection || !m.lm) throw ValueError("stage-1 losses need a projection and a language model");
  const ad::Tensor embeds = model::project(model::encode_images(m.encoder, images), *m.projection);
  const model::LMOutput out = model::lm_forward(*m.lm, seqs, embeds);
  Stage1Losses l;
  l.lm = loss::lm_nll(out.logits, seqs, out.seq_len);
  if (m.id_head) {
    const ad::Tensor pooled = model::pool_image_latents(out.hidden, out.slot_rows, pooling);
    l.id = loss::id_loss(m.id_head->linear(pooled), labels);
    l.tri = loss::triplet_loss(pooled, labels, triplet);
  }
  return l;
}

model::VisualEncoder fresh_encoder(const model::VisualEncoderConfig& config, std::uint64_t seed) {
  return model::VisualEncoder::init(config, sub_seed(seed, 11));
}

PretrainResult train_stage1(const synth::Dataset& ds, const text::Vocabulary& vocab,
                            const model::VisualEncoderConfig& enc_cfg, const model::CausalLMConfig& lm_cfg,
                            const PretrainConfig& config, const StepCallback& on_step) {
  const IdentityIndex index = IdentityIndex::from_split(ds, ds.train);
  validate_stage(config.stage, index);
  if (vocab.size() > lm_cfg.vocab) {
    throw ValueError("vocabulary of " + std::to_string(vocab.size()) + " tokens exceeds LM vocab size " +
                     std::to_string(lm_cfg.vocab));
  }
  const double lambda = recipe_lambda(config.recipe, config.lambda);
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValueError("lambda must lie in [0, 1]");
  const synth::DialogueMode mode = recipe_mode(config.recipe);
  const bool sync = lambda < 1.0;

  PretrainResult res;
  model::ModelSet& m = res.models;
  m.stage = config.recipe == Recipe::baseline ? "baseline" : "stage1";
  m.encoder = fresh_encoder(enc_cfg, config.seed);
  m.projection = model::Projection::init(enc_cfg.dim, lm_cfg.dim, sub_seed(config.seed, 12));
  m.lm = model::CausalLM::init(lm_cfg, sub_seed(config.seed, 13));
  m.vocab = vocab;
  if (sync) m.id_head = model::IdHead::init(lm_cfg.dim, index.identities.size(), sub_seed(config.seed, 14), "id_head");
  m.meta["recipe"] = recipe_name(config.recipe);
  m.meta["lambda"] = nlohmann::json(lambda).dump();
  m.meta["seed"] = std::to_string(config.seed);

  std::vector<ad::Tensor> params = m.encoder.active_parameters();
  append(params, m.projection->parameters());
  append(params, m.lm->parameters());
  if (sync) append(params, m.id_head->parameters());
  ad::OptimizerState opt({config.stage.lr, 0.9, 0.999, 1e-8, config.stage.weight_decay});

  std::mt19937_64 sample_rng = stream(config.seed, 1), aug_rng = stream(config.seed, 2),
                  prompt_rng = stream(config.seed, 3);
  const auto fill = channel_mean(ds, ds.train);
  const std::size_t slots = enc_cfg.num_patches();
  const std::size_t steps = config.stage.steps(ds.train.size());
  res.prompt_counts.assign(text::kBaselinePrompts.size(), 0);

  for (std::size_t step = 0; step < steps; ++step) {
    guarded_step(step, [&] {
      const PKBatch batch = pk_sample(index, config.stage.P, config.stage.K, sample_rng);
      check_pk_batch(batch, config.stage.P, config.stage.K);
      const auto images = batch_images(ds, batch, aug_rng, config.stage.augment, fill);
      const auto seqs = batch_dialogues(ds, batch, vocab, mode, prompt_rng, config.turns, slots, &res.prompt_counts);
      const Stage1Losses l = stage1_losses(m, images, seqs, batch.labels, config.pooling, config.stage.triplet);

      StepRecord rec;
      rec.step = step;
      rec.lambda = lambda;
      rec.lr = config.stage.lr;
      rec.lm_nll = l.lm.item();
      if (sync) {
        rec.id_loss = l.id.item();
        rec.triplet_loss = l.tri.item();
      }
      const ad::Tensor total = loss::overall_loss(l.lm, l.id, l.tri, lambda);
      rec.overall = total.item();
      check_finite(rec.overall, step);
      ad::backward(total);
      if (config.stage.clip_norm > 0.0) ad::clip_grad_norm(params, config.stage.clip_norm);
      ad::adam_step(params, opt);
      res.history.push_back(rec);
      if (on_step) on_step(rec);
    });
  }
  return res;
}

PretrainResult train_baseline(const synth::Dataset& ds, const text::Vocabulary& vocab,
                              const model::VisualEncoderConfig& enc_cfg, const model::CausalLMConfig& lm_cfg,
                              PretrainConfig config, const StepCallback& on_step) {
  config.recipe = Recipe::baseline;
  return train_stage1(ds, vocab, enc_cfg, lm_cfg, config, on_step);
}

ReidResult train_stage2(const model::VisualEncoder& encoder, const synth::Dataset& ds, const ReidConfig& config,
                        const StepCallback& on_step) {
  const IdentityIndex index = IdentityIndex::from_split(ds, ds.train);
  validate_stage(config.stage, index);
  ReidResult res;
  model::ModelSet& m = res.models;
  m.stage = "reid";
  m.encoder = clone_encoder(encoder);
  m.id_head = model::IdHead::init(m.encoder.config.dim, index.identities.size(), sub_seed(config.seed, 24), "id_head");
  m.meta["seed"] = std::to_string(config.seed);

  std::vector<ad::Tensor> params = m.encoder.active_parameters();
  append(params, m.id_head->parameters());
  ad::OptimizerState opt({config.stage.lr, 0.9, 0.999, 1e-8, config.stage.weight_decay});
  std::mt19937_64 sample_rng = stream(config.seed, 21), aug_rng = stream(config.seed, 22);
  const auto fill = channel_mean(ds, ds.train);
  const std::size_t steps = config.stage.steps(ds.train.size());

  for (std::size_t step = 0; step < steps; ++step) {
    guarded_step(step, [&] {
      const PKBatch batch = pk_sample(index, config.stage.P, config.stage.K, sample_rng);
      check_pk_batch(batch, config.stage.P, config.stage.K);
      const auto images = batch_images(ds, batch, aug_rng, config.stage.augment, fill);
      const ad::Tensor emb = model::reid_embed(m.encoder, images);
      const ad::Tensor id_l = loss::id_loss(m.id_head->linear(emb), batch.labels);
      const ad::Tensor tri_l = loss::triplet_loss(emb, batch.labels, config.stage.triplet);
      const ad::Tensor total = loss::overall_loss(ad::Tensor(), id_l, tri_l, 0.0);
      StepRecord rec;
      rec.step = step;
      rec.lambda = 0.0;
      rec.lr = config.stage.lr;
      rec.id_loss = id_l.item();
      rec.triplet_loss = tri_l.item();
      rec.overall = total.item();
      check_finite(rec.overall, step);
      ad::backward(total);
      if (config.stage.clip_norm > 0.0) ad::clip_grad_norm(params, config.stage.clip_norm);
      ad::adam_step(params, opt);
      res.history.push_back(rec);
      if (on_step) on_step(rec);
    });
  }
  return res;
}

std::string step_record_json(const StepRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["lm_nll"] = opt(r.lm_nll);
  j["id_loss"] = opt(r.id_loss);
  j["triplet_loss"] = opt(r.triplet_loss);
  j["overall"] = r.overall;
  j["lambda"] = r.lambda;
  j["lr"] = r.lr;
  return j.dump();
}

void write_loss_history(const std::filesystem::path& path, std::span<const StepRecord> history) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write loss history " + path.string());
  for (const StepRecord& r : history) os << step_record_json(r) << '\n';
}

}  // namespace mllmreid::train
