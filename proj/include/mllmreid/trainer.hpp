#pragma once
// PK sampling, augmentation and the training recipes: LM pretraining with
// optional synchronized ReID losses, and encoder-only ReID fine-tuning.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mllmreid/losses.hpp"
#include "mllmreid/models.hpp"
#include "mllmreid/synthdata.hpp"

namespace mllmreid::train {

/// The four pretraining variants of the ablation.
enum class Recipe { baseline, common, syncreid, full };

std::string recipe_name(Recipe r);
/// Accepts baseline, common, syncreid, full (alias: mllmreid).
Recipe parse_recipe(std::string_view s);
synth::DialogueMode recipe_mode(Recipe r);
/// lambda used by the recipe when the config leaves it at its default.
double recipe_lambda(Recipe r, double configured);
inline constexpr std::array<Recipe, 4> kAllRecipes{Recipe::baseline, Recipe::common, Recipe::syncreid, Recipe::full};

struct AugmentConfig {
  bool flip = true;
  bool crop = true;
  bool erase = true;
  double flip_p = 0.5;
  std::size_t pad = 4;
  double erase_p = 0.5;
  double erase_min_area = 0.1;
  double erase_max_area = 0.3;
};

/// Training images grouped by identity, with dense class labels.
struct IdentityIndex {
  std::vector<std::size_t> identities;                    // sorted identity ids
  std::map<std::size_t, std::vector<std::size_t>> images;  // identity -> image indices
  std::map<std::size_t, std::size_t> label;                // identity -> class label

  static IdentityIndex from_split(const synth::Dataset& ds, std::span<const std::size_t> split);
};

struct PKBatch {
  std::vector<std::size_t> images;      // dataset image indices
  std::vector<std::size_t> identities;  // identity ids
  std::vector<std::size_t> labels;      // dense class labels
};

/// P identities uniformly without replacement, K images each (with
/// replacement only when an identity has fewer than K images). Throws
/// ValueError when fewer than P identities exist or P, K are zero.
PKBatch pk_sample(const IdentityIndex& index, std::size_t P, std::size_t K, std::mt19937_64& rng);

/// Throws Error when the batch is not P distinct labels with K samples each.
void check_pk_batch(const PKBatch& batch, std::size_t P, std::size_t K);

/// Flip, pad-and-crop, then random erasing filled with `fill` (per channel).
std::vector<double> augment(const std::vector<double>& image, std::mt19937_64& rng, const AugmentConfig& config,
                            const std::array<double, 3>& fill);

/// Per-channel mean over the given images.
std::array<double, 3> channel_mean(const synth::Dataset& ds, std::span<const std::size_t> indices);

struct StepRecord {
  std::size_t step = 0;
  std::optional<double> lm_nll;
  std::optional<double> id_loss;
  std::optional<double> triplet_loss;
  double overall = 0.0;
  double lambda = 0.0;
  double lr = 0.0;
};

struct StageConfig {
  std::size_t P = 8;
  std::size_t K = 4;
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0: epochs decide
  double lr = 3e-4;
  double weight_decay = 0.0;
  double clip_norm = 0.0;  // 0: off
  AugmentConfig augment;
  loss::TripletConfig triplet;

  /// Steps for a split of `num_images`: epochs * ceil(num_images / (P*K)),
  /// capped by max_steps.
  std::size_t steps(std::size_t num_images) const;
};

struct PretrainConfig {
  StageConfig stage;
  Recipe recipe = Recipe::full;
  double lambda = 0.3;
  std::size_t turns = 1;
  model::Pooling pooling = model::Pooling::mean;
  std::uint64_t seed = 0;
};

struct ReidConfig {
  StageConfig stage;
  std::uint64_t seed = 0;
};

using StepCallback = std::function<void(const StepRecord&)>;

/// Formats one dialogue per batch image (caption or continuation target by
/// mode). Baseline-prompt picks are tallied into `prompt_counts` when given.
std::vector<text::TokenSequence> batch_dialogues(const synth::Dataset& ds, const PKBatch& batch,
                                                 const text::Vocabulary& vocab, synth::DialogueMode mode,
                                                 std::mt19937_64& prompt_rng, std::size_t turns, std::size_t slots,
                                                 std::vector<std::size_t>* prompt_counts = nullptr);

/// The stage-1 loss terms for one batch. id and tri stay undefined when the
/// model set has no ID head (lambda = 1).
struct Stage1Losses {
  ad::Tensor lm, id, tri;
};

Stage1Losses stage1_losses(const model::ModelSet& models, std::span<const std::vector<double>> images,
                           std::span<const text::TokenSequence> seqs, std::span<const std::size_t> labels,
                           model::Pooling pooling, const loss::TripletConfig& triplet);

struct PretrainResult {
  model::ModelSet models;
  std::vector<StepRecord> history;
  std::vector<std::size_t> prompt_counts;  // baseline-prompt usage, size 20
};

/// Builds encoder, projection, LM and (when lambda < 1) an ID head on the LM
/// width, then trains them on the dataset's train split. The baseline recipe
/// always uses lambda = 1.
PretrainResult train_stage1(const synth::Dataset& ds, const text::Vocabulary& vocab,
                            const model::VisualEncoderConfig& enc_cfg, const model::CausalLMConfig& lm_cfg,
                            const PretrainConfig& config, const StepCallback& on_step = {});

/// The caption-prediction baseline: train_stage1 with Recipe::baseline.
PretrainResult train_baseline(const synth::Dataset& ds, const text::Vocabulary& vocab,
                              const model::VisualEncoderConfig& enc_cfg, const model::CausalLMConfig& lm_cfg,
                              PretrainConfig config, const StepCallback& on_step = {});

struct ReidResult {
  model::ModelSet models;  // encoder + ID head, stage "reid"
  std::vector<StepRecord> history;
};

/// Fine-tunes `encoder` with ID + triplet losses on reid_embed features and a
/// fresh ID head. Uses images and identity labels only.
ReidResult train_stage2(const model::VisualEncoder& encoder, const synth::Dataset& ds, const ReidConfig& config,
                        const StepCallback& on_step = {});

/// The untrained encoder stage 1 would start from for `seed`.
model::VisualEncoder fresh_encoder(const model::VisualEncoderConfig& config, std::uint64_t seed);

/// Deep copy of an encoder's parameters into fresh tensors.
model::VisualEncoder clone_encoder(const model::VisualEncoder& enc);

/// One JSON object per line: step, lm_nll, id_loss, triplet_loss, overall,
/// lambda, lr (absent terms are null).
void write_loss_history(const std::filesystem::path& path, std::span<const StepRecord> history);
std::string step_record_json(const StepRecord& r);

}  // namespace mllmreid::train
