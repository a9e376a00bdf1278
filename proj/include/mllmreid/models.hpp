#pragma once
// Patch-transformer visual encoder, linear projection into the language
// embedding space, causal transformer LM, latent pooling and checkpoints.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mllmreid/tensor.hpp"
#include "mllmreid/tokenizer.hpp"

namespace mllmreid::model {

using ad::Tensor;

enum class TapPoint { pre_last_layer, post_last_layer };
enum class Pooling { mean, last_slot };

std::string tap_point_name(TapPoint t);
TapPoint parse_tap_point(std::string_view s);
std::string pooling_name(Pooling p);
Pooling parse_pooling(std::string_view s);

struct VisualEncoderConfig {
  std::size_t height = 64;
  std::size_t width = 32;
  std::size_t channels = 3;
  std::size_t patch = 8;
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  TapPoint tap = TapPoint::post_last_layer;

  std::size_t num_patches() const { return (height / patch) * (width / patch); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t image_size() const { return height * width * channels; }
  /// Throws ValueError on indivisible dims or zero sizes.
  void validate() const;
};

struct CausalLMConfig {
  std::size_t vocab = 256;
  std::size_t dim = 64;
  std::size_t layers = 3;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t max_len = 160;

  void validate() const;
};

/// x[n,in] -> x*w + b
struct Linear {
  Tensor w, b;

  static Linear init(std::size_t in, std::size_t out, std::mt19937_64& rng, const std::string& name);
  Tensor operator()(const Tensor& x) const;
  std::vector<Tensor> parameters() const { return {w, b}; }
};

/// Pre-LN transformer block over packed sequences [B*L, d].
struct Block {
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Linear qkv, proj, fc1, fc2;
  std::size_t heads = 1;

  static Block init(std::size_t dim, std::size_t heads, std::size_t mlp_ratio, std::mt19937_64& rng,
                    const std::string& name);
  Tensor forward(const Tensor& x, std::size_t seq_len, bool causal) const;
  std::vector<Tensor> parameters() const;
};

struct VisualEncoder {
  VisualEncoderConfig config;
  Linear patch_embed;
  Tensor pos_embed;  // [num_patches, dim]
  std::vector<Block> blocks;
  Tensor ln_g, ln_b;

  static VisualEncoder init(const VisualEncoderConfig& config, std::uint64_t seed);
  /// Every parameter, in a fixed order.
  std::vector<Tensor> parameters() const;
  /// Parameters that reach the output at the configured tap point.
  std::vector<Tensor> active_parameters() const;
};

struct Projection {
  Linear linear;

  static Projection init(std::size_t d_v, std::size_t d_lm, std::uint64_t seed);
  std::vector<Tensor> parameters() const { return linear.parameters(); }
};

struct CausalLM {
  CausalLMConfig config;
  Tensor tok_embed;  // [vocab, dim]
  Tensor pos_embed;  // [max_len, dim]
  std::vector<Block> blocks;
  Tensor ln_g, ln_b;
  Linear head;  // dim -> vocab

  static CausalLM init(const CausalLMConfig& config, std::uint64_t seed);
  std::vector<Tensor> parameters() const;
};

/// Classifier over identities, owned by whichever stage trains it.
struct IdHead {
  Linear linear;

  static IdHead init(std::size_t dim, std::size_t classes, std::uint64_t seed, const std::string& name);
  std::size_t classes() const { return linear.w.dim(1); }
  std::vector<Tensor> parameters() const { return linear.parameters(); }
};

/// Patch features for a batch of images (each HWC, config.image_size()
/// values): [B * num_patches, dim], rows grouped per image, taken at the
/// configured tap point and layer-normalized.
Tensor encode_images(const VisualEncoder& enc, std::span<const std::vector<double>> images);
/// Same for a single image: [num_patches, dim].
Tensor encode_image(const VisualEncoder& enc, const std::vector<double>& image);

/// Affine map per patch token: [n, d_v] -> [n, d_lm].
Tensor project(const Tensor& features, const Projection& proj);

struct LMOutput {
  Tensor logits;  // [B * seq_len, vocab]
  Tensor hidden;  // [B * seq_len, dim], final layer after the last layer norm
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  /// Per sequence, the flat row indices of its image slots.
  std::vector<std::vector<std::size_t>> slot_rows;
};

/// Runs the LM over sequences right-padded with <pad> to the longest one.
/// `image_embeds` holds every sequence's slot embeddings back to back, in
/// slot order; leave it undefined when no sequence has slots.
/// Throws ShapeError on a slot/embedding count mismatch and ValueError when a
/// sequence exceeds max_len or an id exceeds the vocabulary.
LMOutput lm_forward(const CausalLM& lm, std::span<const text::TokenSequence> seqs, const Tensor& image_embeds);

/// Pooled LM latents per sequence: [B, dim]. Mean over slot rows, or the
/// last slot. Throws ValueError when a sequence has no slots.
Tensor pool_image_latents(const Tensor& hidden, const std::vector<std::vector<std::size_t>>& slot_rows,
                          Pooling pooling = Pooling::mean);

/// Retrieval embedding: mean of the encoder's patch features, [B, dim].
Tensor reid_embed(const VisualEncoder& enc, std::span<const std::vector<double>> images);

/// Greedy continuation of `prompt` (with its image slots filled from
/// `image_embeds`), stopping at <eos> or after max_new tokens.
std::vector<std::size_t> greedy_decode(const CausalLM& lm, const text::TokenSequence& prompt,
                                       const Tensor& image_embeds, std::size_t max_new);

// Checkpoints ---------------------------------------------------------------

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  ad::Shape shape;
  std::vector<double> data;

  bool operator==(const NamedArray&) const = default;
};

/// Raw file contents; see docs/checkpoint_format.md.
struct CheckpointData {
  std::uint16_t version = kCheckpointVersion;
  std::vector<std::pair<std::string, std::string>> header;
  std::vector<NamedArray> tensors;

  const std::string* find_header(const std::string& key) const;
};

/// Writes atomically (temp file + rename).
void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
/// Throws FormatError on bad magic, version mismatch or truncation.
CheckpointData read_checkpoint(const std::filesystem::path& path);

/// The parts a training stage produces. Absent parts are not serialized.
struct ModelSet {
  std::string stage;
  VisualEncoder encoder;
  std::optional<Projection> projection;
  std::optional<CausalLM> lm;
  std::optional<text::Vocabulary> vocab;
  std::optional<IdHead> id_head;
  std::map<std::string, std::string> meta;  // free-form key/values (recipe, seed, ...)

  std::vector<Tensor> parameters() const;
};

CheckpointData to_checkpoint(const ModelSet& models);
ModelSet from_checkpoint(const CheckpointData& data);
void save_checkpoint(const ModelSet& models, const std::filesystem::path& path);
ModelSet load_checkpoint(const std::filesystem::path& path);

}  // namespace mllmreid::model
