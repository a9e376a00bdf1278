#pragma once
// Strict JSON run configuration: defaults, file values, dotted-key overrides,
// and typed views for each subsystem.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mllmreid/error.hpp"
#include "mllmreid/eval.hpp"
#include "mllmreid/models.hpp"
#include "mllmreid/synthdata.hpp"
#include "mllmreid/trainer.hpp"

namespace mllmreid::cli {

/// Every key with its default value. Sections: seed, data, model, train, eval.
const nlohmann::ordered_json& default_config();

/// Thrown for config problems; exit code 1.
struct ConfigError : FormatError {
  using FormatError::FormatError;
};

class RunConfig {
 public:
  RunConfig();  // all defaults
  explicit RunConfig(nlohmann::ordered_json doc);

  /// Resolved document, echoed into manifests.
  const nlohmann::ordered_json& doc() const { return doc_; }

  std::uint64_t seed() const;
  synth::DataConfig data() const;
  /// The unseen domain for cross-dataset evaluation: shifted style, its own
  /// identities.
  synth::DataConfig target_data() const;
  model::VisualEncoderConfig encoder() const;
  model::CausalLMConfig lm() const;
  train::PretrainConfig pretrain() const;
  train::ReidConfig reid() const;
  eval::Protocol protocol() const;
  std::size_t rank_list_top() const;
  std::size_t ablation_seeds() const;
  /// Stage-2 starting point: nullopt for the run's own stage-1 checkpoint,
  /// "fresh" for an untrained encoder, otherwise a checkpoint path.
  std::optional<std::string> reid_init() const;
  /// Checkpoint to evaluate; nullopt for the run's stage-2 checkpoint.
  std::optional<std::filesystem::path> eval_checkpoint() const;

  /// Makes every file path in the document absolute against the working
  /// directory.
  void resolve_paths();

  /// Applies one `dotted.key=value` override; the value is parsed as JSON and
  /// falls back to a plain string.
  void set(const std::string& assignment);

 private:
  nlohmann::ordered_json doc_;
};

/// Reads `path` (when given; an empty file means all defaults), merges it
/// over the defaults, then applies `overrides` in order. Throws ConfigError
/// with a line number for syntax errors and a suggestion for unknown keys.
RunConfig parse_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& overrides = {});

/// Edit distance used for key suggestions.
std::size_t levenshtein(std::string_view a, std::string_view b);

}  // namespace mllmreid::cli
