#pragma once
// Experiment plumbing behind the command-line tool: content hashes, atomic
// writes, per-command manifests and the pipeline steps that produce the
// artifacts under an output directory.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mllmreid/config.hpp"
#include "mllmreid/error.hpp"
#include "mllmreid/eval.hpp"
#include "mllmreid/synthdata.hpp"
#include "mllmreid/trainer.hpp"

namespace mllmreid::cli {

/// A verification property did not hold; exit code 2.
struct InvariantError : Error {
  using Error::Error;
};

/// SHA-1 of "blob <size>\0" + bytes, as git hashes file contents.
std::string git_blob_sha1(std::string_view bytes);
/// Blob hash of a file, or for a directory the hash of its sorted
/// "relative-path blob-hash" listing.
std::string content_hash(const std::filesystem::path& path);

/// Writes through a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

/// Where a run reads and writes. Data directories default to out/data and
/// out/data_target; ablation runs share one pair per seed.
struct Workspace {
  std::filesystem::path out;
  std::filesystem::path data;
  std::filesystem::path target;

  explicit Workspace(const std::filesystem::path& out_dir);
  Workspace(const std::filesystem::path& out_dir, const std::filesystem::path& data_dir,
            const std::filesystem::path& target_dir);

  std::filesystem::path checkpoint(std::string_view name) const { return out / "checkpoints" / name; }
};

/// One command's record inside <out>/manifest.json (keyed by command name,
/// so successive commands in one directory accumulate).
class ManifestEntry {
 public:
  ManifestEntry(std::string command, const Workspace& ws, const nlohmann::ordered_json& config);

  void input(const std::string& name, const std::filesystem::path& path);
  void artifact(const std::string& name, const std::filesystem::path& path);
  void timing(const std::string& phase, double seconds);
  void metric(const std::string& name, nlohmann::ordered_json value);
  void fail(int exit_code, const std::string& cause);

  nlohmann::ordered_json to_json() const;
  /// Merges this entry into the manifest file atomically.
  void write() const;

 private:
  std::string command_;
  std::filesystem::path path_;
  nlohmann::ordered_json config_;
  nlohmann::ordered_json inputs_ = nlohmann::ordered_json::object();
  nlohmann::ordered_json artifacts_ = nlohmann::ordered_json::object();
  nlohmann::ordered_json timings_ = nlohmann::ordered_json::object();
  nlohmann::ordered_json metrics_ = nlohmann::ordered_json::object();
  int exit_code_ = 0;
  std::string error_;
};

/// Exit code for an exception escaping a command: 1 config/usage,
/// 2 invariant, 3 runtime or numeric.
int exit_code_for(const std::exception& e);

/// Loads the dataset in `dir`, generating and saving it first when absent.
/// Images always come from disk so every later step sees the same pixels.
/// Throws ConfigError when an existing dataset was built from another config.
synth::Dataset load_or_build(const std::filesystem::path& dir, const synth::DataConfig& config);

/// The vocabulary every stage-1 run on this dataset uses.
text::Vocabulary dataset_vocab(const synth::Dataset& ds);

// Pipeline steps. Each fills `entry` with inputs, artifacts, timings and
// metrics; the caller writes the manifest.
void gen_data(const RunConfig& cfg, const Workspace& ws, ManifestEntry& entry);
void pretrain(const RunConfig& cfg, const Workspace& ws, ManifestEntry& entry);
void train_reid(const RunConfig& cfg, const Workspace& ws, ManifestEntry& entry);
/// Writes eval.json (no timings, so reruns compare byte for byte) and
/// rank_lists.txt.
void evaluate(const RunConfig& cfg, const Workspace& ws, ManifestEntry& entry);
/// Writes cross_eval.json with the in-domain and shifted-domain reports.
void cross_evaluate(const RunConfig& cfg, const Workspace& ws, ManifestEntry& entry);

/// Runs one step with its own manifest entry; on failure the entry records
/// the cause and the exception propagates after the manifest is written.
void run_step(const std::string& command, const RunConfig& cfg, const Workspace& ws,
              void (*step)(const RunConfig&, const Workspace&, ManifestEntry&));

struct AblationCell {
  train::Recipe recipe;
  std::uint64_t seed;
  double map;
  double rank1;
  double cross_map;  // same model on the shifted domain
};

struct AblationSummary {
  std::vector<AblationCell> cells;  // recipe-major, seeds ascending
  std::size_t seeds = 0;
};

/// pretrain, train-reid, eval and cross-eval for every recipe and seed
/// (config seed + k), under out/ablate/seed<k>/<recipe>. Writes
/// ablation.json and ablation.md.
AblationSummary ablate(const RunConfig& cfg, const Workspace& ws, std::size_t seeds, ManifestEntry& entry);

/// Markdown table with rows baseline, +common, +syncreid, +both and
/// mean +- sd of mAP and R1 in percent.
std::string ablation_markdown(const AblationSummary& s);
nlohmann::ordered_json ablation_json(const AblationSummary& s);

/// Row label used in the ablation table.
std::string ablation_row(train::Recipe r);

/// The command-line tool: parses argv, runs one command and returns its exit
/// code. Diagnostics go to stderr, progress to stdout.
int run_command(int argc, const char* const* argv);

}  // namespace mllmreid::cli
