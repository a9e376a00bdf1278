#pragma once
// Procedural person re-identification data: attribute-defined identities,
// camera-perturbed renders, template captions/continuations, dialogue
// assembly and dataset statistics.

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mllmreid/tokenizer.hpp"

namespace mllmreid::synth {

inline constexpr std::size_t kImageHeight = 64;
inline constexpr std::size_t kImageWidth = 32;
inline constexpr std::size_t kChannels = 3;
inline constexpr std::size_t kPixelCount = kImageHeight * kImageWidth * kChannels;
inline constexpr std::size_t kPaletteSize = 8;
inline constexpr int kDatasetFormatVersion = 1;

inline constexpr std::array<std::string_view, kPaletteSize> kPalette{"red",  "orange", "yellow", "green",
                                                                     "blue", "purple", "white",  "black"};

enum class Hat : std::uint8_t { none, dark, light };
enum class Bag : std::uint8_t { none, left, right };
enum class Build : std::uint8_t { slim, broad };

struct Attributes {
  std::uint8_t shirt = 0;  // palette indices
  std::uint8_t pants = 0;
  std::uint8_t shoes = 0;
  Hat hat = Hat::none;
  Bag bag = Bag::none;
  Build build = Build::slim;

  auto operator<=>(const Attributes&) const = default;
};

/// Size of the attribute grid (8 * 8 * 8 * 3 * 3 * 2).
inline constexpr std::size_t kAttributeSpace = kPaletteSize * kPaletteSize * kPaletteSize * 3 * 3 * 2;
Attributes attributes_from_index(std::size_t index);
std::size_t attributes_index(const Attributes& a);

struct IdentitySpec {
  std::size_t id = 0;
  Attributes attributes;
};

enum class Split : std::uint8_t { train, query, gallery };
std::string_view split_name(Split s);

/// 64x32 RGB, row-major HWC, values k/255 so that PPM storage is lossless.
struct PersonImage {
  std::vector<double> pixels;
  std::size_t identity = 0;
  std::size_t camera = 0;
  std::size_t index = 0;  // per-identity image index
  Split split = Split::train;

  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * kImageWidth + x) * kChannels + c];
  }
  /// Relative path inside a dataset directory: {split}/{id}_{cam}_{idx}.ppm
  std::string relative_path() const;
};

struct DataConfig {
  std::size_t num_train_ids = 100;
  std::size_t num_eval_ids = 50;
  std::size_t imgs_per_id = 8;
  std::size_t cams = 4;
  std::uint64_t seed = 0;
  int domain_style = 0;  // 0: source look, 1: shifted palette/noise/background
  std::optional<std::filesystem::path> continuations_file;
};

struct DatasetStats {
  std::size_t id_q = 0, id_g = 0, id_t = 0;
  std::size_t img_q = 0, img_g = 0, img_t = 0;
  std::size_t cam_n = 0;

  bool operator==(const DatasetStats&) const = default;
  DatasetStats operator+(const DatasetStats& o) const;
};

struct ReferenceStats {
  std::string_view dataset;
  DatasetStats stats;
};

/// Published statistics of the standard benchmarks, kept as a schema
/// reference for DatasetStats.
std::span<const ReferenceStats> reference_stats();
const DatasetStats& reference_stats(std::string_view dataset);

std::string gen_caption(const Attributes& a);
/// Inverse of gen_caption; nullopt when `caption` is not a template caption.
std::optional<Attributes> parse_caption(std::string_view caption);

/// Deterministic continuation of a caption (< 20 words). External
/// continuations, e.g. produced offline by a real LLM, take precedence.
class ContinuationOracle {
 public:
  ContinuationOracle() = default;
  explicit ContinuationOracle(std::map<std::string, std::string> external) : external_(std::move(external)) {}
  /// JSON object mapping caption -> continuation.
  static ContinuationOracle from_file(const std::filesystem::path& path);

  /// Throws ValueError when the caption is neither a template caption nor
  /// present in the external map.
  std::string operator()(std::string_view caption) const;

 private:
  std::map<std::string, std::string> external_;
};

std::string gen_continuation(std::string_view caption);

std::size_t word_count(std::string_view text);

enum class DialogueMode { common_instruction, baseline_prompt };
std::string_view dialogue_mode_name(DialogueMode m);
DialogueMode parse_dialogue_mode(std::string_view s);

/// common_instruction: the image-continuation instruction with the
/// continuation as answer. baseline_prompt: a uniformly drawn appearance prompt
/// with the caption as answer. Extra turns (turns > 1) ask for a text
/// continuation of the caption with the same continuation target.
text::DialogueSample build_dialogue(std::size_t image_index, std::string_view caption, std::string_view continuation,
                                    DialogueMode mode, std::mt19937_64& rng, std::size_t turns = 1,
                                    std::size_t* prompt_used = nullptr);

struct Dataset {
  DataConfig config;
  std::vector<IdentitySpec> identities;   // train ids first, then eval ids
  std::map<std::size_t, std::string> captions;       // by identity id
  std::map<std::size_t, std::string> continuations;  // by identity id
  std::vector<PersonImage> images;
  std::vector<std::size_t> train, query, gallery;  // indices into images
  std::size_t num_cameras = 0;

  std::vector<std::size_t> train_identity_ids() const;
};

/// Renders a full dataset; every pixel is a pure function of
/// (seed, domain_style, id, camera, index). Throws ValueError for cams < 2,
/// imgs_per_id < 2 or more identities than the attribute grid holds.
Dataset build_dataset(const DataConfig& config);

/// Renders one image of an identity.
PersonImage render_person(const IdentitySpec& identity, std::size_t camera, std::size_t index, Split split,
                          const DataConfig& config);

DatasetStats dataset_stats(const Dataset& dataset);
/// Stats straight from a manifest file; throws FormatError when corrupt.
DatasetStats dataset_stats(const std::filesystem::path& manifest_path);

/// Identity and camera ids of `b` are offset past those of `a`.
Dataset concatenate(const Dataset& a, const Dataset& b);

/// Writes {dir}/manifest.json and one 8-bit P6 PPM per image.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

void write_ppm(const std::filesystem::path& path, const PersonImage& image);
std::vector<double> read_ppm(const std::filesystem::path& path);

/// Every caption, continuation, prompt and instruction the dialogues can use.
std::vector<std::string> text_corpus(const Dataset& dataset);

}  // namespace mllmreid::synth
