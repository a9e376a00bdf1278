#include "mllmreid/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mllmreid/error.hpp"
#include "mllmreid/prompts.hpp"

namespace mllmreid::synth {
namespace {

using Rgb = std::array<double, 3>;

constexpr std::array<Rgb, kPaletteSize> kPaletteRgb{{
    {0.85, 0.12, 0.10},  // red
    {0.95, 0.55, 0.10},  // orange
    {0.93, 0.88, 0.18},  // yellow
    {0.12, 0.62, 0.22},  // green
    {0.12, 0.25, 0.85},  // blue
    {0.55, 0.18, 0.70},  // purple
    {0.92, 0.92, 0.92},  // white
    {0.08, 0.08, 0.09},  // black
}};

constexpr Rgb kSkin{0.87, 0.70, 0.58};
constexpr Rgb kBagColor{0.45, 0.30, 0.15};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x6a09e667f3bcc909ULL;
  for (std::uint64_t p : parts) h = splitmix64(h ^ p);
  return h;
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

// Domain style 1 shifts hues towards the next channel and desaturates.
Rgb styled(const Rgb& c, int style) {
  if (style == 0) return c;
  const Rgb rot{0.55 * c[0] + 0.45 * c[2], 0.55 * c[1] + 0.45 * c[0], 0.55 * c[2] + 0.45 * c[1]};
  const double grey = (rot[0] + rot[1] + rot[2]) / 3.0;
  return {0.75 * rot[0] + 0.25 * grey, 0.75 * rot[1] + 0.25 * grey, 0.75 * rot[2] + 0.25 * grey};
}

struct CameraLook {
  Rgb background;
  Rgb cast;
  double brightness;
};

CameraLook camera_look(const DataConfig& cfg, std::size_t camera) {
  std::mt19937_64 rng(mix({cfg.seed, 0xCA3E7AULL, static_cast<std::uint64_t>(cfg.domain_style), camera}));
  CameraLook look{};
  if (cfg.domain_style == 0) {
    const double g = uniform(rng, 0.35, 0.65);
    look.background = {g + uniform(rng, -0.08, 0.08), g + uniform(rng, -0.08, 0.08), g + uniform(rng, -0.08, 0.08)};
    for (double& c : look.cast) c = uniform(rng, 0.88, 1.12);
    look.brightness = uniform(rng, -0.12, 0.12);
  } else {
    look.background = {uniform(rng, 0.15, 0.35), uniform(rng, 0.35, 0.6), uniform(rng, 0.15, 0.35)};
    for (double& c : look.cast) c = uniform(rng, 0.8, 1.2);
    look.brightness = uniform(rng, -0.2, 0.1);
  }
  return look;
}

double noise_sigma(int style) { return style == 0 ? 0.05 : 0.09; }

class Canvas {
 public:
  explicit Canvas(const Rgb& bg) : px_(kPixelCount) {
    for (std::size_t y = 0; y < kImageHeight; ++y) {
      const double shade = 1.0 - 0.25 * static_cast<double>(y) / kImageHeight;
      for (std::size_t x = 0; x < kImageWidth; ++x)
        for (std::size_t c = 0; c < kChannels; ++c) px_[(y * kImageWidth + x) * kChannels + c] = bg[c] * shade;
    }
  }
  void rect(int y0, int y1, int x0, int x1, const Rgb& color) {
    for (int y = std::max(0, y0); y < std::min<int>(kImageHeight, y1); ++y)
      for (int x = std::max(0, x0); x < std::min<int>(kImageWidth, x1); ++x)
        for (std::size_t c = 0; c < kChannels; ++c) px_[(y * kImageWidth + x) * kChannels + c] = color[c];
  }
  std::vector<double>& pixels() { return px_; }

 private:
  std::vector<double> px_;
};

std::string caption_clause_hat(Hat h) {
  switch (h) {
    case Hat::none:
      return "";
    case Hat::dark:
      return " and a dark hat";
    case Hat::light:
      return " and a light hat";
  }
  return "";
}

std::string caption_clause_bag(Bag b) {
  switch (b) {
    case Bag::none:
      return "";
    case Bag::left:
      return " carrying a bag on the left";
    case Bag::right:
      return " carrying a bag on the right";
  }
  return "";
}

constexpr std::array<std::string_view, kPaletteSize> kVerbs{"strides", "hurries", "wanders", "marches",
                                                           "drifts",  "ambles",  "saunters", "strolls"};

std::size_t palette_index(const std::string& name) {
  const auto it = std::find(kPalette.begin(), kPalette.end(), name);
  if (it == kPalette.end()) return kPaletteSize;
  return static_cast<std::size_t>(it - kPalette.begin());
}

}  // namespace

Attributes attributes_from_index(std::size_t index) {
  if (index >= kAttributeSpace) throw ValueError("attribute index out of range");
  Attributes a;
  a.shirt = static_cast<std::uint8_t>(index % kPaletteSize);
  index /= kPaletteSize;
  a.pants = static_cast<std::uint8_t>(index % kPaletteSize);
  index /= kPaletteSize;
  a.shoes = static_cast<std::uint8_t>(index % kPaletteSize);
  index /= kPaletteSize;
  a.hat = static_cast<Hat>(index % 3);
  index /= 3;
  a.bag = static_cast<Bag>(index % 3);
  index /= 3;
  a.build = static_cast<Build>(index % 2);
  return a;
}

std::size_t attributes_index(const Attributes& a) {
  std::size_t idx = static_cast<std::size_t>(a.build);
  idx = idx * 3 + static_cast<std::size_t>(a.bag);
  idx = idx * 3 + static_cast<std::size_t>(a.hat);
  idx = idx * kPaletteSize + a.shoes;
  idx = idx * kPaletteSize + a.pants;
  idx = idx * kPaletteSize + a.shirt;
  return idx;
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::query:
      return "query";
    case Split::gallery:
      return "gallery";
  }
  return "?";
}

std::string PersonImage::relative_path() const {
  return std::string(split_name(split)) + "/" + std::to_string(identity) + "_" + std::to_string(camera) + "_" +
         std::to_string(index) + ".ppm";
}

DatasetStats DatasetStats::operator+(const DatasetStats& o) const {
  return {id_q + o.id_q, id_g + o.id_g, id_t + o.id_t, img_q + o.img_q, img_g + o.img_g, img_t + o.img_t, cam_n + o.cam_n};
}

std::span<const ReferenceStats> reference_stats() {
  static const std::array<ReferenceStats, 4> table{{
      {"MSMT17", {3060, 3060, 1041, 11659, 82161, 32621, 15}},
      {"Market1501", {750, 750, 751, 3368, 19732, 12936, 6}},
      {"DukeMTMC", {702, 702, 702, 2228, 17661, 16522, 8}},
      {"CUHK03-NP", {700, 700, 767, 1400, 5332, 7365, 2}},
  }};
  return table;
}

const DatasetStats& reference_stats(std::string_view dataset) {
  for (const ReferenceStats& r : reference_stats())
    if (r.dataset == dataset) return r.stats;
  throw ValueError("no reference statistics for dataset '" + std::string(dataset) + "'");
}

std::string gen_caption(const Attributes& a) {
  std::string s = "a ";
  s += a.build == Build::slim ? "slim" : "broad";
  s += " person wearing a ";
  s += kPalette[a.shirt];
  s += " shirt and ";
  s += kPalette[a.pants];
  s += " pants with ";
  s += kPalette[a.shoes];
  s += " shoes";
  s += caption_clause_hat(a.hat);
  s += caption_clause_bag(a.bag);
  return s;
}

std::optional<Attributes> parse_caption(std::string_view caption) {
  static const std::regex re(
      R"(^a (slim|broad) person wearing a ([a-z]+) shirt and ([a-z]+) pants with ([a-z]+) shoes( and a (dark|light) hat)?( carrying a bag on the (left|right))?$)");
  const std::string norm = text::normalize(caption);
  std::smatch m;
  if (!std::regex_match(norm, m, re)) return std::nullopt;
  Attributes a;
  a.build = m[1] == "slim" ? Build::slim : Build::broad;
  const std::size_t s = palette_index(m[2]), p = palette_index(m[3]), h = palette_index(m[4]);
  if (s == kPaletteSize || p == kPaletteSize || h == kPaletteSize) return std::nullopt;
  a.shirt = static_cast<std::uint8_t>(s);
  a.pants = static_cast<std::uint8_t>(p);
  a.shoes = static_cast<std::uint8_t>(h);
  a.hat = !m[6].matched ? Hat::none : (m[6] == "dark" ? Hat::dark : Hat::light);
  a.bag = !m[8].matched ? Bag::none : (m[8] == "left" ? Bag::left : Bag::right);
  return a;
}

std::string gen_continuation(std::string_view caption) {
  const auto a = parse_caption(caption);
  if (!a) throw ValueError("gen_continuation: not a template caption: '" + std::string(caption) + "'");
  std::string s = a->build == Build::slim ? "slender" : "sturdy";
  s += " walker ";
  s += kVerbs[a->shirt];
  s += " on in ";
  s += kPalette[a->shirt];
  s += " top and ";
  s += kPalette[a->pants];
  s += " trousers over ";
  s += kPalette[a->shoes];
  s += " boots";
  if (a->hat == Hat::dark) s += " under dark cap";
  if (a->hat == Hat::light) s += " under pale cap";
  if (a->bag == Bag::left) s += " bag swinging left";
  if (a->bag == Bag::right) s += " bag swinging right";
  return s;
}

ContinuationOracle ContinuationOracle::from_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read continuations file " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("continuations file " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw FormatError("continuations file " + path.string() + " must be a JSON object");
  std::map<std::string, std::string> m;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_string()) throw FormatError("continuation for '" + it.key() + "' is not a string");
    m.emplace(text::normalize(it.key()), it.value().get<std::string>());
  }
  return ContinuationOracle(std::move(m));
}

std::string ContinuationOracle::operator()(std::string_view caption) const {
  const auto it = external_.find(text::normalize(caption));
  if (it != external_.end()) return it->second;
  if (!parse_caption(caption)) {
    throw ValueError("no continuation available for caption '" + std::string(caption) + "'");
  }
  return gen_continuation(caption);
}

std::size_t word_count(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::size_t n = 0;
  for (std::string w; is >> w;) ++n;
  return n;
}

std::string_view dialogue_mode_name(DialogueMode m) {
  return m == DialogueMode::common_instruction ? "common_instruction" : "baseline_prompt";
}

DialogueMode parse_dialogue_mode(std::string_view s) {
  if (s == "common_instruction") return DialogueMode::common_instruction;
  if (s == "baseline_prompt") return DialogueMode::baseline_prompt;
  throw ValueError("invalid dialogue mode '" + std::string(s) + "'");
}

text::DialogueSample build_dialogue(std::size_t image_index, std::string_view caption, std::string_view continuation,
                                    DialogueMode mode, std::mt19937_64& rng, std::size_t turns,
                                    std::size_t* prompt_used) {
  if (word_count(continuation) == 0) throw ValueError("build_dialogue: empty continuation");
  if (turns == 0) throw ValueError("build_dialogue: at least one turn is required");
  text::DialogueSample s;
  s.image_index = image_index;
  if (mode == DialogueMode::common_instruction) {
    s.turns.push_back({text::image_continuation_instruction(), std::string(continuation)});
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, text::kBaselinePrompts.size() - 1);
    const std::size_t k = pick(rng);
    if (prompt_used) *prompt_used = k;
    s.turns.push_back({"<Img> <ImageFeature> </Img> " + std::string(text::kBaselinePrompts[k]), std::string(caption)});
  }
  for (std::size_t t = 1; t < turns; ++t) {
    s.turns.push_back(
        {std::string(text::kTextContinuationInstruction) + " " + std::string(caption), std::string(continuation)});
  }
  return s;
}

std::vector<std::size_t> Dataset::train_identity_ids() const {
  std::set<std::size_t> ids;
  for (std::size_t i : train) ids.insert(images[i].identity);
  return {ids.begin(), ids.end()};
}

PersonImage render_person(const IdentitySpec& identity, std::size_t camera, std::size_t index, Split split,
                          const DataConfig& cfg) {
  const CameraLook look = camera_look(cfg, camera);
  std::mt19937_64 rng(mix({cfg.seed, static_cast<std::uint64_t>(cfg.domain_style), identity.id, camera, index}));
  const Attributes& a = identity.attributes;

  Rgb bg = look.background;
  for (double& c : bg) c = std::clamp(c + uniform(rng, -0.05, 0.05), 0.0, 1.0);
  Canvas cv(bg);

  const int dx = std::uniform_int_distribution<int>(-3, 3)(rng);
  const int dy = std::uniform_int_distribution<int>(-3, 3)(rng);
  const int cx = 16 + dx;
  const int torso_half = a.build == Build::slim ? 5 : 7;
  const int leg_w = a.build == Build::slim ? 4 : 5;
  const Rgb shirt = styled(kPaletteRgb[a.shirt], cfg.domain_style);
  const Rgb pants = styled(kPaletteRgb[a.pants], cfg.domain_style);
  const Rgb shoes = styled(kPaletteRgb[a.shoes], cfg.domain_style);

  cv.rect(6 + dy, 15 + dy, cx - 4, cx + 4, kSkin);  // head
  if (a.hat != Hat::none) {
    const double v = a.hat == Hat::dark ? 0.15 : 0.88;
    cv.rect(3 + dy, 8 + dy, cx - 5, cx + 5, styled({v, v, v}, cfg.domain_style));
  }
  cv.rect(15 + dy, 37 + dy, cx - torso_half, cx + torso_half, shirt);                     // torso
  cv.rect(16 + dy, 34 + dy, cx - torso_half - 3, cx - torso_half, shirt);                 // arms
  cv.rect(16 + dy, 34 + dy, cx + torso_half, cx + torso_half + 3, shirt);
  cv.rect(34 + dy, 37 + dy, cx - torso_half - 3, cx - torso_half, kSkin);                 // hands
  cv.rect(34 + dy, 37 + dy, cx + torso_half, cx + torso_half + 3, kSkin);
  cv.rect(37 + dy, 57 + dy, cx - 1 - leg_w, cx - 1, pants);                                // legs
  cv.rect(37 + dy, 57 + dy, cx + 1, cx + 1 + leg_w, pants);
  cv.rect(57 + dy, 61 + dy, cx - 2 - leg_w, cx - 1, shoes);                                // shoes
  cv.rect(57 + dy, 61 + dy, cx + 1, cx + 2 + leg_w, shoes);
  if (a.bag == Bag::left) cv.rect(24 + dy, 40 + dy, cx - torso_half - 8, cx - torso_half - 3, kBagColor);
  if (a.bag == Bag::right) cv.rect(24 + dy, 40 + dy, cx + torso_half + 3, cx + torso_half + 8, kBagColor);

  const double jitter = uniform(rng, -0.04, 0.04);
  std::normal_distribution<double> noise(0.0, noise_sigma(cfg.domain_style));
  PersonImage img;
  img.pixels = std::move(cv.pixels());
  for (std::size_t i = 0; i < kPixelCount; ++i) {
    const double v = img.pixels[i] * look.cast[i % kChannels] + look.brightness + jitter + noise(rng);
    img.pixels[i] = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  }
  img.identity = identity.id;
  img.camera = camera;
  img.index = index;
  img.split = split;
  return img;
}

Dataset build_dataset(const DataConfig& cfg) {
  if (cfg.cams < 2) throw ValueError("build_dataset: at least 2 cameras are required");
  if (cfg.imgs_per_id < 2) throw ValueError("build_dataset: at least 2 images per identity are required");
  const std::size_t total = cfg.num_train_ids + cfg.num_eval_ids;
  if (total > kAttributeSpace) {
    throw ValueError("build_dataset: " + std::to_string(total) + " identities exhaust the attribute space of " +
                     std::to_string(kAttributeSpace));
  }

  Dataset ds;
  ds.config = cfg;
  ds.num_cameras = cfg.cams;
  // Identity attributes: a seeded partial shuffle of the attribute grid.
  std::vector<std::size_t> grid(kAttributeSpace);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = i;
  std::mt19937_64 rng(mix({cfg.seed, 0x1D5ULL}));
  for (std::size_t i = 0; i < total; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, grid.size() - 1);
    std::swap(grid[i], grid[pick(rng)]);
  }
  const ContinuationOracle oracle =
      cfg.continuations_file ? ContinuationOracle::from_file(*cfg.continuations_file) : ContinuationOracle();
  for (std::size_t id = 0; id < total; ++id) {
    IdentitySpec spec{id, attributes_from_index(grid[id])};
    const std::string caption = gen_caption(spec.attributes);
    ds.captions[id] = caption;
    ds.continuations[id] = oracle(caption);
    ds.identities.push_back(spec);
  }

  const std::size_t queries_per_id = cfg.imgs_per_id >= 4 ? 2 : 1;
  for (const IdentitySpec& spec : ds.identities) {
    const bool is_train = spec.id < cfg.num_train_ids;
    for (std::size_t idx = 0; idx < cfg.imgs_per_id; ++idx) {
      const std::size_t cam = (idx + spec.id) % cfg.cams;
      const Split split = is_train ? Split::train : (idx < queries_per_id ? Split::query : Split::gallery);
      ds.images.push_back(render_person(spec, cam, idx, split, cfg));
      auto& bucket = split == Split::train ? ds.train : (split == Split::query ? ds.query : ds.gallery);
      bucket.push_back(ds.images.size() - 1);
    }
  }
  return ds;
}

DatasetStats dataset_stats(const Dataset& ds) {
  std::set<std::size_t> q, g, t, cams;
  DatasetStats s;
  for (const PersonImage& img : ds.images) {
    cams.insert(img.camera);
    switch (img.split) {
      case Split::train:
        t.insert(img.identity);
        ++s.img_t;
        break;
      case Split::query:
        q.insert(img.identity);
        ++s.img_q;
        break;
      case Split::gallery:
        g.insert(img.identity);
        ++s.img_g;
        break;
    }
  }
  s.id_q = q.size();
  s.id_g = g.size();
  s.id_t = t.size();
  s.cam_n = std::max(cams.size(), ds.num_cameras);
  return s;
}

Dataset concatenate(const Dataset& a, const Dataset& b) {
  std::size_t id_offset = 0;
  for (const IdentitySpec& s : a.identities) id_offset = std::max(id_offset, s.id + 1);
  const std::size_t cam_offset = a.num_cameras;
  Dataset out = a;
  out.num_cameras = a.num_cameras + b.num_cameras;
  for (IdentitySpec s : b.identities) {
    out.captions[s.id + id_offset] = b.captions.at(s.id);
    out.continuations[s.id + id_offset] = b.continuations.at(s.id);
    s.id += id_offset;
    out.identities.push_back(s);
  }
  for (PersonImage img : b.images) {
    img.identity += id_offset;
    img.camera += cam_offset;
    out.images.push_back(std::move(img));
    const std::size_t i = out.images.size() - 1;
    auto& bucket = out.images[i].split == Split::train ? out.train
                   : out.images[i].split == Split::query ? out.query
                                                         : out.gallery;
    bucket.push_back(i);
  }
  return out;
}

void write_ppm(const std::filesystem::path& path, const PersonImage& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << "P6\n" << kImageWidth << ' ' << kImageHeight << "\n255\n";
  std::string bytes(kPixelCount, '\0');
  for (std::size_t i = 0; i < kPixelCount; ++i)
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(image.pixels[i] * 255.0)));
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<double> read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxv = 0;
  is >> magic >> w >> h >> maxv;
  if (magic != "P6" || w != kImageWidth || h != kImageHeight || maxv != 255) {
    throw FormatError(path.string() + ": expected a 32x64 8-bit P6 image");
  }
  is.get();
  std::string bytes(kPixelCount, '\0');
  if (!is.read(bytes.data(), static_cast<std::streamsize>(bytes.size()))) throw FormatError(path.string() + ": truncated");
  std::vector<double> px(kPixelCount);
  for (std::size_t i = 0; i < kPixelCount; ++i) px[i] = static_cast<unsigned char>(bytes[i]) / 255.0;
  return px;
}

namespace {

nlohmann::json attributes_json(const Attributes& a) {
  return {{"shirt", kPalette[a.shirt]},
          {"pants", kPalette[a.pants]},
          {"shoes", kPalette[a.shoes]},
          {"hat", a.hat == Hat::none ? "none" : (a.hat == Hat::dark ? "dark" : "light")},
          {"bag", a.bag == Bag::none ? "none" : (a.bag == Bag::left ? "left" : "right")},
          {"build", a.build == Build::slim ? "slim" : "broad"}};
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "query") return Split::query;
  if (s == "gallery") return Split::gallery;
  throw FormatError("manifest: unknown split '" + s + "'");
}

nlohmann::json read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot read manifest " + path.string());
  try {
    nlohmann::json j;
    is >> j;
    if (!j.is_object() || !j.contains("format_version") || !j.contains("images") || !j.contains("config")) {
      throw FormatError("manifest " + path.string() + " is missing required keys");
    }
    if (j["format_version"].get<int>() != kDatasetFormatVersion) {
      throw FormatError("manifest " + path.string() + ": unsupported format_version");
    }
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  for (Split s : {Split::train, Split::query, Split::gallery}) fs::create_directories(dir / split_name(s));
  nlohmann::json images = nlohmann::json::array();
  for (const PersonImage& img : ds.images) {
    write_ppm(dir / img.relative_path(), img);
    images.push_back({{"path", img.relative_path()},
                      {"id", img.identity},
                      {"cam", img.camera},
                      {"index", img.index},
                      {"split", split_name(img.split)}});
  }
  nlohmann::json identities = nlohmann::json::array();
  for (const IdentitySpec& s : ds.identities) {
    identities.push_back({{"id", s.id},
                          {"attributes", attributes_json(s.attributes)},
                          {"attribute_index", attributes_index(s.attributes)},
                          {"caption", ds.captions.at(s.id)},
                          {"continuation", ds.continuations.at(s.id)}});
  }
  const DataConfig& c = ds.config;
  nlohmann::json cfg = {{"num_train_ids", c.num_train_ids}, {"num_eval_ids", c.num_eval_ids},
                        {"imgs_per_id", c.imgs_per_id},     {"cams", c.cams},
                        {"seed", c.seed},                   {"domain_style", c.domain_style}};
  if (c.continuations_file) cfg["continuations_file"] = c.continuations_file->string();
  const DatasetStats st = dataset_stats(ds);
  nlohmann::json j = {{"format_version", kDatasetFormatVersion},
                      {"config", cfg},
                      {"num_cameras", ds.num_cameras},
                      {"identities", identities},
                      {"images", images},
                      {"stats",
                       {{"ID_q", st.id_q},
                        {"ID_g", st.id_g},
                        {"ID_t", st.id_t},
                        {"IMG_q", st.img_q},
                        {"IMG_g", st.img_g},
                        {"IMG_t", st.img_t},
                        {"CAM_n", st.cam_n}}}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw Error("cannot write manifest in " + dir.string());
  os << j.dump(1) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const nlohmann::json j = read_manifest(dir / "manifest.json");
  Dataset ds;
  try {
    const auto& c = j.at("config");
    ds.config.num_train_ids = c.at("num_train_ids").get<std::size_t>();
    ds.config.num_eval_ids = c.at("num_eval_ids").get<std::size_t>();
    ds.config.imgs_per_id = c.at("imgs_per_id").get<std::size_t>();
    ds.config.cams = c.at("cams").get<std::size_t>();
    ds.config.seed = c.at("seed").get<std::uint64_t>();
    ds.config.domain_style = c.at("domain_style").get<int>();
    if (c.contains("continuations_file")) ds.config.continuations_file = c["continuations_file"].get<std::string>();
    ds.num_cameras = j.at("num_cameras").get<std::size_t>();
    for (const auto& r : j.at("identities")) {
      IdentitySpec s{r.at("id").get<std::size_t>(), attributes_from_index(r.at("attribute_index").get<std::size_t>())};
      ds.captions[s.id] = r.at("caption").get<std::string>();
      ds.continuations[s.id] = r.at("continuation").get<std::string>();
      ds.identities.push_back(s);
    }
    for (const auto& r : j.at("images")) {
      PersonImage img;
      img.identity = r.at("id").get<std::size_t>();
      img.camera = r.at("cam").get<std::size_t>();
      img.index = r.at("index").get<std::size_t>();
      img.split = parse_split(r.at("split").get<std::string>());
      img.pixels = read_ppm(dir / r.at("path").get<std::string>());
      ds.images.push_back(std::move(img));
      const std::size_t i = ds.images.size() - 1;
      auto& bucket = ds.images[i].split == Split::train ? ds.train
                     : ds.images[i].split == Split::query ? ds.query
                                                          : ds.gallery;
      bucket.push_back(i);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt manifest in " + dir.string() + ": " + e.what());
  }
  return ds;
}

DatasetStats dataset_stats(const std::filesystem::path& manifest_path) {
  const nlohmann::json j = read_manifest(manifest_path);
  DatasetStats s;
  try {
    std::set<std::size_t> q, g, t, cams;
    for (const auto& r : j.at("images")) {
      const std::size_t id = r.at("id").get<std::size_t>();
      cams.insert(r.at("cam").get<std::size_t>());
      const Split sp = parse_split(r.at("split").get<std::string>());
      if (sp == Split::train) t.insert(id), ++s.img_t;
      if (sp == Split::query) q.insert(id), ++s.img_q;
      if (sp == Split::gallery) g.insert(id), ++s.img_g;
    }
    s.id_q = q.size();
    s.id_g = g.size();
    s.id_t = t.size();
    s.cam_n = std::max(cams.size(), j.at("num_cameras").get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt manifest " + manifest_path.string() + ": " + e.what());
  }
  return s;
}

std::vector<std::string> text_corpus(const Dataset& ds) {
  std::vector<std::string> corpus;
  for (const auto& [id, c] : ds.captions) corpus.push_back(c);
  for (const auto& [id, c] : ds.continuations) corpus.push_back(c);
  for (std::string_view p : text::kBaselinePrompts) corpus.emplace_back(p);
  corpus.push_back(text::image_continuation_instruction());
  corpus.emplace_back(text::kTextContinuationInstruction);
  return corpus;
}

}  // namespace mllmreid::synth
