#include "mllmreid/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace mllmreid::cli {

// Default value at a dotted key (leaf or section).
const nlohmann::ordered_json& default_config_at(const std::string& dotted);

namespace {

using json = nlohmann::ordered_json;

json stage_defaults(std::size_t epochs) {
  return json{{"P", 8},        {"K", 4},           {"epochs", epochs}, {"max_steps", 0},
              {"lr", 3e-4},    {"weight_decay", 0.0}, {"clip_norm", 0.0}};
}

json make_defaults() {
  json d;
  d["seed"] = 0;
  d["data"] = json{{"train_ids", 100}, {"eval_ids", 50}, {"imgs_per_id", 8},
                   {"cams", 4},        {"target_style", 1}, {"continuations", nullptr}};
  d["model"] = json{
      {"encoder", {{"dim", 64}, {"layers", 2}, {"heads", 4}, {"mlp_ratio", 4}, {"patch", 8}, {"tap", "post"}}},
      {"lm", {{"dim", 64}, {"layers", 3}, {"heads", 4}, {"mlp_ratio", 4}, {"max_len", 160}, {"vocab", 256}}},
      {"pooling", "mean"}};
  d["train"] = json{{"recipe", "full"},
                    {"lambda", 0.3},
                    {"turns", 1},
                    {"margin", 0.3},
                    {"augment", {{"flip", true}, {"crop", true}, {"erase", true}}},
                    {"stage1", stage_defaults(5)},
                    {"stage2", stage_defaults(10)},
                    {"init", nullptr}};
  d["eval"] = json{{"metric", "euclidean"}, {"max_rank", 50}, {"cross_camera", true}, {"rank_list", 10}, {"seeds", 3},
                  {"checkpoint", nullptr}};
  return d;
}

std::string join(const std::string& prefix, const std::string& key) { return prefix.empty() ? key : prefix + "." + key; }

void collect_keys(const json& node, const std::string& prefix, std::vector<std::string>& out) {
  for (const auto& [k, v] : node.items()) {
    out.push_back(join(prefix, k));
    if (v.is_object()) collect_keys(v, join(prefix, k), out);
  }
}

std::string suggestion(const std::string& dotted) {
  std::vector<std::string> keys;
  collect_keys(default_config(), "", keys);
  std::string best;
  std::size_t best_d = 4;  // only close matches are worth suggesting
  for (const auto& k : keys) {
    const std::size_t d = levenshtein(dotted, k);
    if (d < best_d) best_d = d, best = k;
  }
  return best.empty() ? "" : " (did you mean '" + best + "'?)";
}

[[noreturn]] void unknown_key(const std::string& dotted) {
  throw ConfigError("unknown config key '" + dotted + "'" + suggestion(dotted));
}

json checked_value(const json& def, const json& v, const std::string& key) {
  auto bad = [&](const std::string& want) -> json {
    throw ConfigError("config key '" + key + "' expects " + want + ", got " + v.dump());
  };
  if (def.is_null()) return v.is_null() || v.is_string() ? v : bad("a string or null");
  if (def.is_boolean()) return v.is_boolean() ? v : bad("true or false");
  if (def.is_number_integer()) {
    if (v.is_number_unsigned()) return v;
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return v;
    if (v.is_number_float()) {
      const double f = v.get<double>();
      if (f >= 0 && f == static_cast<double>(static_cast<std::uint64_t>(f))) return json(static_cast<std::uint64_t>(f));
    }
    return bad("a non-negative integer");
  }
  if (def.is_number_float()) return v.is_number() ? json(v.get<double>()) : bad("a number");
  if (def.is_string()) return v.is_string() ? v : bad("a string");
  return bad("a value of the default's type");
}

void merge(json& dst, const json& src, const std::string& prefix) {
  for (const auto& [k, v] : src.items()) {
    const std::string key = join(prefix, k);
    if (!dst.contains(k)) unknown_key(key);
    json& slot = dst[k];
    if (slot.is_object()) {
      if (!v.is_object()) throw ConfigError("config key '" + key + "' is a section and expects an object");
      merge(slot, v, key);
    } else {
      slot = checked_value(default_config_at(key), v, key);
    }
  }
}

std::size_t line_of(const std::string& text, std::size_t byte) {
  const std::size_t end = std::min(byte == 0 ? 0 : byte - 1, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<long>(end), '\n'));
}

template <typename F>
auto choice(const std::string& key, F&& parse) {
  try {
    return parse();
  } catch (const ValueError& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

train::StageConfig stage(const json& s, const json& train) {
  train::StageConfig c;
  c.P = s["P"].get<std::size_t>();
  c.K = s["K"].get<std::size_t>();
  c.epochs = s["epochs"].get<std::size_t>();
  c.max_steps = s["max_steps"].get<std::size_t>();
  c.lr = s["lr"].get<double>();
  c.weight_decay = s["weight_decay"].get<double>();
  c.clip_norm = s["clip_norm"].get<double>();
  c.augment.flip = train["augment"]["flip"].get<bool>();
  c.augment.crop = train["augment"]["crop"].get<bool>();
  c.augment.erase = train["augment"]["erase"].get<bool>();
  c.triplet.margin = train["margin"].get<double>();
  return c;
}

}  // namespace

const json& default_config() {
  static const json d = make_defaults();
  return d;
}

std::size_t levenshtein(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

const json& default_config_at(const std::string& dotted) {
  const json* node = &default_config();
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) unknown_key(dotted);
    node = &(*node)[part];
  }
  return *node;
}

RunConfig::RunConfig() : doc_(default_config()) {}

RunConfig::RunConfig(json doc) : doc_(default_config()) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  merge(doc_, doc, "");
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  const json& def = default_config_at(key);
  if (def.is_object()) throw ConfigError("config key '" + key + "' is a section, not a value");
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &doc_;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) node = &(*node)[part];
  *node = checked_value(def, value, key);
}

std::uint64_t RunConfig::seed() const { return doc_["seed"].get<std::uint64_t>(); }

synth::DataConfig RunConfig::data() const {
  const json& d = doc_["data"];
  synth::DataConfig c;
  c.num_train_ids = d["train_ids"].get<std::size_t>();
  c.num_eval_ids = d["eval_ids"].get<std::size_t>();
  c.imgs_per_id = d["imgs_per_id"].get<std::size_t>();
  c.cams = d["cams"].get<std::size_t>();
  c.seed = seed();
  c.domain_style = 0;
  if (d["continuations"].is_string()) c.continuations_file = d["continuations"].get<std::string>();
  return c;
}

synth::DataConfig RunConfig::target_data() const {
  synth::DataConfig c = data();
  c.seed = seed() + 1000;
  c.domain_style = doc_["data"]["target_style"].get<int>();
  if (c.domain_style != 0 && c.domain_style != 1) throw ConfigError("config key 'data.target_style' must be 0 or 1");
  return c;
}

model::VisualEncoderConfig RunConfig::encoder() const {
  const json& e = doc_["model"]["encoder"];
  model::VisualEncoderConfig c;
  c.dim = e["dim"].get<std::size_t>();
  c.layers = e["layers"].get<std::size_t>();
  c.heads = e["heads"].get<std::size_t>();
  c.mlp_ratio = e["mlp_ratio"].get<std::size_t>();
  c.patch = e["patch"].get<std::size_t>();
  c.tap = choice("model.encoder.tap", [&] { return model::parse_tap_point(e["tap"].get<std::string>()); });
  choice("model.encoder", [&] { c.validate(); return 0; });
  return c;
}

model::CausalLMConfig RunConfig::lm() const {
  const json& l = doc_["model"]["lm"];
  model::CausalLMConfig c;
  c.dim = l["dim"].get<std::size_t>();
  c.layers = l["layers"].get<std::size_t>();
  c.heads = l["heads"].get<std::size_t>();
  c.mlp_ratio = l["mlp_ratio"].get<std::size_t>();
  c.max_len = l["max_len"].get<std::size_t>();
  c.vocab = l["vocab"].get<std::size_t>();
  choice("model.lm", [&] { c.validate(); return 0; });
  return c;
}

train::PretrainConfig RunConfig::pretrain() const {
  const json& t = doc_["train"];
  train::PretrainConfig c;
  c.stage = stage(t["stage1"], t);
  c.recipe = choice("train.recipe", [&] { return train::parse_recipe(t["recipe"].get<std::string>()); });
  c.lambda = t["lambda"].get<double>();
  if (!(c.lambda >= 0.0 && c.lambda <= 1.0)) throw ConfigError("config key 'train.lambda' must lie in [0, 1]");
  c.turns = t["turns"].get<std::size_t>();
  c.pooling = choice("model.pooling", [&] { return model::parse_pooling(doc_["model"]["pooling"].get<std::string>()); });
  c.seed = seed();
  return c;
}

train::ReidConfig RunConfig::reid() const {
  train::ReidConfig c;
  c.stage = stage(doc_["train"]["stage2"], doc_["train"]);
  c.seed = seed();
  return c;
}

eval::Protocol RunConfig::protocol() const {
  const json& e = doc_["eval"];
  eval::Protocol p;
  p.metric = choice("eval.metric", [&] { return eval::parse_metric(e["metric"].get<std::string>()); });
  p.max_rank = e["max_rank"].get<std::size_t>();
  if (p.max_rank == 0) throw ConfigError("config key 'eval.max_rank' must be positive");
  p.cross_camera = e["cross_camera"].get<bool>();
  return p;
}

std::size_t RunConfig::rank_list_top() const { return doc_["eval"]["rank_list"].get<std::size_t>(); }
std::size_t RunConfig::ablation_seeds() const { return doc_["eval"]["seeds"].get<std::size_t>(); }

std::optional<std::string> RunConfig::reid_init() const {
  const json& v = doc_["train"]["init"];
  if (v.is_null()) return std::nullopt;
  return v.get<std::string>();
}

std::optional<std::filesystem::path> RunConfig::eval_checkpoint() const {
  const json& v = doc_["eval"]["checkpoint"];
  if (v.is_null()) return std::nullopt;
  return std::filesystem::path(v.get<std::string>());
}

void RunConfig::resolve_paths() {
  auto absolute = [](json& v) {
    if (v.is_string()) v = std::filesystem::absolute(v.get<std::string>()).lexically_normal().string();
  };
  absolute(doc_["data"]["continuations"]);
  if (doc_["train"]["init"] != "fresh") absolute(doc_["train"]["init"]);
  absolute(doc_["eval"]["checkpoint"]);
}

RunConfig parse_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (path) {
    std::ifstream is(*path, std::ios::binary);
    if (!is) throw ConfigError("cannot read config file " + path->string());
    const std::string text((std::istreambuf_iterator<char>(is)), {});
    if (text.find_first_not_of(" \t\r\n") != std::string::npos) {
      json doc;
      try {
        doc = json::parse(text);
      } catch (const json::parse_error& e) {
        throw ConfigError(path->string() + ":" + std::to_string(line_of(text, e.byte)) + ": syntax error: " +
                          e.what());
      }
      cfg = RunConfig(std::move(doc));
    }
  }
  for (const auto& o : overrides) cfg.set(o);
  return cfg;
}

}  // namespace mllmreid::cli
