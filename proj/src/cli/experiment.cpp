#include "mllmreid/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "mllmreid/kernels.hpp"
#include "mllmreid/tokenizer.hpp"

namespace mllmreid::cli {
namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

constexpr int kManifestVersion = 1;

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string hex(const unsigned char* d, std::size_t n) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s;
  for (std::size_t i = 0; i < n; ++i) {
    s += digits[d[i] >> 4];
    s += digits[d[i] & 15];
  }
  return s;
}

json path_record(const fs::path& p) { return json{{"path", p.string()}, {"sha1", content_hash(p)}}; }

// Mean of the last (up to) ten values of one loss term.
json tail_mean(std::span<const train::StepRecord> h, std::optional<double> train::StepRecord::*term) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = h.size() > 10 ? h.size() - 10 : 0; i < h.size(); ++i) {
    if (const auto& v = h[i].*term) sum += *v, ++n;
  }
  return n == 0 ? json(nullptr) : json(sum / static_cast<double>(n));
}

train::StepCallback progress(const std::string& label, std::size_t total) {
  const std::size_t every = std::max<std::size_t>(1, total / 10);
  return [label, total, every](const train::StepRecord& r) {
    if (r.step % every != 0 && r.step != total) return;
    std::cout << label << " step " << r.step << '/' << total << " loss " << r.overall << std::endl;
  };
}

void check_same(const synth::DataConfig& want, const synth::DataConfig& have, const fs::path& dir) {
  const bool same = want.num_train_ids == have.num_train_ids && want.num_eval_ids == have.num_eval_ids &&
                    want.imgs_per_id == have.imgs_per_id && want.cams == have.cams && want.seed == have.seed &&
                    want.domain_style == have.domain_style && want.continuations_file == have.continuations_file;
  if (!same) {
    throw ConfigError("dataset in " + dir.string() +
                      " was generated from a different data config or seed; remove it or choose another --out");
  }
}

model::ModelSet load_models(const fs::path& path, ManifestEntry& entry, const std::string& name) {
  if (!fs::exists(path)) throw Error("checkpoint " + path.string() + " does not exist; run the producing step first");
  entry.input(name, path);
  return model::load_checkpoint(path);
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::vector<double> column(const AblationSummary& s, train::Recipe r, double AblationCell::*field) {
  std::vector<double> out;
  for (const auto& c : s.cells)
    if (c.recipe == r) out.push_back(c.*field);
  return out;
}

}  // namespace

std::string git_blob_sha1(std::string_view bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw Error("SHA-1 digest failed");
  }
  return hex(digest, len);
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path.string());
  return std::string((std::istreambuf_iterator<char>(is)), {});
}

std::string content_hash(const fs::path& path) {
  if (!fs::is_directory(path)) return git_blob_sha1(read_file(path));
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(path))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), path));
  std::sort(files.begin(), files.end());
  std::string listing;
  for (const auto& f : files) listing += f.generic_string() + ' ' + git_blob_sha1(read_file(path / f)) + '\n';
  return git_blob_sha1(listing);
}

void write_file_atomic(const fs::path& path, std::string_view content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp.string());
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!os) throw Error("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

Workspace::Workspace(const fs::path& out_dir) : Workspace(out_dir, out_dir / "data", out_dir / "data_target") {}

Workspace::Workspace(const fs::path& out_dir, const fs::path& data_dir, const fs::path& target_dir)
    : out(fs::absolute(out_dir).lexically_normal()),
      data(fs::absolute(data_dir).lexically_normal()),
      target(fs::absolute(target_dir).lexically_normal()) {}

ManifestEntry::ManifestEntry(std::string command, const Workspace& ws, const json& config)
    : command_(std::move(command)), path_(ws.out / "manifest.json"), config_(config) {}

void ManifestEntry::input(const std::string& name, const fs::path& path) { inputs_[name] = path_record(path); }
void ManifestEntry::artifact(const std::string& name, const fs::path& path) { artifacts_[name] = path_record(path); }
void ManifestEntry::timing(const std::string& phase, double seconds) { timings_[phase] = seconds; }
void ManifestEntry::metric(const std::string& name, json value) { metrics_[name] = std::move(value); }

void ManifestEntry::fail(int exit_code, const std::string& cause) {
  exit_code_ = exit_code;
  error_ = cause;
}

json ManifestEntry::to_json() const {
  std::string keyed = config_.dump();
  for (const auto& [name, rec] : inputs_.items()) keyed += '\n' + name + ' ' + rec["sha1"].get<std::string>();
  nlohmann::ordered_json j;
  j["command"] = command_;
  j["status"] = exit_code_ == 0 ? "ok" : "failed";
  j["exit_code"] = exit_code_;
  j["error"] = exit_code_ == 0 ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(error_);
  j["config"] = config_;
  j["input_hash"] = git_blob_sha1(keyed);
  j["inputs"] = inputs_;
  j["artifacts"] = artifacts_;
  j["timings_s"] = timings_;
  j["metrics"] = metrics_;
  j["kernels"] = std::string(kernels::isa_name(kernels::active().isa));
  return j;
}

void ManifestEntry::write() const {
  nlohmann::ordered_json doc;
  if (fs::exists(path_)) {
    doc = nlohmann::ordered_json::parse(read_file(path_), nullptr, false);
    if (doc.is_discarded() || !doc.is_object() || !doc.contains("commands") || !doc["commands"].is_object()) {
      doc = nlohmann::ordered_json();
    }
  }
  doc["format_version"] = kManifestVersion;
  doc["last_command"] = command_;
  doc["commands"][command_] = to_json();
  write_file_atomic(path_, doc.dump(2) + "\n");
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 1;
  if (dynamic_cast<const InvariantError*>(&e)) return 2;
  return 3;
}

synth::Dataset load_or_build(const fs::path& dir, const synth::DataConfig& config) {
  if (!fs::exists(dir / "manifest.json")) synth::save_dataset(synth::build_dataset(config), dir);
  synth::Dataset ds = synth::load_dataset(dir);
  check_same(config, ds.config, dir);
  return ds;
}

text::Vocabulary dataset_vocab(const synth::Dataset& ds) { return text::build_vocab(synth::text_corpus(ds)); }

void gen_data(const RunConfig& cfg, const Workspace& ws, ManifestEntry& entry) {
  Stopwatch sw;
  const synth::Dataset source = load_or_build(ws.data, cfg.data());
  const synth::Dataset target = load_or_build(ws.target, cfg.target_data());
  entry.timing("generate", sw.seconds());
  const fs::path vocab_path = ws.data / "vocab.txt";
  dataset_vocab(source).save(vocab_path);
  entry.artifact("data", ws.data);
  entry.artifact("data_target", ws.target);
  entry.artifact("vocab", vocab_path);
  auto stats = [](const synth::Dataset& ds) {
    const synth::DatasetStats s = synth::dataset_stats(ds);
    return nlohmann::ordered_json{{"id_train", s.id_t}, {"id_query", s.id_q}, {"id_gallery", s.id_g},
                                  {"img_train", s.img_t}, {"img_query", s.img_q}, {"img_gallery", s.img_g},
                                  {"cams", s.cam_n}};
  };
  entry.metric("source", stats(source));
  entry.metric("target", stats(target));
}

void pretrain(const RunConfig& cfg, const Workspace& ws, ManifestEntry& entry) {
  const synth::Dataset ds = load_or_build(ws.data, cfg.data());
  entry.input("data", ws.data);
  const text::Vocabulary vocab = dataset_vocab(ds);
  const train::PretrainConfig pc = cfg.pretrain();
  const std::size_t steps = pc.stage.steps(ds.train.size());

  Stopwatch sw;
  const train::PretrainResult res =
      train::train_stage1(ds, vocab, cfg.encoder(), cfg.lm(), pc, progress("pretrain", steps));
  entry.timing("train", sw.seconds());

  const fs::path ckpt = ws.checkpoint("stage1.ckpt"), losses = ws.out / "losses.jsonl";
  model::save_checkpoint(res.models, ckpt);
  train::write_loss_history(losses, res.history);
  entry.artifact("checkpoint", ckpt);
  entry.artifact("losses", losses);
  entry.metric("recipe", train::recipe_name(pc.recipe));
  entry.metric("lambda", train::recipe_lambda(pc.recipe, pc.lambda));
  entry.metric("steps", res.history.size());
  entry.metric("final_lm_nll", tail_mean(res.history, &train::StepRecord::lm_nll));
  entry.metric("final_id_loss", tail_mean(res.history, &train::StepRecord::id_loss));
  entry.metric("final_triplet_loss", tail_mean(res.history, &train::StepRecord::triplet_loss));
}

void train_reid(const RunConfig& cfg, const Workspace& ws, ManifestEntry& entry) {
  const synth::Dataset ds = load_or_build(ws.data, cfg.data());
  entry.input("data", ws.data);
  const std::optional<std::string> init = cfg.reid_init();
  model::VisualEncoder encoder;
  if (init == "fresh") {
    encoder = train::fresh_encoder(cfg.encoder(), cfg.seed());
  } else {
    encoder = load_models(init ? fs::path(*init) : ws.checkpoint("stage1.ckpt"), entry, "init").encoder;
  }
  const train::ReidConfig rc = cfg.reid();
  const std::size_t steps = rc.stage.steps(ds.train.size());

  Stopwatch sw;
  const train::ReidResult res = train::train_stage2(encoder, ds, rc, progress("train-reid", steps));
  entry.timing("train", sw.seconds());

  const fs::path ckpt = ws.checkpoint("reid.ckpt"), losses = ws.out / "losses_reid.jsonl";
  model::save_checkpoint(res.models, ckpt);
  train::write_loss_history(losses, res.history);
  entry.artifact("checkpoint", ckpt);
  entry.artifact("losses", losses);
  entry.metric("init", init ? json(*init) : json("stage1"));
  entry.metric("steps", res.history.size());
  entry.metric("final_id_loss", tail_mean(res.history, &train::StepRecord::id_loss));
  entry.metric("final_triplet_loss", tail_mean(res.history, &train::StepRecord::triplet_loss));
}

void evaluate(const RunConfig& cfg, const Workspace& ws, ManifestEntry& entry) {
  const fs::path ckpt = cfg.eval_checkpoint().value_or(ws.checkpoint("reid.ckpt"));
  const model::ModelSet models = load_models(ckpt, entry, "checkpoint");
  const synth::Dataset ds = load_or_build(ws.data, cfg.data());
  entry.input("data", ws.data);
  const eval::Protocol protocol = cfg.protocol();

  Stopwatch sw;
  const eval::EmbeddingMatrix q = eval::extract(models.encoder, ds, ds.query);
  const eval::EmbeddingMatrix g = eval::extract(models.encoder, ds, ds.gallery);
  const eval::EvalReport report = eval::evaluate(q, g, protocol);
  entry.timing("evaluate", sw.seconds());

  json j = eval::report_json(report);
  j["checkpoint_id"] = content_hash(ckpt);
  const fs::path report_path = ws.out / "eval.json", lists = ws.out / "rank_lists.txt";
  write_file_atomic(report_path, j.dump(2) + "\n");
  write_file_atomic(lists, eval::rank_lists(q, g, protocol, cfg.rank_list_top()));
  entry.artifact("report", report_path);
  entry.artifact("rank_lists", lists);
  entry.metric("map", report.map);
  entry.metric("rank1", report.rank1);
  std::cout << "eval mAP " << report.map << " rank-1 " << report.rank1 << std::endl;
}

void cross_evaluate(const RunConfig& cfg, const Workspace& ws, ManifestEntry& entry) {
  const fs::path ckpt = cfg.eval_checkpoint().value_or(ws.checkpoint("reid.ckpt"));
  const model::ModelSet models = load_models(ckpt, entry, "checkpoint");
  const synth::Dataset source = load_or_build(ws.data, cfg.data());
  const synth::Dataset target = load_or_build(ws.target, cfg.target_data());
  entry.input("data", ws.data);
  entry.input("data_target", ws.target);

  Stopwatch sw;
  const eval::CrossDatasetReport r = eval::cross_dataset_eval(models.encoder, source, target, cfg.protocol());
  entry.timing("evaluate", sw.seconds());

  json j;
  j["source"] = eval::report_json(r.source);
  j["target"] = eval::report_json(r.target);
  j["checkpoint_id"] = content_hash(ckpt);
  const fs::path report_path = ws.out / "cross_eval.json";
  write_file_atomic(report_path, j.dump(2) + "\n");
  entry.artifact("report", report_path);
  entry.metric("source_map", r.source.map);
  entry.metric("target_map", r.target.map);
  std::cout << "cross-eval mAP in-domain " << r.source.map << " shifted " << r.target.map << std::endl;
}

void run_step(const std::string& command, const RunConfig& cfg, const Workspace& ws,
              void (*step)(const RunConfig&, const Workspace&, ManifestEntry&)) {
  ManifestEntry entry(command, ws, cfg.doc());
  Stopwatch sw;
  try {
    step(cfg, ws, entry);
  } catch (const std::exception& e) {
    entry.fail(exit_code_for(e), e.what());
    entry.timing("total", sw.seconds());
    entry.write();
    throw;
  }
  entry.timing("total", sw.seconds());
  entry.write();
}

std::string ablation_row(train::Recipe r) {
  switch (r) {
    case train::Recipe::baseline: return "baseline";
    case train::Recipe::common: return "+common";
    case train::Recipe::syncreid: return "+syncreid";
    case train::Recipe::full: return "+both";
  }
  throw ValueError("unknown recipe");
}

AblationSummary ablate(const RunConfig& cfg, const Workspace& ws, std::size_t seeds, ManifestEntry& entry) {
  if (seeds == 0) throw ConfigError("ablation needs at least one seed");
  AblationSummary summary;
  summary.seeds = seeds;
  std::vector<std::vector<AblationCell>> by_recipe(train::kAllRecipes.size());
  Stopwatch total;
  for (std::size_t k = 0; k < seeds; ++k) {
    const std::uint64_t seed = cfg.seed() + k;
    const fs::path seed_dir = ws.out / "ablate" / ("seed" + std::to_string(k));
    for (std::size_t ri = 0; ri < train::kAllRecipes.size(); ++ri) {
      const train::Recipe recipe = train::kAllRecipes[ri];
      RunConfig sub = cfg;
      sub.set("seed=" + std::to_string(seed));
      sub.set("train.recipe=" + train::recipe_name(recipe));
      sub.set("train.init=null");
      sub.set("eval.checkpoint=null");
      const Workspace run(seed_dir / train::recipe_name(recipe), seed_dir / "data", seed_dir / "data_target");
      std::cout << "ablate: " << train::recipe_name(recipe) << " seed " << seed << std::endl;
      Stopwatch sw;
      run_step("pretrain", sub, run, pretrain);
      run_step("train-reid", sub, run, train_reid);
      run_step("eval", sub, run, evaluate);
      run_step("cross-eval", sub, run, cross_evaluate);
      const auto ev = nlohmann::ordered_json::parse(read_file(run.out / "eval.json"));
      const auto cross = nlohmann::ordered_json::parse(read_file(run.out / "cross_eval.json"));
      by_recipe[ri].push_back(AblationCell{recipe, seed, ev["map"].get<double>(), ev["rank1"].get<double>(),
                                           cross["target"]["map"].get<double>()});
      entry.timing(train::recipe_name(recipe) + "/seed" + std::to_string(k), sw.seconds());
    }
  }
  for (const auto& cells : by_recipe) summary.cells.insert(summary.cells.end(), cells.begin(), cells.end());
  entry.timing("grid", total.seconds());

  const fs::path js = ws.out / "ablation.json", md = ws.out / "ablation.md";
  write_file_atomic(js, ablation_json(summary).dump(2) + "\n");
  write_file_atomic(md, ablation_markdown(summary));
  entry.artifact("summary_json", js);
  entry.artifact("summary_md", md);
  entry.metric("ablation", ablation_json(summary)["rows"]);
  return summary;
}

nlohmann::ordered_json ablation_json(const AblationSummary& s) {
  json rows = json::array();
  for (train::Recipe r : train::kAllRecipes) {
    const auto maps = column(s, r, &AblationCell::map), r1 = column(s, r, &AblationCell::rank1),
               cross = column(s, r, &AblationCell::cross_map);
    json runs = json::array();
    for (const auto& c : s.cells)
      if (c.recipe == r) runs.push_back({{"seed", c.seed}, {"map", c.map}, {"rank1", c.rank1}, {"cross_map", c.cross_map}});
    rows.push_back({{"row", ablation_row(r)},
                    {"recipe", train::recipe_name(r)},
                    {"map_mean", mean(maps)},
                    {"map_sd", sample_sd(maps)},
                    {"rank1_mean", mean(r1)},
                    {"rank1_sd", sample_sd(r1)},
                    {"cross_map_mean", mean(cross)},
                    {"runs", runs}});
  }
  return json{{"seeds", s.seeds}, {"rows", rows}};
}

std::string ablation_markdown(const AblationSummary& s) {
  auto pct = [](double mean_v, double sd_v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f ± %.1f", 100.0 * mean_v, 100.0 * sd_v);
    return std::string(buf);
  };
  std::ostringstream os;
  os << "Held-out mAP and rank-1 (%), mean ± sd over " << s.seeds << " seed" << (s.seeds == 1 ? "" : "s") << ".\n\n";
  os << "| Variant | Recipe | mAP | R1 |\n|---|---|---|---|\n";
  for (train::Recipe r : train::kAllRecipes) {
    const auto maps = column(s, r, &AblationCell::map), r1 = column(s, r, &AblationCell::rank1);
    os << "| " << ablation_row(r) << " | " << train::recipe_name(r) << " | " << pct(mean(maps), sample_sd(maps))
       << " | " << pct(mean(r1), sample_sd(r1)) << " |\n";
  }
  return os.str();
}

}  // namespace mllmreid::cli
