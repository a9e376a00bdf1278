#include "mllmreid/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "mllmreid/eval.hpp"
#include "mllmreid/gradcheck.hpp"
#include "mllmreid/losses.hpp"
#include "mllmreid/models.hpp"
#include "mllmreid/ops.hpp"
#include "mllmreid/synthdata.hpp"
#include "mllmreid/trainer.hpp"

namespace mllmreid::verify {
namespace {

using ad::Shape;
using ad::Tensor;

std::vector<double> normal(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = nd(rng);
  return v;
}

Tensor weighted(const Tensor& t, std::uint64_t seed) {
  return ad::sum(ad::mul(t, Tensor::constant(t.shape(), normal(t.numel(), seed))));
}

text::TokenSequence masked_seq(std::vector<std::size_t> ids, std::vector<std::uint8_t> mask) {
  text::TokenSequence s;
  s.ids = std::move(ids);
  s.loss_mask = std::move(mask);
  return s;
}

struct GradCase {
  std::string name;
  std::function<Tensor(std::vector<Tensor>&)> loss;
  std::vector<Shape> shapes;
};

std::vector<GradCase> grad_cases() {
  using namespace ad;
  const std::vector<std::size_t> ids{2, 0, 2, 4};
  const std::vector<std::size_t> rows{1, 3};
  const std::vector<std::vector<std::size_t>> groups{{0, 1}, {2}, {1, 3, 4}};
  const std::vector<std::size_t> targets{1, 0, 3, 2, 2, 1};
  const std::vector<double> mask{1, 0, 1, 1, 0, 1};
  const std::vector<std::size_t> flat{0, 5, 7, 7, 11};
  const std::vector<std::size_t> pk{0, 0, 1, 1, 2, 2, 3, 3};
  const std::vector<text::TokenSequence> seqs{masked_seq({1, 4, 3, 0}, {0, 1, 1, 0}),
                                              masked_seq({1, 2, 5, 6}, {0, 0, 1, 1})};
  const auto single = masked_seq({1, 3, 2, 4, 6}, {0, 1, 0, 1, 1});
  const std::vector<std::vector<std::size_t>> slots{{0, 1, 2}, {4, 5, 6}};
  return {
      {"matmul", [](auto& v) { return weighted(matmul(v[0], v[1]), 1); }, {Shape{3, 4}, Shape{4, 5}}},
      {"linear", [](auto& v) { return weighted(linear(v[0], v[1], v[2]), 2); }, {Shape{3, 4}, Shape{4, 5}, Shape{5}}},
      {"transpose", [](auto& v) { return weighted(transpose(v[0]), 3); }, {Shape{3, 4}}},
      {"add", [](auto& v) { return weighted(add(v[0], v[1]), 4); }, {Shape{3, 4}, Shape{3, 4}}},
      {"sub", [](auto& v) { return weighted(sub(v[0], v[1]), 5); }, {Shape{3, 4}, Shape{3, 4}}},
      {"mul", [](auto& v) { return weighted(mul(v[0], v[1]), 6); }, {Shape{3, 4}, Shape{3, 4}}},
      {"scale", [](auto& v) { return weighted(scale(v[0], -1.7), 7); }, {Shape{3, 4}}},
      {"add_scalar", [](auto& v) { return weighted(add_scalar(v[0], 0.4), 8); }, {Shape{3, 4}}},
      {"add_tiled", [](auto& v) { return weighted(add_tiled(v[0], v[1]), 9); }, {Shape{6, 4}, Shape{2, 4}}},
      {"sum", [](auto& v) { return sum(mul(v[0], v[0])); }, {Shape{3, 4}}},
      {"mean", [](auto& v) { return mean(mul(v[0], v[0])); }, {Shape{3, 4}}},
      {"relu", [](auto& v) { return weighted(relu(v[0]), 10); }, {Shape{4, 5}}},
      {"gelu", [](auto& v) { return weighted(gelu(v[0]), 11); }, {Shape{4, 5}}},
      {"layer_norm", [](auto& v) { return weighted(layer_norm(v[0], v[1], v[2]), 12); },
       {Shape{3, 8}, Shape{8}, Shape{8}}},
      {"attention_causal", [](auto& v) { return weighted(attention(v[0], 5, 2, true), 13); }, {Shape{10, 12}}},
      {"attention_full", [](auto& v) { return weighted(attention(v[0], 4, 2, false), 14); }, {Shape{8, 12}}},
      {"softmax_cross_entropy", [=](auto& v) { return softmax_cross_entropy(v[0], targets, mask); }, {Shape{6, 4}}},
      {"embedding", [=](auto& v) { return weighted(embedding(v[0], ids), 15); }, {Shape{5, 3}}},
      {"gather_rows", [=](auto& v) { return weighted(gather_rows(v[0], rows), 16); }, {Shape{4, 3}}},
      {"slice_rows", [](auto& v) { return weighted(slice_rows(v[0], 1, 2), 17); }, {Shape{4, 3}}},
      {"replace_rows", [=](auto& v) { return weighted(replace_rows(v[0], rows, v[1]), 18); },
       {Shape{4, 3}, Shape{2, 3}}},
      {"mean_rows_grouped", [=](auto& v) { return weighted(mean_rows_grouped(v[0], groups), 19); }, {Shape{5, 3}}},
      {"pairwise_distance", [](auto& v) { return weighted(pairwise_distance(v[0], v[1]), 20); },
       {Shape{4, 3}, Shape{5, 3}}},
      {"l2_normalize_rows", [](auto& v) { return weighted(l2_normalize_rows(v[0]), 21); }, {Shape{4, 3}}},
      {"gather_elements", [=](auto& v) { return weighted(gather_elements(v[0], flat), 22); }, {Shape{3, 4}}},
      {"project",
       [](auto& v) {
         model::Projection p{model::Linear{v[1], v[2]}};
         return weighted(model::project(v[0], p), 23);
       },
       {Shape{6, 4}, Shape{4, 5}, Shape{5}}},
      {"pool_image_latents", [=](auto& v) { return weighted(model::pool_image_latents(v[0], slots), 24); },
       {Shape{8, 3}}},
      {"lm_nll", [=](auto& v) { return loss::lm_nll(v[0], seqs, 4); }, {Shape{8, 7}}},
      {"lm_nll_single", [=](auto& v) { return loss::lm_nll(v[0], single); }, {Shape{5, 7}}},
      {"id_loss", [=](auto& v) { return loss::id_loss(v[0], pk); }, {Shape{8, 5}}},
      {"triplet_euclidean_mean", [=](auto& v) { return loss::triplet_loss(v[0], pk, {1.0}); }, {Shape{8, 3}}},
      {"triplet_euclidean_sum",
       [=](auto& v) { return loss::triplet_loss(v[0], pk, {1.0, loss::Distance::euclidean, loss::Reduction::sum}); },
       {Shape{8, 3}}},
      {"triplet_cosine",
       [=](auto& v) { return loss::triplet_loss(v[0], pk, {0.5, loss::Distance::cosine}); },
       {Shape{8, 3}}},
      {"overall_loss",
       [](auto& v) { return loss::overall_loss(sum(v[0]), sum(mul(v[1], v[1])), sum(v[2]), 0.3); },
       {Shape{2}, Shape{2}, Shape{2}}},
  };
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

// Straight enumeration of every (anchor, positive, negative) triple.
double enumerated_triplet(const std::vector<double>& e, std::size_t d, const std::vector<std::size_t>& labels,
                          double margin) {
  const std::size_t n = labels.size();
  auto dist = [&](std::size_t i, std::size_t j) {
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) s += (e[i * d + k] - e[j * d + k]) * (e[i * d + k] - e[j * d + k]);
    return std::sqrt(s);
  };
  double total = 0;
  for (std::size_t a = 0; a < n; ++a) {
    double worst = -1e300;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (std::size_t q = 0; q < n; ++q) {
        if (labels[q] == labels[a]) continue;
        worst = std::max(worst, margin + dist(a, p) - dist(a, q));
      }
    }
    total += std::max(0.0, worst);
  }
  return total / static_cast<double>(n);
}

eval::EmbeddingMatrix random_embeddings(std::size_t rows, std::size_t dim, std::size_t ids, std::size_t cams,
                                        std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> id(0, ids - 1), cam(0, cams - 1);
  std::normal_distribution<double> nd;
  eval::EmbeddingMatrix m;
  m.rows = rows;
  m.dim = dim;
  for (std::size_t r = 0; r < rows; ++r) {
    m.ids.push_back(id(rng));
    m.cams.push_back(cam(rng));
    for (std::size_t c = 0; c < dim; ++c) m.data.push_back(nd(rng));
  }
  return m;
}

double report_gap(const eval::EvalReport& a, const eval::EvalReport& b) {
  if (a.num_valid_queries != b.num_valid_queries || a.cmc.size() != b.cmc.size() ||
      a.per_query_ap.size() != b.per_query_ap.size())
    return INFINITY;
  double gap = std::max(std::abs(a.map - b.map), std::abs(a.rank1 - b.rank1));
  for (std::size_t k = 0; k < a.cmc.size(); ++k) gap = std::max(gap, std::abs(a.cmc[k] - b.cmc[k]));
  for (std::size_t k = 0; k < a.per_query_ap.size(); ++k)
    gap = std::max(gap, std::abs(a.per_query_ap[k] - b.per_query_ap[k]));
  return gap;
}

}  // namespace

CheckResult gradients(std::size_t seeds, double tolerance) {
  CheckResult r{"gradients", true, ""};
  double overall = 0.0;
  std::string worst_case;
  std::size_t cases = 0;
  for (const GradCase& c : grad_cases()) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
      std::vector<Tensor> in;
      for (std::size_t i = 0; i < c.shapes.size(); ++i) {
        const std::size_t n = ad::numel(c.shapes[i]);
        in.push_back(Tensor::parameter(c.shapes[i], normal(n, 7919 * seed + 31 * i + 5), c.name + std::to_string(i)));
      }
      worst = std::max(worst, ad::grad_check([&] { return c.loss(in); }, in, 1e-5));
    }
    ++cases;
    if (worst > overall) overall = worst, worst_case = c.name;
    if (worst > tolerance) {
      r.passed = false;
      r.detail += c.name + " rel err " + fmt(worst) + "; ";
    }
  }
  r.detail += std::to_string(cases) + " ops/losses x " + std::to_string(seeds) + " seeds, max rel err " +
              fmt(overall) + " (" + worst_case + ")";
  return r;
}

CheckResult loss_closed_forms() {
  CheckResult r{"loss closed forms", true, ""};
  auto fail = [&](const std::string& what) {
    r.passed = false;
    r.detail += what + "; ";
  };
  for (std::size_t classes : {2u, 10u, 751u}) {
    const std::vector<std::size_t> labels{0, classes - 1, classes / 2};
    const double v =
        loss::id_loss(Tensor::constant({3, classes}, std::vector<double>(3 * classes, 0.25)), labels).item();
    if (std::abs(v - std::log(static_cast<double>(classes))) > 1e-9) fail("uniform id_loss != ln C");
  }
  for (auto [P, K, m] : {std::tuple{4u, 4u, 0.5}, std::tuple{8u, 4u, 0.25}, std::tuple{2u, 2u, 2.0}}) {
    std::vector<std::size_t> labels;
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t k = 0; k < K; ++k) labels.push_back(p);
    const Tensor same = Tensor::constant({P * K, 3}, std::vector<double>(P * K * 3, 0.7));
    const double v = loss::triplet_loss(same, labels, {m, loss::Distance::euclidean, loss::Reduction::sum}).item();
    if (v != static_cast<double>(P * K) * m) fail("identical-embedding triplet sum != P*K*m");
  }
  for (std::size_t vocab : {5u, 163u, 256u}) {
    const auto seq = masked_seq({1, 2}, {0, 1});
    const double v = loss::lm_nll(Tensor::constant({2, vocab}, std::vector<double>(2 * vocab, -1.5)), seq).item();
    if (std::abs(v - std::log(static_cast<double>(vocab))) > 1e-9) fail("single uniform token lm_nll != ln V");
  }
  const double lm = 2.75, id = 1.25, tri = 0.5;
  if (loss::overall_loss(lm, id, tri, 1.0) != lm) fail("lambda=1 is not the LM term");
  if (loss::overall_loss(lm, id, tri, 0.0) != id + tri) fail("lambda=0 is not id + triplet");
  if (std::abs(loss::overall_loss(lm, id, tri, 0.3) - (0.3 * lm + 0.7 * (id + tri))) > 1e-12)
    fail("lambda=0.3 arithmetic");
  const Tensor tlm = Tensor::scalar(lm), tid = Tensor::scalar(id), ttri = Tensor::scalar(tri);
  if (loss::overall_loss(tlm, tid, ttri, 1.0).item() != lm || loss::overall_loss(tlm, tid, ttri, 0.0).item() != id + tri)
    fail("tensor overall_loss boundaries");
  if (std::abs(loss::overall_loss(tlm, tid, ttri, 0.3).item() - (0.3 * lm + 0.7 * (id + tri))) > 1e-12)
    fail("tensor overall_loss at lambda=0.3");
  if (r.passed) r.detail = "ln C, P*K*m, ln V and lambda in {0, 0.3, 1} all hold";
  return r;
}

CheckResult triplet_oracle(std::size_t batches) {
  CheckResult r{"triplet oracle", true, ""};
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> margin(0.1, 3.0);
  const std::vector<std::size_t> labels{0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3};
  double worst = 0.0;
  for (std::size_t b = 0; b < batches; ++b) {
    std::vector<std::size_t> shuffled = labels;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto e = normal(16 * 8, rng());
    const double m = margin(rng);
    const double got = loss::triplet_loss(Tensor::constant({16, 8}, e), shuffled, {m}).item();
    worst = std::max(worst, std::abs(got - enumerated_triplet(e, 8, shuffled, m)));
  }
  r.passed = worst <= 1e-10;
  r.detail = std::to_string(batches) + " batches (P=4, K=4, d=8), max abs diff " + fmt(worst);
  return r;
}

CheckResult metric_oracle(std::size_t instances) {
  CheckResult r{"metric oracle", true, ""};
  std::mt19937_64 rng(2718);
  double worst = 0.0;
  for (std::size_t i = 0; i < instances; ++i) {
    const auto q = random_embeddings(100, 8, 20, 4, rng);
    const auto g = random_embeddings(500, 8, 20, 4, rng);
    worst = std::max(worst, report_gap(eval::evaluate(q, g), eval::brute_force_oracle(q, g)));
  }
  if (worst > 1e-9) r.passed = false;

  // one-hot identity embeddings, each query seen from two other cameras
  eval::EmbeddingMatrix q, g;
  q.dim = g.dim = 10;
  for (std::size_t id = 0; id < 10; ++id) {
    std::vector<double> onehot(10, 0.0);
    onehot[id] = 1.0;
    q.data.insert(q.data.end(), onehot.begin(), onehot.end());
    q.ids.push_back(id);
    q.cams.push_back(0);
    for (std::size_t cam : {1u, 2u}) {
      g.data.insert(g.data.end(), onehot.begin(), onehot.end());
      g.ids.push_back(id);
      g.cams.push_back(cam);
    }
  }
  q.rows = q.ids.size();
  g.rows = g.ids.size();
  const auto perfect = eval::evaluate(q, g);
  const bool perfect_ok = perfect.map == 1.0 && perfect.rank1 == 1.0;

  eval::EmbeddingMatrix q1, g1;
  q1.rows = 1, q1.dim = 1, q1.data = {0.0}, q1.ids = {5}, q1.cams = {0};
  g1.rows = 4, g1.dim = 1, g1.data = {1, 2, 3, 4}, g1.ids = {5, 1, 5, 2}, g1.cams = {1, 1, 1, 1};
  const double ap = eval::evaluate(q1, g1).map;
  const bool ap_ok = std::abs(ap - 5.0 / 6.0) <= 1e-12;

  r.passed = r.passed && perfect_ok && ap_ok;
  r.detail = std::to_string(instances) + " instances (100 q x 500 g, 20 ids, 4 cams), max diff " + fmt(worst) +
             "; perfect mAP/R1 " + fmt(perfect.map) + "/" + fmt(perfect.rank1) + "; ranks-1-and-3 AP " + fmt(ap);
  return r;
}

CheckResult data_contracts() {
  CheckResult r{"data contracts", true, ""};
  const synth::DatasetStats& m = synth::reference_stats("Market1501");
  const bool market = m == synth::DatasetStats{750, 750, 751, 3368, 19732, 12936, 6};
  std::size_t longest = 0;
  for (std::size_t i = 0; i < synth::kAttributeSpace; ++i) {
    const std::string cont = synth::gen_continuation(synth::gen_caption(synth::attributes_from_index(i)));
    longest = std::max(longest, synth::word_count(cont));
  }
  r.passed = market && longest < 20;
  r.detail = std::string("Market1501 row ") + (market ? "matches" : "differs") + "; longest of " +
             std::to_string(synth::kAttributeSpace) + " continuations is " + std::to_string(longest) + " words";
  return r;
}

CheckResult syncreid_liveness() {
  CheckResult r{"syncreid liveness", true, ""};
  const synth::Dataset ds = synth::build_dataset(synth::DataConfig{});
  const text::Vocabulary vocab = text::build_vocab(synth::text_corpus(ds), 1);
  train::PretrainConfig cfg;
  cfg.recipe = train::Recipe::full;
  cfg.lambda = 0.3;
  cfg.stage.epochs = 0;  // initialized models only
  const model::VisualEncoderConfig enc_cfg;
  const auto init = train::train_stage1(ds, vocab, enc_cfg, model::CausalLMConfig{}, cfg);

  const auto index = train::IdentityIndex::from_split(ds, ds.train);
  std::mt19937_64 rng(1);
  const train::PKBatch batch = train::pk_sample(index, cfg.stage.P, cfg.stage.K, rng);
  std::vector<std::vector<double>> images;
  for (std::size_t i : batch.images) images.push_back(ds.images[i].pixels);
  const auto seqs = train::batch_dialogues(ds, batch, vocab, synth::DialogueMode::common_instruction, rng, 1,
                                           enc_cfg.num_patches());

  // Both passes keep lambda = 0.3 and replace one side of the objective with
  // a constant zero.
  enum class Zeroed { lm, reid };
  auto encoder_grad = [&](Zeroed zeroed) {
    for (auto& p : init.models.parameters()) p.zero_grad();
    auto l = train::stage1_losses(init.models, images, seqs, batch.labels, cfg.pooling, cfg.stage.triplet);
    auto zero = [](const Tensor& t) { return Tensor::constant(t.shape(), std::vector<double>(t.numel(), 0.0)); };
    if (zeroed == Zeroed::lm) {
      l.lm = zero(l.lm);
    } else {
      l.id = zero(l.id);
      l.tri = zero(l.tri);
    }
    ad::backward(loss::overall_loss(l.lm, l.id, l.tri, cfg.lambda));
    double s = 0;
    for (const auto& p : init.models.encoder.active_parameters())
      for (double g : p.grad()) s += g * g;
    return std::sqrt(s);
  };
  const double reid_only = encoder_grad(Zeroed::lm), lm_only = encoder_grad(Zeroed::reid);
  r.passed = reid_only > 0.0 && std::isfinite(reid_only) && lm_only > 0.0;
  r.detail = "encoder grad norm with LM term zeroed " + fmt(reid_only) + ", with ReID terms zeroed " + fmt(lm_only);
  return r;
}

std::vector<CheckResult> run_all(bool quick) {
  std::vector<CheckResult> out{gradients(), loss_closed_forms(), triplet_oracle(), metric_oracle(quick ? 10 : 50),
                               data_contracts()};
  if (!quick) out.push_back(syncreid_liveness());
  return out;
}

}  // namespace mllmreid::verify
