#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "mllmreid/error.hpp"
#include "mllmreid/eval.hpp"
#include "mllmreid/trainer.hpp"
#include "test_util.hpp"

using namespace mllmreid;
using namespace mllmreid::eval;

namespace {

EmbeddingMatrix make(std::size_t dim, std::vector<double> data, std::vector<std::size_t> ids,
                     std::vector<std::size_t> cams) {
  EmbeddingMatrix m;
  m.rows = ids.size();
  m.dim = dim;
  m.data = std::move(data);
  m.ids = std::move(ids);
  m.cams = std::move(cams);
  return m;
}

EmbeddingMatrix random_matrix(std::size_t rows, std::size_t dim, std::size_t num_ids, std::size_t num_cams,
                              std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> id(0, num_ids - 1), cam(0, num_cams - 1);
  std::normal_distribution<double> nd;
  EmbeddingMatrix m;
  m.rows = rows;
  m.dim = dim;
  for (std::size_t r = 0; r < rows; ++r) {
    m.ids.push_back(id(rng));
    m.cams.push_back(cam(rng));
    for (std::size_t c = 0; c < dim; ++c) m.data.push_back(nd(rng));
  }
  return m;
}

void check_same(const EvalReport& a, const EvalReport& b, double tol) {
  REQUIRE(a.num_valid_queries == b.num_valid_queries);
  CHECK(a.valid_queries == b.valid_queries);
  CHECK(std::abs(a.map - b.map) <= tol);
  CHECK(std::abs(a.rank1 - b.rank1) <= tol);
  REQUIRE(a.cmc.size() == b.cmc.size());
  for (std::size_t k = 0; k < a.cmc.size(); ++k) CHECK(std::abs(a.cmc[k] - b.cmc[k]) <= tol);
  REQUIRE(a.per_query_ap.size() == b.per_query_ap.size());
  for (std::size_t i = 0; i < a.per_query_ap.size(); ++i) CHECK(std::abs(a.per_query_ap[i] - b.per_query_ap[i]) <= tol);
}

void check_report_invariants(const EvalReport& r) {
  CHECK(r.map >= 0.0);
  CHECK(r.map <= 1.0);
  CHECK(r.rank1 == r.cmc.front());
  for (std::size_t k = 1; k < r.cmc.size(); ++k) CHECK(r.cmc[k] >= r.cmc[k - 1]);
  for (double ap : r.per_query_ap) {
    CHECK(ap >= 0.0);
    CHECK(ap <= 1.0);
  }
  const double mean = std::accumulate(r.per_query_ap.begin(), r.per_query_ap.end(), 0.0) /
                      static_cast<double>(r.per_query_ap.size());
  CHECK(std::abs(mean - r.map) <= 1e-15);
}

}  // namespace

TEST_CASE("distance_matrix basics") {
  const auto a = make(2, {1, 0}, {0}, {0});
  const auto b = make(2, {0, 1}, {0}, {1});
  CHECK(distance_matrix(a, a, Metric::euclidean)[0] == 0.0);
  CHECK(std::abs(distance_matrix(a, b, Metric::euclidean)[0] - std::sqrt(2.0)) <= 1e-15);
  CHECK(std::abs(distance_matrix(a, b, Metric::cosine)[0] - 1.0) <= 1e-15);
  CHECK(std::abs(distance_matrix(a, a, Metric::cosine)[0]) <= 1e-15);

  const auto c = make(3, {1, 2, 3}, {0}, {0});
  CHECK_THROWS_AS(distance_matrix(a, c, Metric::euclidean), ShapeError);
}

TEST_CASE("distance_matrix matches a naive loop and is symmetric on itself") {
  std::mt19937_64 rng(5);
  const auto q = random_matrix(17, 11, 4, 2, rng);
  const auto g = random_matrix(23, 11, 4, 2, rng);
  for (Metric metric : {Metric::euclidean, Metric::cosine}) {
    const auto d = distance_matrix(q, g, metric);
    for (std::size_t i = 0; i < q.rows; ++i) {
      for (std::size_t j = 0; j < g.rows; ++j) {
        double s = 0, dot = 0, nq = 0, ng = 0;
        for (std::size_t c = 0; c < q.dim; ++c) {
          const double x = q.data[i * q.dim + c], y = g.data[j * g.dim + c];
          s += (x - y) * (x - y);
          dot += x * y;
          nq += x * x;
          ng += y * y;
        }
        const double want = metric == Metric::euclidean ? std::sqrt(s) : 1.0 - dot / std::sqrt(nq * ng);
        CHECK(std::abs(d[i * g.rows + j] - want) <= 1e-10);
      }
    }
    const auto self = distance_matrix(q, q, metric);
    for (std::size_t i = 0; i < q.rows; ++i)
      for (std::size_t j = 0; j < q.rows; ++j) CHECK(self[i * q.rows + j] == self[j * q.rows + i]);
  }
}

TEST_CASE("embedding matrices are validated") {
  auto m = make(2, {1, 2, 3}, {0}, {0});
  CHECK_THROWS_AS(m.validate(), ShapeError);
  m = make(2, {1, NAN}, {0}, {0});
  CHECK_THROWS_AS(m.validate(), NumericError);
  m = make(2, {1, 2}, {0, 1}, {0});
  CHECK_THROWS_AS(m.validate(), ShapeError);
}

TEST_CASE("one-hot identity embeddings retrieve perfectly") {
  const std::size_t ids = 6;
  EmbeddingMatrix q, g;
  q.dim = g.dim = ids;
  for (std::size_t id = 0; id < ids; ++id) {
    std::vector<double> onehot(ids, 0.0);
    onehot[id] = 1.0;
    q.data.insert(q.data.end(), onehot.begin(), onehot.end());
    q.ids.push_back(id);
    q.cams.push_back(0);
    for (std::size_t cam = 1; cam <= 3; ++cam) {
      g.data.insert(g.data.end(), onehot.begin(), onehot.end());
      g.ids.push_back(id);
      g.cams.push_back(cam);
    }
  }
  q.rows = q.ids.size();
  g.rows = g.ids.size();
  for (Metric metric : {Metric::euclidean, Metric::cosine}) {
    Protocol p;
    p.metric = metric;
    const auto r = evaluate(q, g, p);
    CHECK(r.map == 1.0);
    CHECK(r.rank1 == 1.0);
    CHECK(r.num_valid_queries == ids);
  }
}

TEST_CASE("relevant items at ranks 1 and 3 give AP 5/6") {
  // gallery distances from the query at 0 are 1, 2, 3, 4
  const auto q = make(1, {0.0}, {7}, {0});
  const auto g = make(1, {1.0, 2.0, 3.0, 4.0}, {7, 1, 7, 2}, {1, 1, 2, 3});
  const auto r = evaluate(q, g);
  REQUIRE(r.per_query_ap.size() == 1);
  CHECK(std::abs(r.per_query_ap[0] - 5.0 / 6.0) <= 1e-12);
  CHECK(std::abs(r.map - 5.0 / 6.0) <= 1e-12);
  CHECK(r.rank1 == 1.0);
  check_same(r, brute_force_oracle(q, g), 1e-12);
}

TEST_CASE("same-id same-camera gallery items are excluded") {
  // The nearest match shares the query's camera and must be skipped.
  const auto q = make(1, {0.0}, {3}, {0});
  const auto g = make(1, {0.5, 1.0, 2.0}, {3, 9, 3}, {0, 0, 1});
  const auto r = evaluate(q, g);
  CHECK(std::abs(r.map - 0.5) <= 1e-15);
  CHECK(r.rank1 == 0.0);
  CHECK(r.cmc[1] == 1.0);

  Protocol open;
  open.cross_camera = false;
  CHECK(evaluate(q, g, open).map == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-14));
}

TEST_CASE("evaluate matches the brute-force oracle on random instances") {
  std::mt19937_64 rng(2024);
  for (int inst = 0; inst < 50; ++inst) {
    const auto q = random_matrix(100, 8, 20, 4, rng);
    const auto g = random_matrix(500, 8, 20, 4, rng);
    Protocol p;
    p.metric = inst % 5 == 4 ? Metric::cosine : Metric::euclidean;
    const auto r = evaluate(q, g, p);
    check_same(r, brute_force_oracle(q, g, p), 1e-9);
    check_report_invariants(r);
  }
}

TEST_CASE("all-identical embeddings reduce to gallery-index tie-breaking") {
  std::mt19937_64 rng(9);
  auto q = random_matrix(30, 4, 5, 3, rng);
  auto g = random_matrix(80, 4, 5, 3, rng);
  std::fill(q.data.begin(), q.data.end(), 0.25);
  std::fill(g.data.begin(), g.data.end(), 0.25);
  const auto r = evaluate(q, g);
  check_same(r, brute_force_oracle(q, g), 1e-12);
  check_report_invariants(r);
}

TEST_CASE("queries without a valid match are skipped, and none at all is an error") {
  const auto q = make(1, {0.0, 5.0}, {1, 2}, {0, 0});
  // identity 2 only appears under the query's own camera
  const auto g = make(1, {1.0, 2.0, 6.0}, {1, 3, 2}, {1, 1, 0});
  const auto r = evaluate(q, g);
  CHECK(r.num_queries == 2);
  CHECK(r.num_valid_queries == 1);
  CHECK(r.valid_queries == std::vector<std::size_t>{0});
  check_same(r, brute_force_oracle(q, g), 1e-12);

  const auto lonely = make(1, {5.0}, {2}, {0});
  CHECK_THROWS_AS(evaluate(lonely, g), ValueError);
  CHECK(brute_force_oracle(lonely, g).num_valid_queries == 0);
}

TEST_CASE("permuting the gallery leaves metrics unchanged") {
  std::mt19937_64 rng(77);
  const auto q = random_matrix(40, 6, 10, 4, rng);
  const auto g = random_matrix(200, 6, 10, 4, rng);
  std::vector<std::size_t> perm(g.rows);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  EmbeddingMatrix h;
  h.rows = g.rows;
  h.dim = g.dim;
  for (std::size_t i : perm) {
    h.data.insert(h.data.end(), g.data.begin() + i * g.dim, g.data.begin() + (i + 1) * g.dim);
    h.ids.push_back(g.ids[i]);
    h.cams.push_back(g.cams[i]);
  }
  check_same(evaluate(q, g), evaluate(q, h), 1e-12);
}

TEST_CASE("a far irrelevant gallery item changes no AP") {
  std::mt19937_64 rng(31);
  const auto q = random_matrix(40, 6, 10, 4, rng);
  auto g = random_matrix(200, 6, 10, 4, rng);
  const auto before = evaluate(q, g);
  g.rows += 1;
  g.ids.push_back(999);
  g.cams.push_back(0);
  for (std::size_t c = 0; c < g.dim; ++c) g.data.push_back(1e6);
  const auto after = evaluate(q, g);
  REQUIRE(after.per_query_ap.size() == before.per_query_ap.size());
  for (std::size_t i = 0; i < after.per_query_ap.size(); ++i) CHECK(after.per_query_ap[i] == before.per_query_ap[i]);
}

TEST_CASE("report json and rank lists") {
  const auto q = make(1, {0.0}, {7}, {0});
  const auto g = make(1, {1.0, 2.0, 3.0}, {7, 1, 7}, {1, 1, 2});
  const auto r = evaluate(q, g);
  const auto j = report_json(r);
  CHECK(j["map"].get<double>() == r.map);
  CHECK(j["cmc"].size() == 50);
  CHECK(j["num_valid_queries"] == 1);
  CHECK(j["protocol"] == "metric=euclidean;exclude=same_id_same_cam;ties=gallery_index;max_rank=50");
  const auto text = rank_lists(q, g, {}, 2);
  CHECK(text == "query 0 id=7 cam=0: +7/1@1 -1/1@2\n");
  CHECK_THROWS_AS(parse_metric("manhattan"), ValueError);
}

TEST_CASE("cross-dataset harness agrees with plain evaluation on the source") {
  synth::DataConfig dc;
  dc.num_train_ids = 4;
  dc.num_eval_ids = 6;
  dc.imgs_per_id = 4;
  const auto source = synth::build_dataset(dc);
  dc.domain_style = 1;
  dc.seed = 1;
  const auto target = synth::build_dataset(dc);
  const auto enc = model::VisualEncoder::init(model::VisualEncoderConfig{}, 3);
  const auto r = cross_dataset_eval(enc, source, target);
  const auto direct = evaluate(extract(enc, source, source.query), extract(enc, source, source.gallery));
  check_same(r.source, direct, 0.0);
  CHECK(r.target.num_queries == target.query.size());
  check_report_invariants(r.target);

  // batch size does not change the features
  const auto a = extract(enc, source, source.gallery, 64);
  const auto b = extract(enc, source, source.gallery, 5);
  CHECK(a.data == b.data);
}
