#pragma once
// Retrieval metrics (Rank-k CMC, mAP) under cross-camera exclusion, a naive
// reference implementation, and the source -> target harness.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mllmreid/models.hpp"
#include "mllmreid/synthdata.hpp"

namespace mllmreid::eval {

enum class Metric { euclidean, cosine };
std::string metric_name(Metric m);
Metric parse_metric(std::string_view s);

/// Row-major embeddings with aligned identity and camera labels.
struct EmbeddingMatrix {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<double> data;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> cams;

  /// Throws ShapeError on inconsistent sizes, NumericError on NaN/Inf.
  void validate() const;
  std::span<const double> row(std::size_t r) const { return {data.data() + r * dim, dim}; }
};

struct Protocol {
  Metric metric = Metric::euclidean;
  std::size_t max_rank = 50;
  bool cross_camera = true;  // drop same-id same-camera gallery items

  std::string describe() const;
};

struct EvalReport {
  double rank1 = 0.0;
  double map = 0.0;
  std::vector<double> cmc;  // cmc[k-1] = fraction of valid queries matched within top k
  std::vector<double> per_query_ap;  // valid queries only, in query order
  std::vector<std::size_t> valid_queries;
  std::size_t num_valid_queries = 0;
  std::size_t num_queries = 0;
  std::string protocol;
};

/// [Q, G] distances, row-major.
std::vector<double> distance_matrix(const EmbeddingMatrix& query, const EmbeddingMatrix& gallery, Metric metric);

/// Throws ValueError when no query has a valid match.
EvalReport evaluate(const EmbeddingMatrix& query, const EmbeddingMatrix& gallery, const Protocol& protocol = {});

/// Independent, deliberately naive recomputation of evaluate().
EvalReport brute_force_oracle(const EmbeddingMatrix& query, const EmbeddingMatrix& gallery,
                              const Protocol& protocol = {});

/// reid_embed features of the listed dataset images, without recording a tape.
EmbeddingMatrix extract(const model::VisualEncoder& enc, const synth::Dataset& ds, std::span<const std::size_t> indices,
                        std::size_t batch_size = 64);

struct CrossDatasetReport {
  EvalReport source;  // in-domain test split
  EvalReport target;  // unseen shifted domain
};

CrossDatasetReport cross_dataset_eval(const model::VisualEncoder& enc, const synth::Dataset& source,
                                      const synth::Dataset& target, const Protocol& protocol = {});

/// {rank1, map, cmc, num_valid_queries, num_queries, protocol}
nlohmann::ordered_json report_json(const EvalReport& r);

/// Top-`top` gallery entries per query as text lines (query id/cam, then
/// gallery id/cam/distance with a '+' for matches).
std::string rank_lists(const EmbeddingMatrix& query, const EmbeddingMatrix& gallery, const Protocol& protocol,
                       std::size_t top = 10);

}  // namespace mllmreid::eval
