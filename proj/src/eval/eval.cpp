#include "mllmreid/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mllmreid/error.hpp"
#include "mllmreid/kernels.hpp"

namespace mllmreid::eval {
namespace {

void check_pair(const EmbeddingMatrix& q, const EmbeddingMatrix& g) {
  q.validate();
  g.validate();
  if (q.dim != g.dim) {
    throw ShapeError("query dim " + std::to_string(q.dim) + " != gallery dim " + std::to_string(g.dim));
  }
}

std::vector<std::size_t> ranked(std::span<const double> dist) {
  std::vector<std::size_t> order(dist.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dist[a] < dist[b] || (dist[a] == dist[b] && a < b);
  });
  return order;
}

bool excluded(const EmbeddingMatrix& q, std::size_t qi, const EmbeddingMatrix& g, std::size_t gi, bool cross_camera) {
  return cross_camera && q.ids[qi] == g.ids[gi] && q.cams[qi] == g.cams[gi];
}

}  // namespace

std::string metric_name(Metric m) { return m == Metric::euclidean ? "euclidean" : "cosine"; }

Metric parse_metric(std::string_view s) {
  if (s == "euclidean") return Metric::euclidean;
  if (s == "cosine") return Metric::cosine;
  throw ValueError("invalid metric '" + std::string(s) + "' (expected euclidean or cosine)");
}

void EmbeddingMatrix::validate() const {
  if (data.size() != rows * dim || ids.size() != rows || cams.size() != rows) {
    throw ShapeError("embedding matrix with " + std::to_string(rows) + " rows has " + std::to_string(data.size()) +
                     " values, " + std::to_string(ids.size()) + " ids and " + std::to_string(cams.size()) + " cams");
  }
  for (double v : data)
    if (!std::isfinite(v)) throw NumericError("embedding matrix contains non-finite values");
}

std::string Protocol::describe() const {
  return "metric=" + metric_name(metric) + ";exclude=" + (cross_camera ? "same_id_same_cam" : "none") +
         ";ties=gallery_index;max_rank=" + std::to_string(max_rank);
}

std::vector<double> distance_matrix(const EmbeddingMatrix& q, const EmbeddingMatrix& g, Metric metric) {
  check_pair(q, g);
  const kernels::KernelTable& k = kernels::active();
  std::vector<double> d(q.rows * g.rows);
  if (metric == Metric::euclidean) {
    for (std::size_t i = 0; i < q.rows; ++i)
      for (std::size_t j = 0; j < g.rows; ++j)
        d[i * g.rows + j] = std::sqrt(k.sq_dist(q.row(i).data(), g.row(j).data(), q.dim));
    return d;
  }
  auto norms = [&](const EmbeddingMatrix& m) {
    std::vector<double> n(m.rows);
    for (std::size_t r = 0; r < m.rows; ++r) n[r] = std::max(std::sqrt(k.dot(m.row(r).data(), m.row(r).data(), m.dim)), 1e-12);
    return n;
  };
  const auto qn = norms(q), gn = norms(g);
  for (std::size_t i = 0; i < q.rows; ++i)
    for (std::size_t j = 0; j < g.rows; ++j)
      d[i * g.rows + j] = 1.0 - k.dot(q.row(i).data(), g.row(j).data(), q.dim) / (qn[i] * gn[j]);
  return d;
}

EvalReport evaluate(const EmbeddingMatrix& q, const EmbeddingMatrix& g, const Protocol& protocol) {
  if (protocol.max_rank == 0) throw ValueError("max_rank must be positive");
  const std::vector<double> dist = distance_matrix(q, g, protocol.metric);
  EvalReport r;
  r.num_queries = q.rows;
  r.protocol = protocol.describe();
  std::vector<std::size_t> hits(protocol.max_rank, 0);
  for (std::size_t qi = 0; qi < q.rows; ++qi) {
    const auto order = ranked(std::span<const double>(dist).subspan(qi * g.rows, g.rows));
    std::size_t rank = 0, found = 0, first = 0;
    double precision_sum = 0.0;
    for (std::size_t gi : order) {
      if (excluded(q, qi, g, gi, protocol.cross_camera)) continue;
      ++rank;
      if (g.ids[gi] == q.ids[qi]) {
        if (found == 0) first = rank;
        ++found;
        precision_sum += static_cast<double>(found) / static_cast<double>(rank);
      }
    }
    if (found == 0) continue;
    r.valid_queries.push_back(qi);
    r.per_query_ap.push_back(precision_sum / static_cast<double>(found));
    if (first <= protocol.max_rank) ++hits[first - 1];
  }
  r.num_valid_queries = r.valid_queries.size();
  if (r.num_valid_queries == 0) throw ValueError("evaluate: no query has a valid gallery match");
  r.cmc.resize(protocol.max_rank);
  std::size_t cum = 0;
  for (std::size_t k = 0; k < protocol.max_rank; ++k) {
    cum += hits[k];
    r.cmc[k] = static_cast<double>(cum) / static_cast<double>(r.num_valid_queries);
  }
  r.rank1 = r.cmc[0];
  r.map = std::accumulate(r.per_query_ap.begin(), r.per_query_ap.end(), 0.0) / static_cast<double>(r.num_valid_queries);
  return r;
}

EvalReport brute_force_oracle(const EmbeddingMatrix& q, const EmbeddingMatrix& g, const Protocol& protocol) {
  EvalReport r;
  r.num_queries = q.rows;
  r.protocol = protocol.describe();
  std::vector<std::vector<bool>> match_at;  // per valid query, relevance by rank
  for (std::size_t qi = 0; qi < q.rows; ++qi) {
    // Candidate list of (distance, gallery index), computed with plain loops.
    std::vector<std::pair<double, std::size_t>> cand;
    for (std::size_t gi = 0; gi < g.rows; ++gi) {
      if (protocol.cross_camera && q.ids[qi] == g.ids[gi] && q.cams[qi] == g.cams[gi]) continue;
      double d = 0.0;
      if (protocol.metric == Metric::euclidean) {
        for (std::size_t c = 0; c < q.dim; ++c) {
          const double diff = q.data[qi * q.dim + c] - g.data[gi * g.dim + c];
          d += diff * diff;
        }
        d = std::sqrt(d);
      } else {
        double dot = 0.0, nq = 0.0, ng = 0.0;
        for (std::size_t c = 0; c < q.dim; ++c) {
          dot += q.data[qi * q.dim + c] * g.data[gi * g.dim + c];
          nq += q.data[qi * q.dim + c] * q.data[qi * q.dim + c];
          ng += g.data[gi * g.dim + c] * g.data[gi * g.dim + c];
        }
        d = 1.0 - dot / (std::max(std::sqrt(nq), 1e-12) * std::max(std::sqrt(ng), 1e-12));
      }
      cand.emplace_back(d, gi);
    }
    std::sort(cand.begin(), cand.end());  // lexicographic: distance, then index
    std::vector<bool> rel;
    for (const auto& [d, gi] : cand) rel.push_back(g.ids[gi] == q.ids[qi]);
    if (std::find(rel.begin(), rel.end(), true) == rel.end()) continue;
    r.valid_queries.push_back(qi);
    match_at.push_back(rel);
  }
  r.num_valid_queries = r.valid_queries.size();
  if (r.num_valid_queries == 0) return r;

  for (const auto& rel : match_at) {
    std::vector<std::size_t> relevant_ranks;
    for (std::size_t i = 0; i < rel.size(); ++i)
      if (rel[i]) relevant_ranks.push_back(i + 1);
    double ap = 0.0;
    for (std::size_t j = 0; j < relevant_ranks.size(); ++j)
      ap += static_cast<double>(j + 1) / static_cast<double>(relevant_ranks[j]);
    r.per_query_ap.push_back(ap / static_cast<double>(relevant_ranks.size()));
  }
  for (std::size_t k = 1; k <= protocol.max_rank; ++k) {
    std::size_t n = 0;
    for (const auto& rel : match_at) {
      bool any = false;
      for (std::size_t i = 0; i < k && i < rel.size(); ++i) any = any || rel[i];
      n += any ? 1 : 0;
    }
    r.cmc.push_back(static_cast<double>(n) / static_cast<double>(r.num_valid_queries));
  }
  r.rank1 = r.cmc.empty() ? 0.0 : r.cmc[0];
  double s = 0.0;
  for (double ap : r.per_query_ap) s += ap;
  r.map = s / static_cast<double>(r.num_valid_queries);
  return r;
}

EmbeddingMatrix extract(const model::VisualEncoder& enc, const synth::Dataset& ds, std::span<const std::size_t> indices,
                        std::size_t batch_size) {
  if (batch_size == 0) throw ValueError("extract: batch size must be positive");
  ad::NoGradGuard guard;
  EmbeddingMatrix m;
  m.rows = indices.size();
  m.dim = enc.config.dim;
  m.data.reserve(m.rows * m.dim);
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::size_t end = std::min(indices.size(), start + batch_size);
    std::vector<std::vector<double>> imgs;
    for (std::size_t i = start; i < end; ++i) imgs.push_back(ds.images.at(indices[i]).pixels);
    const ad::Tensor e = model::reid_embed(enc, imgs);
    m.data.insert(m.data.end(), e.data().begin(), e.data().end());
  }
  for (std::size_t i : indices) {
    m.ids.push_back(ds.images[i].identity);
    m.cams.push_back(ds.images[i].camera);
  }
  return m;
}

CrossDatasetReport cross_dataset_eval(const model::VisualEncoder& enc, const synth::Dataset& source,
                                      const synth::Dataset& target, const Protocol& protocol) {
  CrossDatasetReport r;
  r.source = evaluate(extract(enc, source, source.query), extract(enc, source, source.gallery), protocol);
  r.target = evaluate(extract(enc, target, target.query), extract(enc, target, target.gallery), protocol);
  return r;
}

nlohmann::ordered_json report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["rank1"] = r.rank1;
  j["map"] = r.map;
  j["cmc"] = r.cmc;
  j["num_valid_queries"] = r.num_valid_queries;
  j["num_queries"] = r.num_queries;
  j["protocol"] = r.protocol;
  return j;
}

std::string rank_lists(const EmbeddingMatrix& q, const EmbeddingMatrix& g, const Protocol& protocol, std::size_t top) {
  const std::vector<double> dist = distance_matrix(q, g, protocol.metric);
  std::ostringstream os;
  os.precision(4);
  for (std::size_t qi = 0; qi < q.rows; ++qi) {
    os << "query " << qi << " id=" << q.ids[qi] << " cam=" << q.cams[qi] << ':';
    std::size_t shown = 0;
    for (std::size_t gi : ranked(std::span<const double>(dist).subspan(qi * g.rows, g.rows))) {
      if (excluded(q, qi, g, gi, protocol.cross_camera)) continue;
      if (shown++ == top) break;
      os << ' ' << (g.ids[gi] == q.ids[qi] ? '+' : '-') << g.ids[gi] << '/' << g.cams[gi] << '@'
         << dist[qi * g.rows + gi];
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace mllmreid::eval
