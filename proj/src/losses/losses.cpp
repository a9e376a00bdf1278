#include "mllmreid/losses.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "mllmreid/error.hpp"
#include "mllmreid/ops.hpp"

namespace mllmreid::loss {
namespace {

void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValueError("lambda must lie in [0, 1], got " + std::to_string(lambda));
}

}  // namespace

Distance parse_distance(std::string_view s) {
  if (s == "euclidean") return Distance::euclidean;
  if (s == "cosine") return Distance::cosine;
  throw ValueError("invalid distance '" + std::string(s) + "' (expected euclidean or cosine)");
}

Reduction parse_reduction(std::string_view s) {
  if (s == "sum") return Reduction::sum;
  if (s == "mean") return Reduction::mean;
  throw ValueError("invalid reduction '" + std::string(s) + "' (expected sum or mean)");
}

Tensor lm_nll(const Tensor& logits, std::span<const text::TokenSequence> seqs, std::size_t seq_len) {
  if (logits.ndim() != 2 || logits.dim(0) != seqs.size() * seq_len) {
    throw ShapeError("lm_nll: logits " + ad::shape_str(logits.shape()) + " do not cover " +
                     std::to_string(seqs.size()) + " sequences of length " + std::to_string(seq_len));
  }
  const std::size_t rows = logits.dim(0);
  std::vector<std::size_t> targets(rows, 0);
  std::vector<double> weights(rows, 0.0);
  bool any = false;
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    const text::TokenSequence& s = seqs[b];
    if (s.size() > seq_len) throw ShapeError("lm_nll: sequence longer than the padded length");
    for (std::size_t i = 1; i < s.size(); ++i) {
      if (!s.loss_mask[i]) continue;
      targets[b * seq_len + i - 1] = s.ids[i];
      weights[b * seq_len + i - 1] = 1.0;
      any = true;
    }
  }
  if (!any) throw ValueError("lm_nll: loss mask is all zero");
  return ad::softmax_cross_entropy(logits, targets, weights);
}

Tensor lm_nll(const Tensor& logits, const text::TokenSequence& seq) {
  return lm_nll(logits, std::span<const text::TokenSequence>(&seq, 1), seq.size());
}

Tensor id_loss(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.ndim() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("id_loss: logits " + ad::shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  for (std::size_t y : labels)
    if (y >= logits.dim(1))
      throw ValueError("id_loss: label " + std::to_string(y) + " >= number of classes " + std::to_string(logits.dim(1)));
  return ad::softmax_cross_entropy(logits, labels);
}

Tensor distance_matrix(const Tensor& embeddings, Distance distance) {
  if (distance == Distance::euclidean) return ad::pairwise_distance(embeddings, embeddings);
  const Tensor n = ad::l2_normalize_rows(embeddings);
  return ad::add_scalar(ad::scale(ad::matmul(n, ad::transpose(n)), -1.0), 1.0);
}

Tensor triplet_loss(const Tensor& embeddings, std::span<const std::size_t> labels, const TripletConfig& config) {
  const std::size_t n = labels.size();
  if (embeddings.ndim() != 2 || embeddings.dim(0) != n) {
    throw ShapeError("triplet_loss: embeddings " + ad::shape_str(embeddings.shape()) + " vs " + std::to_string(n) +
                     " labels");
  }
  if (!std::isfinite(config.margin) || config.margin < 0.0) throw ValueError("triplet margin must be finite and >= 0");
  const Tensor D = distance_matrix(embeddings, config.distance);
  const auto d = D.data();
  std::vector<std::size_t> pos(n), neg(n);
  for (std::size_t a = 0; a < n; ++a) {
    double best_p = -1.0, best_n = std::numeric_limits<double>::infinity();
    bool has_p = false, has_n = false;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = d[a * n + j];
      if (labels[j] == labels[a]) {
        if (j == a) continue;
        if (!has_p || v > best_p) best_p = v, pos[a] = a * n + j, has_p = true;
      } else if (!has_n || v < best_n) {
        best_n = v, neg[a] = a * n + j, has_n = true;
      }
    }
    if (!has_p) throw ValueError("triplet_loss: identity " + std::to_string(labels[a]) + " has no positive (K < 2)");
    if (!has_n) throw ValueError("triplet_loss: batch has a single identity (P < 2)");
  }
  const Tensor hinge =
      ad::relu(ad::add_scalar(ad::sub(ad::gather_elements(D, pos), ad::gather_elements(D, neg)), config.margin));
  return config.reduction == Reduction::sum ? ad::sum(hinge) : ad::mean(hinge);
}

Tensor overall_loss(const Tensor& lm, const Tensor& id, const Tensor& triplet, double lambda) {
  check_lambda(lambda);
  Tensor total;
  if (lambda > 0.0) {
    if (!lm.defined()) throw ValueError("overall_loss: lambda > 0 needs the LM term");
    total = lambda == 1.0 ? lm : ad::scale(lm, lambda);
  }
  if (lambda < 1.0) {
    if (!id.defined() || !triplet.defined()) throw ValueError("overall_loss: lambda < 1 needs the ID and triplet terms");
    const Tensor reid = lambda == 0.0 ? ad::add(id, triplet) : ad::scale(ad::add(id, triplet), 1.0 - lambda);
    total = total.defined() ? ad::add(total, reid) : reid;
  }
  return total;
}

double overall_loss(double lm, double id, double triplet, double lambda) {
  check_lambda(lambda);
  return lambda * lm + (1.0 - lambda) * (id + triplet);
}

}  // namespace mllmreid::loss
