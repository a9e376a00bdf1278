#pragma once
// Continuation NLL, identity cross-entropy, batch-hard triplet loss and
// their lambda-weighted combination.

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>

#include "mllmreid/tensor.hpp"
#include "mllmreid/tokenizer.hpp"

namespace mllmreid::loss {

using ad::Tensor;

enum class Distance { euclidean, cosine };
enum class Reduction { sum, mean };

Distance parse_distance(std::string_view s);
Reduction parse_reduction(std::string_view s);

struct TripletConfig {
  double margin = 0.3;
  Distance distance = Distance::euclidean;
  Reduction reduction = Reduction::mean;
};

/// Parts of one training step's objective. id/triplet are empty when the
/// recipe does not compute them.
struct LossBreakdown {
  double lm_nll = 0.0;
  std::optional<double> id_loss;
  std::optional<double> triplet_loss;
  double overall = 0.0;
  double lambda = 1.0;
};

/// Mean over masked answer positions of -log p(token), with logits at row
/// i-1 predicting token i. `logits` is [B * seq_len, V] for sequences padded
/// to seq_len. Throws ValueError when no position is masked.
Tensor lm_nll(const Tensor& logits, std::span<const text::TokenSequence> seqs, std::size_t seq_len);
/// Single sequence; logits are [seq.size(), V].
Tensor lm_nll(const Tensor& logits, const text::TokenSequence& seq);

/// Mean softmax cross-entropy over the batch. Throws ValueError for labels
/// outside [0, C).
Tensor id_loss(const Tensor& logits, std::span<const std::size_t> labels);

/// Batch-hard triplet loss: per anchor [m + max_pos D - min_neg D]_+.
/// Throws ValueError when the batch lacks a positive (an identity with one
/// sample) or a negative (a single identity).
Tensor triplet_loss(const Tensor& embeddings, std::span<const std::size_t> labels, const TripletConfig& config = {});

/// Pairwise distance matrix [n, n] under the configured metric.
Tensor distance_matrix(const Tensor& embeddings, Distance distance);

/// lambda * lm + (1 - lambda) * (id + triplet). Terms whose weight is zero may
/// be undefined tensors. Throws ValueError for lambda outside [0, 1].
Tensor overall_loss(const Tensor& lm, const Tensor& id, const Tensor& triplet, double lambda);
double overall_loss(double lm, double id, double triplet, double lambda);

}  // namespace mllmreid::loss
