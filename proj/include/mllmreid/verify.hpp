#pragma once
// Invariant suites shared by `selftest`, `gradcheck` and the acceptance
// binary. Each suite compares the implementation with an independent oracle
// and reports the worst deviation it saw.

#include <string>
#include <vector>

namespace mllmreid::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Central differences for every differentiable op, the model glue
/// (projection, latent pooling) and every loss, on `seeds` random draws each.
CheckResult gradients(std::size_t seeds = 10, double tolerance = 1e-4);

/// Closed-form loss values: uniform logits, identical embeddings, a single
/// uniform token, and the lambda boundaries of the overall loss.
CheckResult loss_closed_forms();

/// Batch-hard triplet loss against explicit enumeration of every triple.
CheckResult triplet_oracle(std::size_t batches = 100);

/// evaluate() against brute_force_oracle() on random instances, plus the
/// perfect-embedding and rank-1-and-3 cases.
CheckResult metric_oracle(std::size_t instances = 50);

/// Bundled reference statistics and the continuation length bound over the
/// whole attribute space.
CheckResult data_contracts();

/// In stage 1, gradients reach the visual encoder through the pooled-latent
/// ReID losses alone (LM term zeroed) and through the LM term alone.
CheckResult syncreid_liveness();

/// All of the above except the training-based liveness check when `quick`.
std::vector<CheckResult> run_all(bool quick = false);

}  // namespace mllmreid::verify
