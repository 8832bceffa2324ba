#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "space/autodiff.hpp"
#include "space/common.hpp"
#include "space/profiling.hpp"

namespace space {

struct ProbeTrainConfig {
  int n_probes = 4;
  double lambda0 = 1.0;
  double p = 0.5;          // orthogonality weight headroom
  double lr = 0.05;
  int epochs = 30;
  int batch_pairs = 64;
  int batches_per_epoch = 4;
  double pair_ratio = 1.0;  // positive : negative pair sampling
  double val_fraction = 0.2;
  uint64_t seed = 0;
};

// Trained probe directions for one attention head, with the fused direction
// used for sign-based classification and head ranking.
struct ProbeSet {
  int layer = 0;
  int head = 0;
  Matf theta;          // d_head x n, orthonormal columns after training
  Vecf center;         // mean offset removed before projecting
  Vecf probe_signs;    // n, alignment of each probe with the plus class
  Vecf probe_weights;  // n, per-probe training accuracy
  Vecf fused;          // accuracy-weighted unit direction
  std::vector<float> loss_trace;
  float val_accuracy = 0.5f;
  float max_abs_cosine = 0.0f;  // pairwise, after training
  float lambda_min = 0.0f;
  float lambda_max = 0.0f;
  bool aborted = false;
};

// Contrastive pair loss: mean binary cross-entropy of
// sigmoid(<theta^T x_i, theta^T x_j>) against pair labels.
template <class S>
typename ad::Graph<S>::Var build_contrastive_loss(ad::Graph<S>& g,
                                                  typename ad::Graph<S>::Var theta,
                                                  const MatX<S>& xi, const MatX<S>& xj,
                                                  const MatX<S>& labels);

// Sum over unordered probe pairs of sigmoid(<theta_i, theta_j>);
// zero by convention for a single probe.
template <class S>
typename ad::Graph<S>::Var build_orthogonality_loss(ad::Graph<S>& g,
                                                    typename ad::Graph<S>::Var theta);

// lambda_t = lambda0 * (1 + p * clamp(cur / running_max, 0, 1)) on squared
// orthogonality-gradient norms; lambda0 when no gradient has been seen.
double lambda_schedule(double lambda0, double p, double current_sq_norm, double running_max_sq);

ProbeSet train_probes_for_head(const Matf& plus, const Matf& minus, int layer, int head,
                               const ProbeTrainConfig& cfg);

// Independent per-head trainings over the whole bank. Each head derives its
// own seed from (cfg.seed, layer, head) so parallel and serial runs agree.
std::vector<ProbeSet> train_probes(const ActivationBank& bank, const ProbeTrainConfig& cfg);

// Fraction of correctly classified activations by sign of <fused, x - center>.
double probe_accuracy(const ProbeSet& ps, const Matf& acts, const std::vector<int>& labels);

using HeadId = std::pair<int, int>;  // (layer, head)

struct HeadSelection {
  std::string task;
  int k = 0;
  std::vector<std::pair<HeadId, float>> ranked;  // accuracy desc, ties by (l, h)
  std::vector<HeadId> selected;
};

HeadSelection select_top_k(const std::vector<ProbeSet>& sets, const std::string& task, int k);

struct IntersectResult {
  std::vector<HeadId> heads;
  int k_used = 0;
  bool escalated = false;
};

// Intersection of the two selections; on empty overlap k grows by 2 for both
// tasks until the intersection is non-empty or k covers every head.
IntersectResult select_and_intersect(const std::vector<ProbeSet>& fact_sets,
                                     const std::vector<ProbeSet>& faith_sets, int k,
                                     int total_heads);

void save_probe_sets(const std::filesystem::path& dir, const std::vector<ProbeSet>& sets);
std::vector<ProbeSet> load_probe_sets(const std::filesystem::path& dir);

}  // namespace space
