#pragma once

#include <cstdint>
#include <vector>

#include "space/common.hpp"

namespace space {

struct HdbscanConfig {
  int min_cluster_size = 8;
  int min_samples = 5;
  uint64_t seed = 0;  // reserved; the algorithm itself is deterministic
};

// Shared distance transform: core distance is the distance to the
// min_samples-th nearest other point; mutual reachability of a pair is
// max(core_a, core_b, d(a, b)).
Matd pairwise_distances(const Matd& points);
Vecd core_distances(const Matd& dist, int min_samples);
Matd mutual_reachability(const Matd& dist, const Vecd& core);

// Density-based cluster extraction: mutual reachability graph, minimum
// spanning tree, condensed cluster tree, excess-of-mass flat cut. Returns one
// label per point, -1 for noise; labels are canonicalized by each cluster's
// smallest member index. Fewer than min_cluster_size points is all noise.
std::vector<int> hdbscan_cluster(const Matd& points, const HdbscanConfig& cfg);

// Flat extraction from an already-built single-linkage merge sequence; exposed
// so alternative tree constructions can share the exact same condense/select
// conventions. merges[i] = (a, b, dist) joins the components containing a and
// b (point or internal node ids; internals are n + merge index).
struct Merge {
  int left;
  int right;
  double dist;
};

std::vector<int> extract_labels(const std::vector<Merge>& merges, int n_points,
                                int min_cluster_size);

}  // namespace space
