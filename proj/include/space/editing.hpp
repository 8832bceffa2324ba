#pragma once

#include <filesystem>
#include <vector>

#include "space/common.hpp"

namespace space {

struct ActivationBank;  // profiling.hpp

// One steering entry: a unit direction in a head's activation slice and the
// data-derived magnitude it is applied with.
struct EditEntry {
  int layer = 0;
  int head = 0;
  Vecf theta;     // unit direction, d_head
  float scale = 0.0f;
};

struct EditPlan {
  float alpha = 0.0f;
  std::vector<EditEntry> entries;

  void save(const std::filesystem::path& dir) const;
  static EditPlan load(const std::filesystem::path& dir);

  // Validates entries against model geometry: head/layer in range, unit
  // directions, non-negative finite scales, at most one entry per (l,h).
  void validate(int layers, int heads, int d_head) const;

  // Sum of scale * theta scattered into head slices, one row per layer.
  // The forward pass adds alpha * row(l) into the pre-norm residual update.
  Matf layer_vectors(int layers, int heads, int d_head) const;
};

EditPlan negate_plan(EditPlan plan);

// Population standard deviation of <theta, x> over plus and minus activations
// of both banks pooled for head (l,h).
float compute_scale(const ActivationBank& fact, const ActivationBank& faith, int layer, int head,
                    const Vecf& theta);

}  // namespace space
