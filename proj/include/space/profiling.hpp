#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "space/model.hpp"
#include "space/taskgen.hpp"

namespace space {

enum class Polarity : int8_t { kPlus = 1, kMinus = -1 };

// Where along the answer span the head activation is taken.
enum class ExtractPosition { kLastAnswerToken, kAnswerMean };

struct ActRecord {
  int example_id = 0;
  Vecf vec;  // d_head
};

// Per-(layer, head, polarity) head activations for one task, plus the full
// mid-residual vectors per layer for pattern analysis. Records are kept
// sorted by example id; plus/minus lists pair up one-to-one.
struct ActivationBank {
  std::string task;
  int layers = 0;
  int heads = 0;
  int d_head = 0;
  int d_model = 0;
  std::vector<std::vector<ActRecord>> plus;   // index l * heads + h
  std::vector<std::vector<ActRecord>> minus;  // same layout
  std::vector<Matf> full_plus;                // per layer, n_examples x d_model
  std::vector<Matf> full_minus;
  std::vector<int> example_ids;               // row order of full_* blocks

  const std::vector<ActRecord>& at(int l, int h, Polarity p) const {
    const auto& side = p == Polarity::kPlus ? plus : minus;
    return side[static_cast<size_t>(l * heads + h)];
  }

  size_t total_records() const;
  void check_integrity() const;

  void save(const std::filesystem::path& dir) const;
  static ActivationBank load(const std::filesystem::path& dir);
};

// Profiling prompts: for every example, (instruction + question + a_plus)
// followed by (instruction + question + a_minus).
std::vector<std::vector<int>> build_din(const std::vector<DualTaskExample>& examples, int bos);

struct ProfilingConfig {
  ExtractPosition position = ExtractPosition::kLastAnswerToken;
};

// Runs the model over an example set and assembles its activation bank.
ActivationBank collect_activations(const ModelConfig& cfg, const ModelParams& params,
                                   const std::vector<DualTaskExample>& examples, int bos,
                                   const std::string& task_tag,
                                   const ProfilingConfig& pcfg = {});

}  // namespace space
