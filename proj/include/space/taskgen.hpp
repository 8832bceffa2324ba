#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "space/tokenizer.hpp"

namespace space {

// Two synthetic single-token-answer tasks over a small closed world:
//  - factual: recall the value stored for a (relation, entity) key;
//  - faithful: answer from a context passage that either states counterfactual
//    facts (say-rule) or lists scored candidates selected by a comparison
//    rule (max-rule, with an explicit tie option).
// Factual distractors are other values of the same relation; faithful
// distractors are factually plausible values intentionally absent from the
// context, so faithfulness and factuality are measured independently.

struct TaskgenConfig {
  int relations = 2;
  int entities = 48;
  int values = 16;
  int scores = 5;
  double zipf_exponent = 1.0;   // skew of value popularity in the world table
  int n_fact = 96;
  int n_faith = 96;
  double max_rule_fraction = 0.3;
  double tie_fraction = 0.2;    // among max-rule examples
  double fit_fraction = 0.2;    // share reserved for subspace fitting
};

struct WorldTable {
  int relations = 0;
  int entities = 0;
  int values = 0;
  std::vector<int> value_of;  // index r * entities + e -> value index

  int lookup(int r, int e) const { return value_of[static_cast<size_t>(r * entities + e)]; }
  std::vector<int> value_counts() const;
};

enum class Task { kFactual, kFaithful };

inline const char* task_name(Task t) { return t == Task::kFactual ? "factual" : "faithful"; }

struct DualTaskExample {
  int id = 0;
  Task task = Task::kFactual;
  std::vector<int> instruction;
  std::vector<int> question;  // ends with the answer marker token
  std::vector<int> a_plus;
  std::vector<int> a_minus;
};

// Fixed token ids for the special vocabulary entries.
struct SpecialTokens {
  int bos, eos, instr, q, ctx, sep, larger, opts, ans, tie;
  int rel0, ent0, val0, score0;  // range starts
};

Vocab build_vocab(const TaskgenConfig& cfg);
SpecialTokens special_tokens(const TaskgenConfig& cfg);

WorldTable build_world(const TaskgenConfig& cfg, uint64_t seed);

std::vector<DualTaskExample> gen_fact_dataset(const WorldTable& world, const TaskgenConfig& cfg,
                                              int n, uint64_t seed);
std::vector<DualTaskExample> gen_faith_dataset(const WorldTable& world, const TaskgenConfig& cfg,
                                               int n, uint64_t seed);

// Training sequences: <bos> instruction question a_plus <eos>, both tasks
// shuffled together. Hallucinated answers are never emitted.
std::vector<std::vector<int>> make_training_corpus(const std::vector<DualTaskExample>& fact,
                                                   const std::vector<DualTaskExample>& faith,
                                                   const TaskgenConfig& cfg, uint64_t seed);

struct SplitIds {
  std::vector<int> fit;
  std::vector<int> eval;
};

SplitIds split_ids(int n, double fit_fraction, uint64_t seed);

void save_examples(const std::filesystem::path& path, const std::vector<DualTaskExample>& ex);
std::vector<DualTaskExample> load_examples(const std::filesystem::path& path);

void save_corpus(const std::filesystem::path& path, const std::vector<std::vector<int>>& corpus);
std::vector<std::vector<int>> load_corpus(const std::filesystem::path& path);

}  // namespace space
