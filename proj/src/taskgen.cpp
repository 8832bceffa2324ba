#include "space/taskgen.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "space/rng.hpp"

namespace space {

namespace {

constexpr uint64_t kWorldStream = 0x7701;
constexpr uint64_t kFactStream = 0x7702;
constexpr uint64_t kFaithStream = 0x7703;
constexpr uint64_t kCorpusStream = 0x7704;
constexpr uint64_t kSplitStream = 0x7705;

}  // namespace

std::vector<int> WorldTable::value_counts() const {
  std::vector<int> counts(static_cast<size_t>(values), 0);
  for (int v : value_of) counts[static_cast<size_t>(v)]++;
  return counts;
}

Vocab build_vocab(const TaskgenConfig& cfg) {
  std::vector<std::string> tokens = {"<bos>", "<eos>", "<ans1>", "<q>",    "<ctx>",
                                     "<sep>", "<larger>", "<opts>", "<a>", "<tie>"};
  for (int r = 0; r < cfg.relations; ++r) tokens.push_back("r" + std::to_string(r));
  for (int e = 0; e < cfg.entities; ++e) tokens.push_back("e" + std::to_string(e));
  for (int v = 0; v < cfg.values; ++v) tokens.push_back("v" + std::to_string(v));
  for (int s = 0; s < cfg.scores; ++s) tokens.push_back("s" + std::to_string(s));
  return Vocab(std::move(tokens));
}

SpecialTokens special_tokens(const TaskgenConfig& cfg) {
  SpecialTokens t{};
  t.bos = 0;
  t.eos = 1;
  t.instr = 2;
  t.q = 3;
  t.ctx = 4;
  t.sep = 5;
  t.larger = 6;
  t.opts = 7;
  t.ans = 8;
  t.tie = 9;
  t.rel0 = 10;
  t.ent0 = t.rel0 + cfg.relations;
  t.val0 = t.ent0 + cfg.entities;
  t.score0 = t.val0 + cfg.values;
  return t;
}

WorldTable build_world(const TaskgenConfig& cfg, uint64_t seed) {
  require(cfg.relations >= 1 && cfg.entities >= 2 && cfg.values >= 3,
          "world table needs >=1 relation, >=2 entities, >=3 values");
  Rng rng = Rng::derive(seed, {kWorldStream});
  WorldTable w;
  w.relations = cfg.relations;
  w.entities = cfg.entities;
  w.values = cfg.values;

  // Zipf-skewed popularity: low-index values are true for many keys. The skew
  // is what makes "the factually popular answer" a meaningful distractor.
  std::vector<double> cdf(static_cast<size_t>(cfg.values));
  double total = 0.0;
  for (int v = 0; v < cfg.values; ++v) {
    total += 1.0 / std::pow(static_cast<double>(v + 1), cfg.zipf_exponent);
    cdf[static_cast<size_t>(v)] = total;
  }
  w.value_of.resize(static_cast<size_t>(cfg.relations * cfg.entities));
  for (auto& slot : w.value_of) {
    const double u = rng.uniform() * total;
    slot = static_cast<int>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    slot = std::min(slot, cfg.values - 1);
  }
  return w;
}

std::vector<DualTaskExample> gen_fact_dataset(const WorldTable& world, const TaskgenConfig& cfg,
                                              int n, uint64_t seed) {
  const SpecialTokens st = special_tokens(cfg);
  const int keys = world.relations * world.entities;
  const long capacity = static_cast<long>(keys) * (world.values - 1);
  require(n >= 1 && n <= capacity, "gen_fact_dataset: n exceeds table capacity");

  // Distinct values actually used per relation, for type-consistent distractors.
  std::vector<std::vector<int>> used(static_cast<size_t>(world.relations));
  for (int r = 0; r < world.relations; ++r) {
    std::vector<bool> seen(static_cast<size_t>(world.values), false);
    for (int e = 0; e < world.entities; ++e) seen[static_cast<size_t>(world.lookup(r, e))] = true;
    for (int v = 0; v < world.values; ++v)
      if (seen[static_cast<size_t>(v)]) used[static_cast<size_t>(r)].push_back(v);
  }

  Rng rng = Rng::derive(seed, {kFactStream});
  std::vector<int> key_order(static_cast<size_t>(keys));
  std::iota(key_order.begin(), key_order.end(), 0);
  rng.shuffle(key_order);

  std::vector<DualTaskExample> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int key = key_order[static_cast<size_t>(i) % key_order.size()];
    const int r = key / world.entities;
    const int e = key % world.entities;
    const int v_true = world.lookup(r, e);

    int v_wrong;
    const auto& pool = used[static_cast<size_t>(r)];
    if (pool.size() >= 2) {
      do {
        v_wrong = pool[rng.uniform_int(pool.size())];
      } while (v_wrong == v_true);
    } else {
      do {
        v_wrong = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(world.values)));
      } while (v_wrong == v_true);
    }

    DualTaskExample ex;
    ex.id = i;
    ex.task = Task::kFactual;
    ex.instruction = {st.instr};
    ex.question = {st.q, st.rel0 + r, st.ent0 + e, st.ans};
    ex.a_plus = {st.val0 + v_true};
    ex.a_minus = {st.val0 + v_wrong};
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<DualTaskExample> gen_faith_dataset(const WorldTable& world, const TaskgenConfig& cfg,
                                               int n, uint64_t seed) {
  const SpecialTokens st = special_tokens(cfg);
  Rng rng = Rng::derive(seed, {kFaithStream});
  const std::vector<int> counts = world.value_counts();

  // Values ordered by global popularity (count desc, index asc).
  std::vector<int> by_popularity(static_cast<size_t>(world.values));
  std::iota(by_popularity.begin(), by_popularity.end(), 0);
  std::stable_sort(by_popularity.begin(), by_popularity.end(), [&](int a, int b) {
    return counts[static_cast<size_t>(a)] > counts[static_cast<size_t>(b)];
  });

  const auto most_popular_excluding = [&](const std::vector<int>& banned) {
    for (int v : by_popularity)
      if (std::find(banned.begin(), banned.end(), v) == banned.end()) return v;
    fail("no value available outside the banned set");
  };

  std::vector<DualTaskExample> out;
  out.reserve(static_cast<size_t>(n));
  const int n_max_rule = static_cast<int>(std::lround(cfg.max_rule_fraction * n));
  for (int i = 0; i < n; ++i) {
    DualTaskExample ex;
    ex.id = i;
    ex.task = Task::kFaithful;
    ex.instruction = {st.instr};

    if (i < n - n_max_rule) {
      // say-rule: the passage states counterfactual facts; answer what it says.
      const int r = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(world.relations)));
      const int e1 = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(world.entities)));
      int e2;
      do {
        e2 = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(world.entities)));
      } while (e2 == e1);
      const int t1 = world.lookup(r, e1);
      const int t2 = world.lookup(r, e2);
      int v1, v2;
      do {
        v1 = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(world.values)));
      } while (v1 == t1 || v1 == t2);
      do {
        v2 = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(world.values)));
      } while (v2 == t1 || v2 == t2 || v2 == v1);
      const bool ask_first = rng.uniform_int(2) == 0;
      const int e_q = ask_first ? e1 : e2;
      const int v_stated = ask_first ? v1 : v2;
      const int v_world = ask_first ? t1 : t2;
      ex.question = {st.ctx, st.rel0 + r, st.ent0 + e1, st.val0 + v1, st.sep,
                     st.rel0 + r, st.ent0 + e2, st.val0 + v2, st.q,
                     st.rel0 + r, st.ent0 + e_q, st.ans};
      ex.a_plus = {st.val0 + v_stated};
      ex.a_minus = {st.val0 + v_world};
    } else {
      // max-rule: scored candidates plus an explicit tie option.
      int va = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(world.values)));
      int vb;
      do {
        vb = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(world.values)));
      } while (vb == va);
      int sa = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cfg.scores)));
      int sb;
      if (rng.uniform() < cfg.tie_fraction) {
        sb = sa;
      } else {
        do {
          sb = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cfg.scores)));
        } while (sb == sa);
      }
      ex.question = {st.ctx, st.val0 + va, st.score0 + sa, st.sep, st.val0 + vb,
                     st.score0 + sb, st.larger, st.opts, st.val0 + va, st.val0 + vb,
                     st.tie, st.ans};
      if (sa > sb)
        ex.a_plus = {st.val0 + va};
      else if (sb > sa)
        ex.a_plus = {st.val0 + vb};
      else
        ex.a_plus = {st.tie};
      ex.a_minus = {st.val0 + most_popular_excluding({va, vb})};
    }
    require(ex.a_plus != ex.a_minus, "faithful example with identical answers");
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<std::vector<int>> make_training_corpus(const std::vector<DualTaskExample>& fact,
                                                   const std::vector<DualTaskExample>& faith,
                                                   const TaskgenConfig& cfg, uint64_t seed) {
  std::vector<std::vector<int>> corpus;
  corpus.reserve(fact.size() + faith.size());
  const SpecialTokens st = special_tokens(cfg);
  const auto emit = [&](const DualTaskExample& ex) {
    std::vector<int> seq;
    seq.push_back(st.bos);
    seq.insert(seq.end(), ex.instruction.begin(), ex.instruction.end());
    seq.insert(seq.end(), ex.question.begin(), ex.question.end());
    seq.insert(seq.end(), ex.a_plus.begin(), ex.a_plus.end());
    seq.push_back(st.eos);
    corpus.push_back(std::move(seq));
  };
  for (const auto& ex : fact) emit(ex);
  for (const auto& ex : faith) emit(ex);
  Rng rng = Rng::derive(seed, {kCorpusStream});
  rng.shuffle(corpus);
  return corpus;
}

SplitIds split_ids(int n, double fit_fraction, uint64_t seed) {
  require(fit_fraction > 0.0 && fit_fraction < 1.0, "fit fraction must be in (0,1)");
  std::vector<int> ids(static_cast<size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng = Rng::derive(seed, {kSplitStream});
  rng.shuffle(ids);
  const int n_fit = std::max(1, static_cast<int>(std::lround(fit_fraction * n)));
  SplitIds s;
  s.fit.assign(ids.begin(), ids.begin() + n_fit);
  s.eval.assign(ids.begin() + n_fit, ids.end());
  std::sort(s.fit.begin(), s.fit.end());
  std::sort(s.eval.begin(), s.eval.end());
  return s;
}

void save_examples(const std::filesystem::path& path, const std::vector<DualTaskExample>& ex) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "cannot write dataset " + path.string());
  for (const auto& e : ex) {
    nlohmann::json j;
    j["id"] = e.id;
    j["task"] = task_name(e.task);
    j["instruction"] = e.instruction;
    j["question"] = e.question;
    j["a_plus"] = e.a_plus;
    j["a_minus"] = e.a_minus;
    out << j.dump() << "\n";
  }
}

std::vector<DualTaskExample> load_examples(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open dataset " + path.string());
  std::vector<DualTaskExample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    DualTaskExample e;
    e.id = j.at("id").get<int>();
    e.task = j.at("task").get<std::string>() == "factual" ? Task::kFactual : Task::kFaithful;
    e.instruction = j.at("instruction").get<std::vector<int>>();
    e.question = j.at("question").get<std::vector<int>>();
    e.a_plus = j.at("a_plus").get<std::vector<int>>();
    e.a_minus = j.at("a_minus").get<std::vector<int>>();
    out.push_back(std::move(e));
  }
  return out;
}

void save_corpus(const std::filesystem::path& path, const std::vector<std::vector<int>>& corpus) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "cannot write corpus " + path.string());
  for (const auto& seq : corpus) out << nlohmann::json(seq).dump() << "\n";
}

std::vector<std::vector<int>> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open corpus " + path.string());
  std::vector<std::vector<int>> corpus;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    corpus.push_back(nlohmann::json::parse(line).get<std::vector<int>>());
  }
  return corpus;
}

}  // namespace space
