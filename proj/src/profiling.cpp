#include "space/profiling.hpp"

#include <algorithm>
#include <array>
#include <fstream>

#include <nlohmann/json.hpp>

#include "space/parallel.hpp"
#include "space/tensor_io.hpp"

namespace space {

size_t ActivationBank::total_records() const {
  size_t n = 0;
  for (const auto& lst : plus) n += lst.size();
  for (const auto& lst : minus) n += lst.size();
  return n;
}

void ActivationBank::check_integrity() const {
  require(static_cast<int>(plus.size()) == layers * heads &&
              static_cast<int>(minus.size()) == layers * heads,
          "activation bank: slot count mismatch");
  for (size_t slot = 0; slot < plus.size(); ++slot) {
    require(plus[slot].size() == minus[slot].size(),
            "activation bank: unpaired records in slot " + std::to_string(slot));
    for (size_t i = 0; i < plus[slot].size(); ++i) {
      require(plus[slot][i].example_id == minus[slot][i].example_id,
              "activation bank: example id mismatch in slot " + std::to_string(slot));
      require(all_finite(plus[slot][i].vec) && all_finite(minus[slot][i].vec),
              "activation bank: non-finite record");
    }
  }
}

std::vector<std::vector<int>> build_din(const std::vector<DualTaskExample>& examples, int bos) {
  std::vector<std::vector<int>> prompts;
  prompts.reserve(examples.size() * 2);
  for (const auto& ex : examples) {
    const auto assemble = [&](const std::vector<int>& answer) {
      std::vector<int> p;
      p.push_back(bos);
      p.insert(p.end(), ex.instruction.begin(), ex.instruction.end());
      p.insert(p.end(), ex.question.begin(), ex.question.end());
      p.insert(p.end(), answer.begin(), answer.end());
      return p;
    };
    prompts.push_back(assemble(ex.a_plus));
    prompts.push_back(assemble(ex.a_minus));
  }
  return prompts;
}

ActivationBank collect_activations(const ModelConfig& cfg, const ModelParams& params,
                                   const std::vector<DualTaskExample>& examples, int bos,
                                   const std::string& task_tag, const ProfilingConfig& pcfg) {
  const int dh = cfg.d_head();
  ActivationBank bank;
  bank.task = task_tag;
  bank.layers = cfg.layers;
  bank.heads = cfg.heads;
  bank.d_head = dh;
  bank.d_model = cfg.d_model;
  bank.plus.resize(static_cast<size_t>(cfg.layers * cfg.heads));
  bank.minus.resize(static_cast<size_t>(cfg.layers * cfg.heads));
  bank.full_plus.assign(static_cast<size_t>(cfg.layers),
                        Matf(static_cast<Eigen::Index>(examples.size()), cfg.d_model));
  bank.full_minus.assign(static_cast<size_t>(cfg.layers),
                         Matf(static_cast<Eigen::Index>(examples.size()), cfg.d_model));

  std::vector<DualTaskExample> sorted = examples;
  std::sort(sorted.begin(), sorted.end(),
            [](const DualTaskExample& a, const DualTaskExample& b) { return a.id < b.id; });

  // One layer-row matrix of extracted vectors per (example, polarity); filled
  // in parallel, assembled in example order afterwards.
  const int n = static_cast<int>(sorted.size());
  std::vector<std::array<Matf, 2>> extracted(static_cast<size_t>(n));

  parallel_for(n, [&](int i) {
    const DualTaskExample& ex = sorted[static_cast<size_t>(i)];
    require(!ex.a_plus.empty() && !ex.a_minus.empty(), "example with empty answer span");
    const auto prompts = build_din({ex}, bos);
    for (int pol = 0; pol < 2; ++pol) {
      const std::vector<int>& prompt = prompts[static_cast<size_t>(pol)];
      const int answer_len =
          static_cast<int>(pol == 0 ? ex.a_plus.size() : ex.a_minus.size());
      const ForwardResult fr = forward_capture(cfg, params, prompt, /*capture=*/true);
      const int T = static_cast<int>(prompt.size());
      Matf rows(cfg.layers, cfg.d_model);
      for (int l = 0; l < cfg.layers; ++l) {
        const auto rec_at = [&](int pos) -> const CaptureRecord& {
          return fr.captures[static_cast<size_t>(pos * cfg.layers + l)];
        };
        if (pcfg.position == ExtractPosition::kLastAnswerToken) {
          rows.row(l) = rec_at(T - 1).x_half.transpose();
        } else {
          Vecf acc = Vecf::Zero(cfg.d_model);
          for (int pos = T - answer_len; pos < T; ++pos) acc += rec_at(pos).x_half;
          rows.row(l) = (acc / static_cast<float>(answer_len)).transpose();
        }
      }
      extracted[static_cast<size_t>(i)][static_cast<size_t>(pol)] = std::move(rows);
    }
  });

  for (int i = 0; i < n; ++i) {
    const DualTaskExample& ex = sorted[static_cast<size_t>(i)];
    bank.example_ids.push_back(ex.id);
    for (int pol = 0; pol < 2; ++pol) {
      const Matf& rows = extracted[static_cast<size_t>(i)][static_cast<size_t>(pol)];
      auto& side = pol == 0 ? bank.plus : bank.minus;
      auto& full = pol == 0 ? bank.full_plus : bank.full_minus;
      for (int l = 0; l < cfg.layers; ++l) {
        full[static_cast<size_t>(l)].row(i) = rows.row(l);
        for (int h = 0; h < cfg.heads; ++h) {
          ActRecord rec;
          rec.example_id = ex.id;
          rec.vec = rows.row(l).segment(h * dh, dh).transpose();
          side[static_cast<size_t>(l * cfg.heads + h)].push_back(std::move(rec));
        }
      }
    }
  }
  bank.check_integrity();
  return bank;
}

void ActivationBank::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["task"] = task;
  manifest["layers"] = layers;
  manifest["heads"] = heads;
  manifest["d_head"] = d_head;
  manifest["d_model"] = d_model;
  manifest["example_ids"] = example_ids;
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  require(out.good(), "cannot write bank manifest");
  out << manifest.dump(2) << "\n";
  out.close();

  const auto block_name = [](int l, int h, const char* pol) {
    return "a_" + std::to_string(l) + "_" + std::to_string(h) + "_" + pol + ".f32";
  };
  for (int l = 0; l < layers; ++l) {
    for (int h = 0; h < heads; ++h) {
      for (int pol = 0; pol < 2; ++pol) {
        const auto& lst = pol == 0 ? plus[static_cast<size_t>(l * heads + h)]
                                   : minus[static_cast<size_t>(l * heads + h)];
        Matf block(static_cast<Eigen::Index>(lst.size()), d_head);
        for (size_t i = 0; i < lst.size(); ++i)
          block.row(static_cast<Eigen::Index>(i)) = lst[i].vec.transpose();
        write_tensor(dir / block_name(l, h, pol == 0 ? "plus" : "minus"), block, "activations");
      }
    }
    write_tensor(dir / ("full_" + std::to_string(l) + "_plus.f32"),
                 full_plus[static_cast<size_t>(l)], "residual");
    write_tensor(dir / ("full_" + std::to_string(l) + "_minus.f32"),
                 full_minus[static_cast<size_t>(l)], "residual");
  }
}

ActivationBank ActivationBank::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  require(in.good(), "cannot open bank manifest in " + dir.string());
  nlohmann::json manifest;
  in >> manifest;

  ActivationBank bank;
  bank.task = manifest.at("task").get<std::string>();
  bank.layers = manifest.at("layers").get<int>();
  bank.heads = manifest.at("heads").get<int>();
  bank.d_head = manifest.at("d_head").get<int>();
  bank.d_model = manifest.at("d_model").get<int>();
  bank.example_ids = manifest.at("example_ids").get<std::vector<int>>();
  bank.plus.resize(static_cast<size_t>(bank.layers * bank.heads));
  bank.minus.resize(static_cast<size_t>(bank.layers * bank.heads));

  const Eigen::Index n = static_cast<Eigen::Index>(bank.example_ids.size());
  for (int l = 0; l < bank.layers; ++l) {
    for (int h = 0; h < bank.heads; ++h) {
      for (int pol = 0; pol < 2; ++pol) {
        const std::string name = "a_" + std::to_string(l) + "_" + std::to_string(h) + "_" +
                                 (pol == 0 ? "plus" : "minus") + ".f32";
        Matf block = read_tensor_matrix(dir / name, n, bank.d_head);
        auto& lst = pol == 0 ? bank.plus[static_cast<size_t>(l * bank.heads + h)]
                             : bank.minus[static_cast<size_t>(l * bank.heads + h)];
        for (Eigen::Index i = 0; i < n; ++i) {
          ActRecord rec;
          rec.example_id = bank.example_ids[static_cast<size_t>(i)];
          rec.vec = block.row(i).transpose();
          lst.push_back(std::move(rec));
        }
      }
    }
    bank.full_plus.push_back(
        read_tensor_matrix(dir / ("full_" + std::to_string(l) + "_plus.f32"), n, bank.d_model));
    bank.full_minus.push_back(
        read_tensor_matrix(dir / ("full_" + std::to_string(l) + "_minus.f32"), n, bank.d_model));
  }
  bank.check_integrity();
  return bank;
}

}  // namespace space
