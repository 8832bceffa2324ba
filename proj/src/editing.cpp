#include "space/editing.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "space/profiling.hpp"
#include "space/tensor_io.hpp"

namespace space {

void EditPlan::validate(int layers, int heads, int d_head) const {
  require(std::isfinite(alpha), "edit plan: non-finite alpha");
  std::vector<bool> seen(static_cast<size_t>(layers * heads), false);
  for (const EditEntry& e : entries) {
    require(e.layer >= 0 && e.layer < layers,
            "edit plan entry references layer " + std::to_string(e.layer));
    require(e.head >= 0 && e.head < heads,
            "edit plan entry references head " + std::to_string(e.head));
    require(e.theta.size() == d_head, "edit plan direction has wrong dimension");
    require(std::isfinite(e.scale) && e.scale >= 0.0f, "edit plan scale must be finite and >= 0");
    require(all_finite(e.theta), "edit plan direction has non-finite entries");
    const float norm = e.theta.norm();
    require(std::abs(norm - 1.0f) <= 1e-4f, "edit plan direction is not unit length");
    auto slot = static_cast<size_t>(e.layer * heads + e.head);
    require(!seen[slot], "duplicate edit plan entry for one head");
    seen[slot] = true;
  }
}

Matf EditPlan::layer_vectors(int layers, int heads, int d_head) const {
  validate(layers, heads, d_head);
  Matf rows = Matf::Zero(layers, static_cast<Eigen::Index>(heads) * d_head);
  for (const EditEntry& e : entries)
    rows.row(e.layer).segment(e.head * d_head, d_head) += e.scale * e.theta.transpose();
  return rows;
}

void EditPlan::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["alpha"] = alpha;
  nlohmann::json list = nlohmann::json::array();
  Matf block(static_cast<Eigen::Index>(entries.size()),
             entries.empty() ? 0 : entries[0].theta.size());
  for (size_t i = 0; i < entries.size(); ++i) {
    const EditEntry& e = entries[i];
    list.push_back({{"layer", e.layer}, {"head", e.head}, {"scale", e.scale}});
    block.row(static_cast<Eigen::Index>(i)) = e.theta.transpose();
  }
  j["entries"] = list;
  std::ofstream out(dir / "plan.json", std::ios::trunc);
  require(out.good(), "cannot write edit plan");
  out << j.dump(2) << "\n";
  out.close();
  if (!entries.empty()) write_tensor(dir / "directions.f32", block, "directions");
}

EditPlan EditPlan::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "plan.json");
  require(in.good(), "cannot open edit plan in " + dir.string());
  nlohmann::json j;
  in >> j;
  EditPlan plan;
  plan.alpha = j.at("alpha").get<float>();
  const auto& list = j.at("entries");
  if (!list.empty()) {
    NamedTensor block = read_tensor(dir / "directions.f32");
    require(block.data.rows() == static_cast<Eigen::Index>(list.size()),
            "edit plan direction block does not match entry list");
    for (size_t i = 0; i < list.size(); ++i) {
      EditEntry e;
      e.layer = list[i].at("layer").get<int>();
      e.head = list[i].at("head").get<int>();
      e.scale = list[i].at("scale").get<float>();
      e.theta = block.data.row(static_cast<Eigen::Index>(i)).transpose();
      plan.entries.push_back(std::move(e));
    }
  }
  return plan;
}

EditPlan negate_plan(EditPlan plan) {
  for (EditEntry& e : plan.entries) e.theta = -e.theta;
  return plan;
}

float compute_scale(const ActivationBank& fact, const ActivationBank& faith, int layer, int head,
                    const Vecf& theta) {
  require(std::abs(theta.norm() - 1.0f) <= 1e-4f, "compute_scale: direction must be unit length");
  std::vector<double> proj;
  const auto pool = [&](const ActivationBank& bank) {
    for (Polarity p : {Polarity::kPlus, Polarity::kMinus})
      for (const ActRecord& rec : bank.at(layer, head, p)) proj.push_back(dot64(theta, rec.vec));
  };
  pool(fact);
  pool(faith);
  require(proj.size() >= 2, "compute_scale: need at least 2 activations");
  double mean = 0.0;
  for (double v : proj) mean += v;
  mean /= static_cast<double>(proj.size());
  double var = 0.0;
  for (double v : proj) var += (v - mean) * (v - mean);
  var /= static_cast<double>(proj.size());  // population variance
  return static_cast<float>(std::sqrt(var));
}

}  // namespace space
