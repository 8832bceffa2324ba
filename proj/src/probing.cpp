#include "space/probing.hpp"

#include <algorithm>
#include <fstream>

#include <nlohmann/json.hpp>

#include "space/optim.hpp"
#include "space/parallel.hpp"
#include "space/rng.hpp"
#include "space/tensor_io.hpp"

namespace space {

namespace {

constexpr uint64_t kProbeStream = 0x5001;

// Modified Gram-Schmidt on columns; degenerate columns are replaced with the
// unit basis vector of their index re-orthogonalized.
void orthonormalize_columns(Matf& theta) {
  const Eigen::Index d = theta.rows();
  const Eigen::Index n = theta.cols();
  for (Eigen::Index j = 0; j < n; ++j) {
    Vecf col = theta.col(j);
    for (Eigen::Index i = 0; i < j; ++i)
      col -= static_cast<float>(dot64(theta.col(i), col)) * theta.col(i);
    float norm = col.norm();
    if (norm < 1e-6f) {
      col = Vecf::Zero(d);
      col(j % d) = 1.0f;
      for (Eigen::Index i = 0; i < j; ++i)
        col -= static_cast<float>(dot64(theta.col(i), col)) * theta.col(i);
      norm = col.norm();
      require(norm > 1e-6f, "probe basis collapse");
    }
    theta.col(j) = col / norm;
  }
}

float max_pairwise_abs_cosine(const Matf& theta) {
  float worst = 0.0f;
  for (Eigen::Index i = 0; i < theta.cols(); ++i) {
    for (Eigen::Index j = i + 1; j < theta.cols(); ++j) {
      const double denom = theta.col(i).norm() * theta.col(j).norm();
      if (denom == 0) continue;
      worst = std::max(worst,
                       static_cast<float>(std::abs(dot64(theta.col(i), theta.col(j))) / denom));
    }
  }
  return worst;
}

struct PairBatch {
  Matf xi, xj, labels;
};

// y=1 pairs attract two plus records of different examples; y=0 pairs repel a
// plus record from a minus record. Sampled pair_ratio : 1.
PairBatch sample_pairs(const Matf& plus, const Matf& minus, int count, double pair_ratio,
                       Rng& rng) {
  const auto m_plus = static_cast<uint64_t>(plus.rows());
  const auto m_minus = static_cast<uint64_t>(minus.rows());
  const int n_pos =
      std::clamp(static_cast<int>(std::lround(count * pair_ratio / (1.0 + pair_ratio))), 1,
                 count - 1);
  PairBatch b;
  b.xi.resize(count, plus.cols());
  b.xj.resize(count, plus.cols());
  b.labels.resize(count, 1);
  for (int r = 0; r < count; ++r) {
    if (r < n_pos) {
      const auto i = rng.uniform_int(m_plus);
      auto j = rng.uniform_int(m_plus);
      if (m_plus > 1)
        while (j == i) j = rng.uniform_int(m_plus);
      b.xi.row(r) = plus.row(static_cast<Eigen::Index>(i));
      b.xj.row(r) = plus.row(static_cast<Eigen::Index>(j));
      b.labels(r, 0) = 1.0f;
    } else {
      b.xi.row(r) = plus.row(static_cast<Eigen::Index>(rng.uniform_int(m_plus)));
      b.xj.row(r) = minus.row(static_cast<Eigen::Index>(rng.uniform_int(m_minus)));
      b.labels(r, 0) = 0.0f;
    }
  }
  return b;
}

}  // namespace

template <class S>
typename ad::Graph<S>::Var build_contrastive_loss(ad::Graph<S>& g,
                                                  typename ad::Graph<S>::Var theta,
                                                  const MatX<S>& xi, const MatX<S>& xj,
                                                  const MatX<S>& labels) {
  require(xi.rows() > 0, "contrastive loss: empty pair batch");
  auto fi = g.matmul(g.constant(xi), theta);
  auto fj = g.matmul(g.constant(xj), theta);
  auto scores = g.rowwise_dot(fi, fj);
  return g.logistic_bce_mean(scores, labels);
}

template <class S>
typename ad::Graph<S>::Var build_orthogonality_loss(ad::Graph<S>& g,
                                                    typename ad::Graph<S>::Var theta) {
  const Eigen::Index n = g.value(theta).cols();
  auto gram = g.matmul(theta, theta, true, false);
  MatX<S> mask = MatX<S>::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < i; ++j) mask(i, j) = S(1);
  return g.sum(g.hadamard_const(g.sigmoid(gram), std::move(mask)));
}

template typename ad::Graph<float>::Var build_contrastive_loss<float>(
    ad::Graph<float>&, ad::Graph<float>::Var, const MatX<float>&, const MatX<float>&,
    const MatX<float>&);
template typename ad::Graph<double>::Var build_contrastive_loss<double>(
    ad::Graph<double>&, ad::Graph<double>::Var, const MatX<double>&, const MatX<double>&,
    const MatX<double>&);
template typename ad::Graph<float>::Var build_orthogonality_loss<float>(ad::Graph<float>&,
                                                                        ad::Graph<float>::Var);
template typename ad::Graph<double>::Var build_orthogonality_loss<double>(ad::Graph<double>&,
                                                                          ad::Graph<double>::Var);

double lambda_schedule(double lambda0, double p, double current_sq_norm, double running_max_sq) {
  require(lambda0 > 0.0 && p >= 0.0, "lambda schedule needs lambda0 > 0 and p >= 0");
  if (running_max_sq <= 0.0 || current_sq_norm <= 0.0) return lambda0;
  const double ratio = std::clamp(current_sq_norm / running_max_sq, 0.0, 1.0);
  return lambda0 * (1.0 + p * ratio);
}

ProbeSet train_probes_for_head(const Matf& plus, const Matf& minus, int layer, int head,
                               const ProbeTrainConfig& cfg) {
  require(plus.rows() == minus.rows() && plus.rows() >= 3, "probe training needs paired records");
  require(cfg.n_probes >= 1 && cfg.n_probes <= plus.cols(),
          "probe count must be in [1, d_head]");
  const Eigen::Index d = plus.cols();
  const Eigen::Index m = plus.rows();

  ProbeSet ps;
  ps.layer = layer;
  ps.head = head;
  ps.lambda_min = static_cast<float>(cfg.lambda0 * (1.0 + cfg.p));
  ps.lambda_max = static_cast<float>(cfg.lambda0);

  Rng rng = Rng::derive(cfg.seed, {kProbeStream, static_cast<uint64_t>(layer),
                                   static_cast<uint64_t>(head)});

  // Held-out split by paired example index.
  std::vector<int> idx(static_cast<size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) idx[static_cast<size_t>(i)] = static_cast<int>(i);
  rng.shuffle(idx);
  const Eigen::Index n_val = std::max<Eigen::Index>(
      1, static_cast<Eigen::Index>(std::lround(cfg.val_fraction * static_cast<double>(m))));
  const Eigen::Index n_train = m - n_val;
  require(n_train >= 2, "probe training split too small");

  const auto take = [&](const Matf& src, Eigen::Index from, Eigen::Index count) {
    Matf out(count, d);
    for (Eigen::Index i = 0; i < count; ++i)
      out.row(i) = src.row(idx[static_cast<size_t>(from + i)]);
    return out;
  };
  Matf train_plus = take(plus, 0, n_train);
  Matf train_minus = take(minus, 0, n_train);
  Matf val_plus = take(plus, n_train, n_val);
  Matf val_minus = take(minus, n_train, n_val);

  // Mean-center with training records of both polarities.
  Vecf center = Vecf::Zero(d);
  for (Eigen::Index i = 0; i < n_train; ++i)
    center += (train_plus.row(i) + train_minus.row(i)).transpose();
  center /= static_cast<float>(2 * n_train);
  ps.center = center;
  train_plus.rowwise() -= center.transpose();
  train_minus.rowwise() -= center.transpose();
  val_plus.rowwise() -= center.transpose();
  val_minus.rowwise() -= center.transpose();

  Matf theta(d, cfg.n_probes);
  rng.fill_normal(theta, 0.5);

  std::vector<const Matf*> param_list = {&theta};
  AdamState<float> adam(param_list, cfg.lr);

  try {
    double running_max_sq = 0.0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      running_max_sq = 0.0;  // schedule normalizer resets each epoch
      for (int b = 0; b < cfg.batches_per_epoch; ++b) {
        const PairBatch batch =
            sample_pairs(train_plus, train_minus, cfg.batch_pairs, cfg.pair_ratio, rng);
        ad::Graph<float> g(/*checked=*/true);
        auto th = g.input("theta", theta, true);
        auto l_ctr = build_contrastive_loss<float>(g, th, batch.xi, batch.xj, batch.labels);
        Matf grad_orth = Matf::Zero(d, cfg.n_probes);
        double lambda_t = cfg.lambda0;
        double l_orth_val = 0.0;
        if (cfg.n_probes >= 2) {
          auto l_orth = build_orthogonality_loss<float>(g, th);
          l_orth_val = static_cast<double>(g.scalar(l_orth));
          g.backward(l_orth);
          grad_orth = g.gradient(th);
          const double cur_sq = static_cast<double>(grad_orth.squaredNorm());
          running_max_sq = std::max(running_max_sq, cur_sq);
          lambda_t = lambda_schedule(cfg.lambda0, cfg.p, cur_sq, running_max_sq);
        }
        require(lambda_t >= cfg.lambda0 - 1e-12 &&
                    lambda_t <= cfg.lambda0 * (1.0 + cfg.p) + 1e-12,
                "lambda_t left its contract bounds");
        ps.lambda_min = std::min(ps.lambda_min, static_cast<float>(lambda_t));
        ps.lambda_max = std::max(ps.lambda_max, static_cast<float>(lambda_t));

        g.backward(l_ctr);
        Matf grad = g.gradient(th) + static_cast<float>(lambda_t) * grad_orth;
        const double total = static_cast<double>(g.scalar(l_ctr)) + lambda_t * l_orth_val;
        require(std::isfinite(total), "non-finite probe loss");
        ps.loss_trace.push_back(static_cast<float>(total));

        std::vector<MatX<float>*> params = {&theta};
        std::vector<const Matf*> grads = {&grad};
        adam.step(params, grads);
      }
    }
  } catch (const Error&) {
    ps.aborted = true;
    theta.setZero();
    for (int j = 0; j < cfg.n_probes; ++j) theta(j % d, j) = 1.0f;
  }

  orthonormalize_columns(theta);
  ps.theta = theta;
  ps.max_abs_cosine = max_pairwise_abs_cosine(theta);

  // Per-probe sign alignment and accuracy on the training split.
  ps.probe_signs.resize(cfg.n_probes);
  ps.probe_weights.resize(cfg.n_probes);
  for (int j = 0; j < cfg.n_probes; ++j) {
    const Vecf dir = theta.col(j);
    double mean_plus = 0.0, mean_minus = 0.0;
    for (Eigen::Index i = 0; i < n_train; ++i) {
      mean_plus += dot64(dir, train_plus.row(i).transpose());
      mean_minus += dot64(dir, train_minus.row(i).transpose());
    }
    const float sign = mean_plus >= mean_minus ? 1.0f : -1.0f;
    int correct = 0;
    for (Eigen::Index i = 0; i < n_train; ++i) {
      if (sign * dot64(dir, train_plus.row(i).transpose()) > 0) ++correct;
      if (sign * dot64(dir, train_minus.row(i).transpose()) <= 0) ++correct;
    }
    ps.probe_signs(j) = sign;
    ps.probe_weights(j) = static_cast<float>(correct) / static_cast<float>(2 * n_train);
  }

  Vecf fused = Vecf::Zero(d);
  for (int j = 0; j < cfg.n_probes; ++j)
    fused += ps.probe_weights(j) * ps.probe_signs(j) * theta.col(j);
  if (fused.norm() < 1e-8f) fused = ps.probe_signs(0) * theta.col(0);
  ps.fused = fused / fused.norm();

  if (ps.aborted) {
    ps.val_accuracy = 0.5f;
    return ps;
  }

  int correct = 0;
  for (Eigen::Index i = 0; i < n_val; ++i) {
    if (dot64(ps.fused, val_plus.row(i).transpose()) > 0) ++correct;
    if (dot64(ps.fused, val_minus.row(i).transpose()) <= 0) ++correct;
  }
  ps.val_accuracy = static_cast<float>(correct) / static_cast<float>(2 * n_val);
  return ps;
}

std::vector<ProbeSet> train_probes(const ActivationBank& bank, const ProbeTrainConfig& cfg) {
  bank.check_integrity();
  const int slots = bank.layers * bank.heads;
  std::vector<ProbeSet> sets(static_cast<size_t>(slots));
  parallel_for(slots, [&](int slot) {
    const int l = slot / bank.heads;
    const int h = slot % bank.heads;
    const auto& plus = bank.at(l, h, Polarity::kPlus);
    const auto& minus = bank.at(l, h, Polarity::kMinus);
    Matf mp(static_cast<Eigen::Index>(plus.size()), bank.d_head);
    Matf mm(static_cast<Eigen::Index>(minus.size()), bank.d_head);
    for (size_t i = 0; i < plus.size(); ++i) {
      mp.row(static_cast<Eigen::Index>(i)) = plus[i].vec.transpose();
      mm.row(static_cast<Eigen::Index>(i)) = minus[i].vec.transpose();
    }
    sets[static_cast<size_t>(slot)] = train_probes_for_head(mp, mm, l, h, cfg);
  });
  return sets;
}

double probe_accuracy(const ProbeSet& ps, const Matf& acts, const std::vector<int>& labels) {
  require(acts.rows() > 0, "probe_accuracy: empty activation set");
  require(static_cast<size_t>(acts.rows()) == labels.size(),
          "probe_accuracy: one label per activation required");
  int correct = 0;
  for (Eigen::Index i = 0; i < acts.rows(); ++i) {
    const double proj = dot64(ps.fused, (acts.row(i).transpose() - ps.center));
    const int predicted = proj > 0 ? 1 : -1;
    if (predicted == labels[static_cast<size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(acts.rows());
}

HeadSelection select_top_k(const std::vector<ProbeSet>& sets, const std::string& task, int k) {
  require(k >= 1 && k <= static_cast<int>(sets.size()), "select_top_k: k out of range");
  HeadSelection sel;
  sel.task = task;
  sel.k = k;
  for (const ProbeSet& ps : sets)
    sel.ranked.emplace_back(HeadId{ps.layer, ps.head}, ps.val_accuracy);
  std::stable_sort(sel.ranked.begin(), sel.ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  for (int i = 0; i < k; ++i) sel.selected.push_back(sel.ranked[static_cast<size_t>(i)].first);
  std::sort(sel.selected.begin(), sel.selected.end());
  return sel;
}

IntersectResult select_and_intersect(const std::vector<ProbeSet>& fact_sets,
                                     const std::vector<ProbeSet>& faith_sets, int k,
                                     int total_heads) {
  IntersectResult result;
  int k_cur = std::min(k, total_heads);
  while (true) {
    const HeadSelection fact = select_top_k(fact_sets, "factual", k_cur);
    const HeadSelection faith = select_top_k(faith_sets, "faithful", k_cur);
    std::vector<HeadId> shared;
    std::set_intersection(fact.selected.begin(), fact.selected.end(), faith.selected.begin(),
                          faith.selected.end(), std::back_inserter(shared));
    if (!shared.empty() || k_cur >= total_heads) {
      result.heads = std::move(shared);
      result.k_used = k_cur;
      return result;
    }
    k_cur = std::min(k_cur + 2, total_heads);
    result.escalated = true;
  }
}

void save_probe_sets(const std::filesystem::path& dir, const std::vector<ProbeSet>& sets) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta = nlohmann::json::array();
  for (const ProbeSet& ps : sets) {
    nlohmann::json j;
    j["layer"] = ps.layer;
    j["head"] = ps.head;
    j["val_accuracy"] = ps.val_accuracy;
    j["max_abs_cosine"] = ps.max_abs_cosine;
    j["lambda_min"] = ps.lambda_min;
    j["lambda_max"] = ps.lambda_max;
    j["aborted"] = ps.aborted;
    j["loss_trace"] = ps.loss_trace;
    std::vector<float> signs(ps.probe_signs.data(), ps.probe_signs.data() + ps.probe_signs.size());
    std::vector<float> weights(ps.probe_weights.data(),
                               ps.probe_weights.data() + ps.probe_weights.size());
    j["probe_signs"] = signs;
    j["probe_weights"] = weights;
    meta.push_back(std::move(j));
    const std::string stem = "probe_" + std::to_string(ps.layer) + "_" + std::to_string(ps.head);
    write_tensor(dir / (stem + ".f32"), ps.theta, "theta");
    write_tensor(dir / (stem + "_center.f32"), ps.center, "center");
    write_tensor(dir / (stem + "_fused.f32"), ps.fused, "fused");
  }
  std::ofstream out(dir / "probes.json", std::ios::trunc);
  require(out.good(), "cannot write probe metadata");
  out << meta.dump(2) << "\n";
}

std::vector<ProbeSet> load_probe_sets(const std::filesystem::path& dir) {
  std::ifstream in(dir / "probes.json");
  require(in.good(), "cannot open probe metadata in " + dir.string());
  nlohmann::json meta;
  in >> meta;
  std::vector<ProbeSet> sets;
  for (const auto& j : meta) {
    ProbeSet ps;
    ps.layer = j.at("layer").get<int>();
    ps.head = j.at("head").get<int>();
    ps.val_accuracy = j.at("val_accuracy").get<float>();
    ps.max_abs_cosine = j.at("max_abs_cosine").get<float>();
    ps.lambda_min = j.at("lambda_min").get<float>();
    ps.lambda_max = j.at("lambda_max").get<float>();
    ps.aborted = j.at("aborted").get<bool>();
    ps.loss_trace = j.at("loss_trace").get<std::vector<float>>();
    const auto signs = j.at("probe_signs").get<std::vector<float>>();
    const auto weights = j.at("probe_weights").get<std::vector<float>>();
    ps.probe_signs = Eigen::Map<const Vecf>(signs.data(), static_cast<Eigen::Index>(signs.size()));
    ps.probe_weights =
        Eigen::Map<const Vecf>(weights.data(), static_cast<Eigen::Index>(weights.size()));
    const std::string stem = "probe_" + std::to_string(ps.layer) + "_" + std::to_string(ps.head);
    NamedTensor theta = read_tensor(dir / (stem + ".f32"));
    ps.theta = theta.data;
    ps.center = read_tensor_vector(dir / (stem + "_center.f32"), ps.theta.rows());
    ps.fused = read_tensor_vector(dir / (stem + "_fused.f32"), ps.theta.rows());
    sets.push_back(std::move(ps));
  }
  return sets;
}

}  // namespace space
