#include "space/model.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <memory>

#include <nlohmann/json.hpp>

#include "space/optim.hpp"
#include "space/parallel.hpp"
#include "space/tensor_io.hpp"

namespace space {

namespace {

constexpr uint64_t kInitStream = 0x4d01;
constexpr uint64_t kEpochStream = 0x4d02;

// Row-wise RMS normalization with scalar gain vector, double accumulation.
void rmsnorm_rows(const Matf& x, const Matf& gain, float eps, Matf& out) {
  out.resize(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double ms = mean64(x.row(i).cwiseProduct(x.row(i)));
    const float inv = static_cast<float>(1.0 / std::sqrt(ms + static_cast<double>(eps)));
    out.row(i) = (x.row(i) * inv).cwiseProduct(gain.row(0));
  }
}

void causal_softmax_rows(Matf& scores) {
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    double mx = -HUGE_VAL;
    for (Eigen::Index j = 0; j <= i; ++j) mx = std::max(mx, static_cast<double>(scores(i, j)));
    double denom = 0.0;
    for (Eigen::Index j = 0; j <= i; ++j)
      denom += std::exp(static_cast<double>(scores(i, j)) - mx);
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      scores(i, j) = j <= i ? static_cast<float>(
                                  std::exp(static_cast<double>(scores(i, j)) - mx) / denom)
                            : 0.0f;
    }
  }
}

void check_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
  require(!tokens.empty(), "empty token sequence");
  require(static_cast<int>(tokens.size()) <= cfg.context,
          "sequence length " + std::to_string(tokens.size()) + " exceeds context " +
              std::to_string(cfg.context));
  for (int t : tokens)
    require(t >= 0 && t < cfg.vocab, "token id " + std::to_string(t) + " outside vocabulary");
}

}  // namespace

template <class S>
ModelParamsT<S> ModelParamsT<S>::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng = Rng::derive(seed, {kInitStream});
  const double w_std = 0.08;
  const auto normal_mat = [&](Eigen::Index r, Eigen::Index c) {
    MatX<S> m(r, c);
    rng.fill_normal(m, w_std);
    return m;
  };
  ModelParamsT<S> p;
  p.tok_emb = normal_mat(cfg.vocab, cfg.d_model);
  p.pos_emb = normal_mat(cfg.context, cfg.d_model);
  for (int l = 0; l < cfg.layers; ++l) {
    Layer lay;
    lay.wq = normal_mat(cfg.d_model, cfg.d_model);
    lay.wk = normal_mat(cfg.d_model, cfg.d_model);
    lay.wv = normal_mat(cfg.d_model, cfg.d_model);
    lay.wo = normal_mat(cfg.d_model, cfg.d_model);
    lay.w1 = normal_mat(cfg.d_model, cfg.ffn_dim());
    lay.w2 = normal_mat(cfg.ffn_dim(), cfg.d_model);
    lay.g1 = MatX<S>::Ones(1, cfg.d_model);
    lay.g2 = MatX<S>::Ones(1, cfg.d_model);
    p.layers.push_back(std::move(lay));
  }
  p.unemb = normal_mat(cfg.vocab, cfg.d_model);
  return p;
}

template <class S>
std::vector<std::pair<std::string, MatX<S>*>> ModelParamsT<S>::named_tensors() {
  std::vector<std::pair<std::string, MatX<S>*>> out;
  out.emplace_back("tok_emb", &tok_emb);
  out.emplace_back("pos_emb", &pos_emb);
  for (size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    out.emplace_back(p + "wq", &layers[l].wq);
    out.emplace_back(p + "wk", &layers[l].wk);
    out.emplace_back(p + "wv", &layers[l].wv);
    out.emplace_back(p + "wo", &layers[l].wo);
    out.emplace_back(p + "w1", &layers[l].w1);
    out.emplace_back(p + "w2", &layers[l].w2);
    out.emplace_back(p + "g1", &layers[l].g1);
    out.emplace_back(p + "g2", &layers[l].g2);
  }
  out.emplace_back("unemb", &unemb);
  return out;
}

template <class S>
std::vector<std::pair<std::string, const MatX<S>*>> ModelParamsT<S>::named_tensors() const {
  auto mut = const_cast<ModelParamsT<S>*>(this)->named_tensors();
  std::vector<std::pair<std::string, const MatX<S>*>> out;
  out.reserve(mut.size());
  for (auto& [name, ptr] : mut) out.emplace_back(name, ptr);
  return out;
}

template struct ModelParamsT<float>;
template struct ModelParamsT<double>;

void save_model(const std::filesystem::path& dir, const ModelConfig& cfg, const ModelParams& p) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["layers"] = cfg.layers;
  j["heads"] = cfg.heads;
  j["d_model"] = cfg.d_model;
  j["vocab"] = cfg.vocab;
  j["context"] = cfg.context;
  j["norm_eps"] = cfg.norm_eps;
  std::ofstream out(dir / "config.json", std::ios::trunc);
  require(out.good(), "cannot write model config");
  out << j.dump(2) << "\n";
  out.close();
  for (const auto& [name, tensor] : p.named_tensors())
    write_tensor(dir / (name + ".f32"), *tensor, name);
}

ModelParams load_model(const std::filesystem::path& dir, ModelConfig& cfg) {
  std::ifstream in(dir / "config.json");
  require(in.good(), "cannot open model config in " + dir.string());
  nlohmann::json j;
  in >> j;
  cfg.layers = j.at("layers").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.vocab = j.at("vocab").get<int>();
  cfg.context = j.at("context").get<int>();
  cfg.norm_eps = j.at("norm_eps").get<float>();
  cfg.validate();
  ModelParams p = ModelParams::init(cfg, 0);
  for (auto& [name, tensor] : p.named_tensors())
    *tensor = read_tensor_matrix(dir / (name + ".f32"), tensor->rows(), tensor->cols());
  return p;
}

ForwardResult forward_capture(const ModelConfig& cfg, const ModelParams& params,
                              std::span<const int> tokens, bool capture, const EditPlan* plan,
                              float alpha) {
  check_tokens(cfg, tokens);
  const int T = static_cast<int>(tokens.size());
  const int dh = cfg.d_head();
  const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));

  float eff_alpha = 0.0f;
  Matf edit_rows;
  if (plan != nullptr) {
    eff_alpha = alpha >= 0.0f ? alpha : plan->alpha;
    if (eff_alpha != 0.0f) edit_rows = plan->layer_vectors(cfg.layers, cfg.heads, dh);
  }

  Matf x(T, cfg.d_model);
  for (int t = 0; t < T; ++t)
    x.row(t) = params.tok_emb.row(tokens[static_cast<size_t>(t)]) + params.pos_emb.row(t);

  ForwardResult result;
  if (capture) result.captures.reserve(static_cast<size_t>(T * cfg.layers));

  Matf q, k, v, attn, proj, x_half, ffn, pre_norm, scores;
  attn.resize(T, cfg.d_model);
  for (int l = 0; l < cfg.layers; ++l) {
    const auto& lay = params.layers[static_cast<size_t>(l)];
    q.noalias() = x * lay.wq;
    k.noalias() = x * lay.wk;
    v.noalias() = x * lay.wv;
    for (int h = 0; h < cfg.heads; ++h) {
      const auto qh = q.middleCols(h * dh, dh);
      const auto kh = k.middleCols(h * dh, dh);
      scores.noalias() = qh * kh.transpose();
      scores *= inv_sqrt_dh;
      causal_softmax_rows(scores);
      attn.middleCols(h * dh, dh).noalias() = scores * v.middleCols(h * dh, dh);
    }
    proj.noalias() = attn * lay.wo;
    pre_norm = x + proj;
    rmsnorm_rows(pre_norm, lay.g1, cfg.norm_eps, x_half);

    if (capture) {
      for (int t = 0; t < T; ++t) {
        CaptureRecord rec;
        rec.layer = l;
        rec.pos = t;
        rec.x_half = x_half.row(t).transpose();
        result.captures.push_back(std::move(rec));
      }
    }

    ffn.noalias() = (x_half * lay.w1).cwiseMax(0.0f) * lay.w2;
    pre_norm = x_half + ffn;
    if (plan != nullptr && eff_alpha != 0.0f)
      pre_norm.rowwise() += eff_alpha * edit_rows.row(l);
    rmsnorm_rows(pre_norm, lay.g2, cfg.norm_eps, x);
  }

  result.logits.noalias() = x * params.unemb.transpose();
  return result;
}

std::vector<int> generate(const ModelConfig& cfg, const ModelParams& params,
                          std::span<const int> prompt, int max_new, int eos, const EditPlan* plan,
                          float alpha) {
  require(!prompt.empty(), "generate: empty prompt");
  check_tokens(cfg, prompt);
  std::vector<int> seq(prompt.begin(), prompt.end());
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(seq.size()) >= cfg.context) break;
    const ForwardResult fr = forward_capture(cfg, params, seq, false, plan, alpha);
    const auto last = fr.logits.row(fr.logits.rows() - 1);
    int best = 0;
    for (Eigen::Index j = 1; j < last.size(); ++j)
      if (last(j) > last(best)) best = static_cast<int>(j);
    seq.push_back(best);
    if (best == eos) break;
  }
  return seq;
}

template <class S>
LossGraph<S> build_sequence_loss(const ModelConfig& cfg, const ModelParamsT<S>& params,
                                 std::span<const int> tokens) {
  check_tokens(cfg, tokens);
  require(tokens.size() >= 2, "training sequence needs at least 2 tokens");
  const int T = static_cast<int>(tokens.size()) - 1;  // input positions
  const int dh = cfg.d_head();

  LossGraph<S> lg;
  ad::Graph<S>& g = lg.graph;
  using Var = typename ad::Graph<S>::Var;

  std::map<std::string, Var> leaf;
  for (const auto& [name, tensor] : params.named_tensors()) {
    Var v = g.input(name, *tensor, true);
    leaf[name] = v;
    lg.param_leaves.push_back(v);
  }

  std::vector<int> in_ids(tokens.begin(), tokens.end() - 1);
  std::vector<int> pos_ids(static_cast<size_t>(T));
  for (int t = 0; t < T; ++t) pos_ids[static_cast<size_t>(t)] = t;
  std::vector<int> targets(tokens.begin() + 1, tokens.end());

  Var x = g.add(g.rows_select(leaf["tok_emb"], in_ids), g.rows_select(leaf["pos_emb"], pos_ids));
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    Var q = g.matmul(x, leaf[p + "wq"]);
    Var k = g.matmul(x, leaf[p + "wk"]);
    Var v = g.matmul(x, leaf[p + "wv"]);
    std::vector<Var> heads;
    for (int h = 0; h < cfg.heads; ++h) {
      Var qh = g.slice_cols(q, h * dh, dh);
      Var kh = g.slice_cols(k, h * dh, dh);
      Var vh = g.slice_cols(v, h * dh, dh);
      Var scores = g.scale(g.matmul(qh, kh, false, true),
                           S(1) / static_cast<S>(std::sqrt(static_cast<double>(dh))));
      Var weights = g.row_softmax(scores, /*causal=*/true);
      heads.push_back(g.matmul(weights, vh));
    }
    Var proj = g.matmul(g.concat_cols(heads), leaf[p + "wo"]);
    Var x_half = g.row_scale(g.rmsnorm(g.add(x, proj), static_cast<S>(cfg.norm_eps)),
                             leaf[p + "g1"]);
    Var ffn = g.matmul(g.relu(g.matmul(x_half, leaf[p + "w1"])), leaf[p + "w2"]);
    x = g.row_scale(g.rmsnorm(g.add(x_half, ffn), static_cast<S>(cfg.norm_eps)),
                    leaf[p + "g2"]);
  }
  Var logits = g.matmul(x, leaf["unemb"], false, true);
  lg.loss = g.cross_entropy_mean(logits, targets);
  return lg;
}

template LossGraph<float> build_sequence_loss<float>(const ModelConfig&,
                                                     const ModelParamsT<float>&,
                                                     std::span<const int>);
template LossGraph<double> build_sequence_loss<double>(const ModelConfig&,
                                                       const ModelParamsT<double>&,
                                                       std::span<const int>);

TrainResult train_lm(const ModelConfig& cfg, const std::vector<std::vector<int>>& corpus,
                     const TrainLmConfig& tc, uint64_t seed,
                     const std::function<void(int, float)>& on_step) {
  require(!corpus.empty(), "train_lm: empty corpus");
  require(tc.batch_size >= 1, "train_lm: batch size must be >= 1");
  for (const auto& seq : corpus) check_tokens(cfg, seq);

  TrainResult result;
  result.params = ModelParams::init(cfg, seed);
  if (tc.epochs == 0) return result;

  auto named = result.params.named_tensors();
  std::vector<MatX<float>*> param_ptrs;
  std::vector<Matf> grads;
  for (auto& [name, tensor] : named) {
    param_ptrs.push_back(tensor);
    grads.emplace_back(Matf::Zero(tensor->rows(), tensor->cols()));
  }
  std::vector<const Matf*> grad_ptrs;
  for (auto& gmat : grads) grad_ptrs.push_back(&gmat);
  std::vector<const Matf*> param_cptrs(param_ptrs.begin(), param_ptrs.end());
  AdamState<float> adam(param_cptrs, tc.lr);

  const int n = static_cast<int>(corpus.size());
  const int batches_per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
  const int total_steps = tc.epochs * batches_per_epoch;
  double initial_loss = -1.0;

  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    Rng rng = Rng::derive(seed, {kEpochStream, static_cast<uint64_t>(epoch)});
    rng.shuffle(order);
    for (int b = 0; b < batches_per_epoch; ++b) {
      const int begin = b * tc.batch_size;
      const int count = std::min(tc.batch_size, n - begin);
      std::vector<std::unique_ptr<LossGraph<float>>> graphs(static_cast<size_t>(count));
      parallel_for(count, [&](int i) {
        const auto& seq = corpus[static_cast<size_t>(order[static_cast<size_t>(begin + i)])];
        auto lg = std::make_unique<LossGraph<float>>(
            build_sequence_loss<float>(cfg, result.params, seq));
        lg->graph.backward(lg->loss);
        graphs[static_cast<size_t>(i)] = std::move(lg);
      });

      double batch_loss = 0.0;
      for (auto& gmat : grads) gmat.setZero();
      for (int i = 0; i < count; ++i) {
        const LossGraph<float>& lg = *graphs[static_cast<size_t>(i)];
        batch_loss += static_cast<double>(lg.graph.scalar(lg.loss));
        for (size_t k = 0; k < grads.size(); ++k)
          grads[k] += lg.graph.gradient(lg.param_leaves[k]);
      }
      batch_loss /= count;
      const float inv_count = 1.0f / static_cast<float>(count);
      for (auto& gmat : grads) gmat *= inv_count;

      if (initial_loss < 0) initial_loss = batch_loss;
      require(std::isfinite(batch_loss) && batch_loss <= tc.divergence_factor * initial_loss,
              "train_lm diverged at step " + std::to_string(result.steps) + ": loss " +
                  std::to_string(batch_loss) + " vs initial " + std::to_string(initial_loss));

      adam.set_learning_rate(tc.lr * (1.0 - 0.9 * static_cast<double>(result.steps) /
                                                static_cast<double>(total_steps)));
      adam.step(param_ptrs, grad_ptrs);
      result.loss_curve.push_back(static_cast<float>(batch_loss));
      ++result.steps;
      if (on_step) on_step(result.steps, static_cast<float>(batch_loss));
    }
  }
  return result;
}

}  // namespace space
