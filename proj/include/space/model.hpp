#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "space/autodiff.hpp"
#include "space/common.hpp"
#include "space/editing.hpp"
#include "space/rng.hpp"

namespace space {

struct ModelConfig {
  int layers = 4;
  int heads = 4;
  int d_model = 64;
  int vocab = 0;
  int context = 32;
  float norm_eps = 1e-5f;

  int d_head() const { return d_model / heads; }
  int ffn_dim() const { return 4 * d_model; }

  void validate() const {
    require(layers >= 1 && heads >= 1 && d_model >= heads, "model config out of range");
    require(d_model % heads == 0, "d_model must be divisible by head count");
    require(vocab >= 2 && context >= 2, "model config needs vocab and context");
  }
};

// Decoder-only transformer parameters. Residual update per layer:
//   x_half = norm1(x + mha(x)) * g1
//   x_next = norm2(x_half + ffn(x_half) [+ steering term]) * g2
// where norm is RMS normalization and g1/g2 are learned gains.
template <class S>
struct ModelParamsT {
  struct Layer {
    MatX<S> wq, wk, wv, wo;  // d_model x d_model
    MatX<S> w1;              // d_model x ffn
    MatX<S> w2;              // ffn x d_model
    MatX<S> g1, g2;          // 1 x d_model gains
  };

  MatX<S> tok_emb;  // vocab x d_model
  MatX<S> pos_emb;  // context x d_model
  std::vector<Layer> layers;
  MatX<S> unemb;  // vocab x d_model

  static ModelParamsT init(const ModelConfig& cfg, uint64_t seed);

  template <class T>
  ModelParamsT<T> cast() const {
    ModelParamsT<T> out;
    out.tok_emb = tok_emb.template cast<T>();
    out.pos_emb = pos_emb.template cast<T>();
    out.unemb = unemb.template cast<T>();
    for (const Layer& l : layers) {
      typename ModelParamsT<T>::Layer o;
      o.wq = l.wq.template cast<T>();
      o.wk = l.wk.template cast<T>();
      o.wv = l.wv.template cast<T>();
      o.wo = l.wo.template cast<T>();
      o.w1 = l.w1.template cast<T>();
      o.w2 = l.w2.template cast<T>();
      o.g1 = l.g1.template cast<T>();
      o.g2 = l.g2.template cast<T>();
      out.layers.push_back(std::move(o));
    }
    return out;
  }

  // Stable (name, tensor) listing used by serialization and the optimizer.
  std::vector<std::pair<std::string, MatX<S>*>> named_tensors();
  std::vector<std::pair<std::string, const MatX<S>*>> named_tensors() const;
};

using ModelParams = ModelParamsT<float>;

void save_model(const std::filesystem::path& dir, const ModelConfig& cfg, const ModelParams& p);
ModelParams load_model(const std::filesystem::path& dir, ModelConfig& cfg);

// Mid-residual activation for one (layer, position).
struct CaptureRecord {
  int layer = 0;
  int pos = 0;
  Vecf x_half;  // d_model; head h owns the contiguous slice [h*d_head, (h+1)*d_head)
};

struct ForwardResult {
  Matf logits;  // seq_len x vocab
  std::vector<CaptureRecord> captures;
};

// Full-sequence forward pass. Captures never affect logits. When `plan` is
// non-null its steering term is added at every position of every planned
// layer; `alpha` overrides the plan's stored strength when non-negative.
ForwardResult forward_capture(const ModelConfig& cfg, const ModelParams& params,
                              std::span<const int> tokens, bool capture,
                              const EditPlan* plan = nullptr, float alpha = -1.0f);

// Greedy decoding until <eos> (token id `eos`) or max_new tokens.
std::vector<int> generate(const ModelConfig& cfg, const ModelParams& params,
                          std::span<const int> prompt, int max_new, int eos,
                          const EditPlan* plan = nullptr, float alpha = -1.0f);

struct TrainLmConfig {
  int epochs = 40;
  int batch_size = 16;
  double lr = 2e-3;
  double divergence_factor = 10.0;
  int log_every = 50;
};

struct TrainResult {
  ModelParams params;
  std::vector<float> loss_curve;  // mean cross-entropy per optimizer step
  int steps = 0;
};

TrainResult train_lm(const ModelConfig& cfg, const std::vector<std::vector<int>>& corpus,
                     const TrainLmConfig& tc, uint64_t seed,
                     const std::function<void(int, float)>& on_step = {});

// Training-loss graph for one sequence; exposed so gradient checks can run the
// same computation in double precision. param_leaves follows named_tensors()
// order.
template <class S>
struct LossGraph {
  ad::Graph<S> graph;
  typename ad::Graph<S>::Var loss;
  std::vector<typename ad::Graph<S>::Var> param_leaves;
};

template <class S>
LossGraph<S> build_sequence_loss(const ModelConfig& cfg, const ModelParamsT<S>& params,
                                 std::span<const int> tokens);

}  // namespace space
