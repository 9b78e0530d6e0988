#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "segfetch/autograd.hpp"
#include "segfetch/features.hpp"
#include "segfetch/labeling.hpp"
#include "segfetch/matrix.hpp"

namespace segfetch {

/// Which context features are added to the history tokens.
enum class ContextMode { none, pc, pd, both };

ContextMode parse_context_mode(const std::string& name);
std::string context_mode_name(ContextMode mode);

struct ModelConfig {
  std::size_t d_model = 128;   // D
  std::size_t heads = 4;       // H
  std::size_t layers = 2;      // L
  std::size_t outputs = 256;   // B
  std::size_t history = 9;     // N
  std::size_t features = 10;   // F: real-valued width per history row (S for segmented input)
  std::size_t vocab = 0;       // token embedding rows excluding the OOV row; 0 = no tokens
  std::size_t ffn_mult = 2;
  ContextMode context = ContextMode::both;

  void validate() const;
  std::size_t head_dim() const { return d_model / heads; }
  std::size_t ffn_width() const { return ffn_mult * d_model; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerParams {
  Matrix wq, wk, wv, wo;          // D x D; head h uses columns [h*D/H, (h+1)*D/H)
  Matrix ln1_gain, ln1_bias;      // 1 x D
  Matrix w1, b1;                  // D x ffn, 1 x ffn
  Matrix w2, b2;                  // ffn x D, 1 x D
  Matrix ln2_gain, ln2_bias;      // 1 x D
};

/// Every learnable tensor, in checkpoint order.
struct ModelParams {
  Matrix input_embedding;    // F x D, shared across history positions
  Matrix token_embedding;    // (vocab + 1) x D, last row is the OOV token
  Matrix cls;                // 1 x D
  Matrix position;           // (N + 1) x D
  Matrix context_embedding;  // 2 x D
  std::vector<LayerParams> layers;
  Matrix head_w;             // D x B
  Matrix head_b;             // 1 x B

  /// Calls f(name, tensor) for each tensor in declared order.
  template <class F>
  void for_each(F&& f) { visit(*this, f); }
  template <class F>
  void for_each(F&& f) const { visit(*this, f); }

  std::size_t parameter_count() const;
  /// FNV-1a over the raw tensor bytes.
  std::uint64_t checksum() const;
  bool all_finite() const;

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    f("input_embedding", self.input_embedding);
    f("token_embedding", self.token_embedding);
    f("cls", self.cls);
    f("position", self.position);
    f("context_embedding", self.context_embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      auto& x = self.layers[l];
      f(p + "wq", x.wq);
      f(p + "wk", x.wk);
      f(p + "wv", x.wv);
      f(p + "wo", x.wo);
      f(p + "ln1_gain", x.ln1_gain);
      f(p + "ln1_bias", x.ln1_bias);
      f(p + "w1", x.w1);
      f(p + "b1", x.b1);
      f(p + "w2", x.w2);
      f(p + "b2", x.b2);
      f(p + "ln2_gain", x.ln2_gain);
      f(p + "ln2_bias", x.ln2_bias);
    }
    f("head_w", self.head_w);
    f("head_b", self.head_b);
  }
};

/// All-zero tensors with the shapes implied by `cfg`.
ModelParams zero_params(const ModelConfig& cfg);

/// Linear maps uniform in +-sqrt(1/fan_in); biases, cls and position
/// embeddings zero; layer-norm gains one.
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Per-bit sigmoid outputs in [0, 1].
using ConfidenceVector = std::vector<double>;

namespace ops {

using autograd::Graph;
using Node = Graph::Node;

/// softmax(Q K^T / sqrt(d_k)) V.
Node attention(Graph& g, Node q, Node k, Node v);

struct AttentionNodes {
  Node wq, wk, wv, wo;
};
/// Concat(head_1..head_H) W^O with head_i = attention on column block i of
/// xW^Q, xW^K, xW^V.
Node multi_head_attention(Graph& g, Node x, const AttentionNodes& w, std::size_t heads);

/// max(0, x W1 + b1) W2 + b2, row-wise.
Node feed_forward(Graph& g, Node x, Node w1, Node b1, Node w2, Node b2);

}  // namespace ops

/// Plain-matrix wrappers over the graph ops.
Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v);
/// Row-wise attention weights softmax(Q K^T / sqrt(d_k)).
Matrix attention_weights(const Matrix& q, const Matrix& k);
Matrix multi_head_attention(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv,
                            const Matrix& wo, std::size_t heads);
Matrix feed_forward(const Matrix& x, const Matrix& w1, const Matrix& b1, const Matrix& w2,
                    const Matrix& b2);

/// Builds the network on `g`. Returns the 1 x B sigmoid output node.
/// `grads`, when non-null, receives parameter gradients on backward.
autograd::Graph::Node build_forward(autograd::Graph& g, const ModelInput& input,
                                    const ModelParams& params, const ModelConfig& cfg,
                                    ModelParams* grads = nullptr);

/// B confidences for one input. Throws NumericError naming the stage that
/// produced a non-finite value.
ConfidenceVector forward(const ModelInput& input, const ModelParams& params, const ModelConfig& cfg);

/// Mean binary cross-entropy over the B outputs, probabilities clamped to
/// [eps, 1 - eps]. `gradient` is d(loss)/d(pred) of the clamped expression.
struct LossResult {
  double loss = 0.0;
  std::vector<double> gradient;
};
constexpr double kBceEpsilon = 1e-7;
LossResult bce_loss(std::span<const double> pred, const DeltaBitmap& label);

/// Loss for one sample; accumulates parameter gradients into `grads`
/// (which must have zero_params shapes).
double loss_and_gradient(const ModelInput& input, const DeltaBitmap& label,
                         const ModelParams& params, const ModelConfig& cfg, ModelParams& grads);

/// A labeled training/evaluation example.
struct Sample {
  ModelInput input;
  DeltaBitmap label;
  std::uint64_t ordinal = 0;  // trigger position in the trigger stream
  std::uint64_t block = 0;    // trigger block address
  bool truncated = false;     // label window ran past the end of the trace
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double decay_factor = 0.5;
  std::size_t decay_every = 10;  // epochs
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 256;
  std::size_t epochs = 50;
  std::size_t patience = 5;      // early stop on validation loss; 0 disables
  double clip_norm = 0.0;        // global gradient-norm clip; 0 disables
  std::uint64_t seed = 1;

  void validate() const;
  double rate_at(std::size_t epoch) const;  // epoch is 0-based
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double learning_rate = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double initial_train_loss = 0.0;  // mean loss of the initial parameters
};

struct TrainingError : Error {
  explicit TrainingError(const std::string& m) : Error("training", m) {}
};

/// Mini-batch ADAM with step-decayed learning rate. Samples with empty labels
/// are skipped. Deterministic given cfg.seed. With a non-empty validation
/// set, the parameters of the best validation epoch are returned.
TrainResult train(std::span<const Sample> train_set, std::span<const Sample> validation_set,
                  const ModelConfig& model_cfg, const TrainConfig& cfg);
TrainResult train(std::span<const Sample> train_set, std::span<const Sample> validation_set,
                  const ModelConfig& model_cfg, const TrainConfig& cfg, ModelParams initial);

/// Mean loss over the samples with a non-empty label.
double mean_loss(std::span<const Sample> samples, const ModelParams& params, const ModelConfig& cfg);

std::string training_log_csv(const std::vector<EpochLog>& log);

/// Analytic vs central finite-difference gradients.
struct GradientCheckReport {
  double max_relative_error = 0.0;
  std::vector<std::pair<std::string, double>> per_tensor;  // max error per tensor
  std::size_t checked = 0;
};

using GradientFn = std::function<ModelParams(const ModelParams&, const Sample&)>;

/// Relative error per entry is |a - n| / max(|a|, |n|, 1e-8).
GradientCheckReport gradient_check(const ModelParams& params, const Sample& sample,
                                   const ModelConfig& cfg, double step = 1e-5,
                                   GradientFn analytic = {});

/// Per-primitive cycle costs of a fully parallel implementation.
struct LatencyCosts {
  double mm_embed = 0;      // input embedding matmul
  double add = 0;           // vector addition
  double mm_head = 0;       // output head matmul
  double activation = 0;    // activation / mask / scale
  double mm_attention = 0;  // one attention matmul
  double mm_ffn = 0;        // feed-forward matmul
  double norm = 0;          // layer normalization

  /// Matrix multiplies cost 1 + log2(D) (adder tree), adds and activations
  /// one cycle, normalization five cycles.
  static LatencyCosts log_tree(std::size_t d_model);
};

double estimate_latency(const LatencyCosts& costs, const ModelConfig& cfg);

}  // namespace segfetch
