#include "segfetch/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace segfetch {

using autograd::Graph;
using Node = Graph::Node;

ContextMode parse_context_mode(const std::string& name) {
  if (name == "none") return ContextMode::none;
  if (name == "pc") return ContextMode::pc;
  if (name == "pd") return ContextMode::pd;
  if (name == "both") return ContextMode::both;
  throw ConfigError("unknown context mode '" + name + "'");
}

std::string context_mode_name(ContextMode mode) {
  switch (mode) {
    case ContextMode::none: return "none";
    case ContextMode::pc: return "pc";
    case ContextMode::pd: return "pd";
    case ContextMode::both: return "both";
  }
  return "unknown";
}

void ModelConfig::validate() const {
  if (d_model < 1 || heads < 1 || outputs < 1 || history < 1 || ffn_mult < 1) {
    throw ConfigError("model dimensions must be >= 1");
  }
  if (d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
  if (features == 0 && vocab == 0) throw ConfigError("model needs real features or a token vocabulary");
}

// ---------------------------------------------------------------------------
// Parameters

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

std::uint64_t ModelParams::checksum() const {
  Fnv1a h;
  for_each([&](const std::string&, const Matrix& m) {
    h.update(std::as_bytes(std::span(m.data(), static_cast<std::size_t>(m.size()))));
  });
  return h.digest();
}

bool ModelParams::all_finite() const {
  bool ok = true;
  for_each([&](const std::string&, const Matrix& m) { ok = ok && m.allFinite(); });
  return ok;
}

ModelParams zero_params(const ModelConfig& cfg) {
  cfg.validate();
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto f = static_cast<Eigen::Index>(cfg.ffn_width());
  ModelParams p;
  p.input_embedding = Matrix::Zero(static_cast<Eigen::Index>(cfg.features), d);
  p.token_embedding = Matrix::Zero(cfg.vocab > 0 ? static_cast<Eigen::Index>(cfg.vocab + 1) : 0, d);
  p.cls = Matrix::Zero(1, d);
  p.position = Matrix::Zero(static_cast<Eigen::Index>(cfg.history + 1), d);
  p.context_embedding = Matrix::Zero(2, d);
  p.layers.resize(cfg.layers);
  for (LayerParams& l : p.layers) {
    l.wq = l.wk = l.wv = l.wo = Matrix::Zero(d, d);
    l.ln1_gain = l.ln1_bias = l.ln2_gain = l.ln2_bias = Matrix::Zero(1, d);
    l.w1 = Matrix::Zero(d, f);
    l.b1 = Matrix::Zero(1, f);
    l.w2 = Matrix::Zero(f, d);
    l.b2 = Matrix::Zero(1, d);
  }
  p.head_w = Matrix::Zero(d, static_cast<Eigen::Index>(cfg.outputs));
  p.head_b = Matrix::Zero(1, static_cast<Eigen::Index>(cfg.outputs));
  return p;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p = zero_params(cfg);
  Rng rng(seed);
  auto fill = [&](Matrix& m, double fan_in) {
    const double limit = std::sqrt(1.0 / fan_in);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-limit, limit);
  };
  const auto d = static_cast<double>(cfg.d_model);
  if (cfg.features > 0) fill(p.input_embedding, static_cast<double>(cfg.features));
  if (cfg.vocab > 0) fill(p.token_embedding, 1.0);
  fill(p.context_embedding, 2.0);
  for (LayerParams& l : p.layers) {
    fill(l.wq, d);
    fill(l.wk, d);
    fill(l.wv, d);
    fill(l.wo, d);
    l.ln1_gain.setOnes();
    l.ln2_gain.setOnes();
    fill(l.w1, d);
    fill(l.w2, static_cast<double>(cfg.ffn_width()));
  }
  fill(p.head_w, d);
  return p;
}

// ---------------------------------------------------------------------------
// Network

namespace ops {

Node attention(Graph& g, Node q, Node k, Node v) {
  const double dk = static_cast<double>(g.value(q).cols());
  Node scores = g.scale(g.matmul_transposed(q, k), 1.0 / std::sqrt(dk));
  return g.matmul(g.softmax_rows(scores), v);
}

Node multi_head_attention(Graph& g, Node x, const AttentionNodes& w, std::size_t heads) {
  Node q = g.matmul(x, w.wq);
  Node k = g.matmul(x, w.wk);
  Node v = g.matmul(x, w.wv);
  const Eigen::Index width = g.value(q).cols() / static_cast<Eigen::Index>(heads);
  std::vector<Node> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Eigen::Index c0 = static_cast<Eigen::Index>(h) * width;
    outs.push_back(attention(g, g.columns(q, c0, width), g.columns(k, c0, width), g.columns(v, c0, width)));
  }
  Node cat = heads == 1 ? outs[0] : g.concat_columns(outs);
  return g.matmul(cat, w.wo);
}

Node feed_forward(Graph& g, Node x, Node w1, Node b1, Node w2, Node b2) {
  Node hidden = g.relu(g.add_row(g.matmul(x, w1), b1));
  return g.add_row(g.matmul(hidden, w2), b2);
}

}  // namespace ops

Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v) {
  for (const Matrix* m : {&q, &k, &v}) {
    if (!m->allFinite()) throw NumericError("attention: non-finite input");
  }
  if (q.cols() != k.cols()) throw RangeError("attention: Q and K inner dimensions differ");
  if (k.rows() != v.rows()) throw RangeError("attention: K and V row counts differ");
  Graph g;
  return g.value(ops::attention(g, g.constant(q), g.constant(k), g.constant(v)));
}

Matrix attention_weights(const Matrix& q, const Matrix& k) {
  Graph g;
  const double dk = static_cast<double>(q.cols());
  Node s = g.scale(g.matmul_transposed(g.constant(q), g.constant(k)), 1.0 / std::sqrt(dk));
  return g.value(g.softmax_rows(s));
}

Matrix multi_head_attention(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv,
                            const Matrix& wo, std::size_t heads) {
  if (heads == 0 || wq.cols() % static_cast<Eigen::Index>(heads) != 0) {
    throw RangeError("multi_head_attention: width not divisible by heads");
  }
  Graph g;
  ops::AttentionNodes w{g.constant(wq), g.constant(wk), g.constant(wv), g.constant(wo)};
  return g.value(ops::multi_head_attention(g, g.constant(x), w, heads));
}

Matrix feed_forward(const Matrix& x, const Matrix& w1, const Matrix& b1, const Matrix& w2,
                    const Matrix& b2) {
  Graph g;
  return g.value(ops::feed_forward(g, g.constant(x), g.constant(w1), g.constant(b1),
                                   g.constant(w2), g.constant(b2)));
}

namespace {

void check_finite(const Graph& g, Node n, const std::string& stage) {
  if (!g.value(n).allFinite()) throw NumericError("non-finite activation after " + stage);
}

void check_input(const ModelInput& in, const ModelConfig& cfg) {
  const auto n = static_cast<Eigen::Index>(cfg.history);
  if (in.context.rows() != n || in.context.cols() != 2) {
    throw RangeError("model input: context must be N x 2");
  }
  if (cfg.features > 0 &&
      (in.features.rows() != n || in.features.cols() != static_cast<Eigen::Index>(cfg.features))) {
    throw RangeError("model input: features must be " + std::to_string(cfg.history) + " x " +
                     std::to_string(cfg.features));
  }
  if (cfg.vocab > 0 && in.tokens.size() != cfg.history) {
    throw RangeError("model input: expected one token per history position");
  }
  if (!in.features.allFinite() || !in.context.allFinite()) {
    throw NumericError("model input contains non-finite values");
  }
}

}  // namespace

Node build_forward(Graph& g, const ModelInput& input, const ModelParams& params,
                   const ModelConfig& cfg, ModelParams* grads) {
  check_input(input, cfg);
  auto param = [&](const Matrix& value, Matrix ModelParams::*member) {
    return g.parameter(value, grads != nullptr ? &(grads->*member) : nullptr);
  };
  const auto n = static_cast<Eigen::Index>(cfg.history);

  // Token rows 1..N: embedded history.
  Node rows = 0;
  bool have_rows = false;
  if (cfg.features > 0) {
    rows = g.matmul(g.constant(input.features), param(params.input_embedding, &ModelParams::input_embedding));
    have_rows = true;
  }
  if (cfg.vocab > 0) {
    std::vector<Eigen::Index> idx(input.tokens.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const std::int32_t t = input.tokens[i];
      idx[i] = (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab) ? static_cast<Eigen::Index>(cfg.vocab) : t;
    }
    Node tok = g.gather_rows(param(params.token_embedding, &ModelParams::token_embedding), std::move(idx));
    rows = have_rows ? g.add(rows, tok) : tok;
  }

  const Node parts[] = {param(params.cls, &ModelParams::cls), rows};
  Node z = g.add(g.concat_rows(parts), param(params.position, &ModelParams::position));

  if (cfg.context != ContextMode::none) {
    Matrix ctx = Matrix::Zero(n + 1, 2);
    ctx.bottomRows(n) = input.context;
    if (cfg.context == ContextMode::pc) ctx.col(1).setZero();
    if (cfg.context == ContextMode::pd) ctx.col(0).setZero();
    z = g.add(z, g.matmul(g.constant(std::move(ctx)),
                          param(params.context_embedding, &ModelParams::context_embedding)));
  }
  check_finite(g, z, "embedding");

  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const LayerParams& lp = params.layers[l];
    LayerParams* lg = grads != nullptr ? &grads->layers[l] : nullptr;
    auto lparam = [&](const Matrix& value, Matrix LayerParams::*member) {
      return g.parameter(value, lg != nullptr ? &(lg->*member) : nullptr);
    };
    ops::AttentionNodes w{lparam(lp.wq, &LayerParams::wq), lparam(lp.wk, &LayerParams::wk),
                          lparam(lp.wv, &LayerParams::wv), lparam(lp.wo, &LayerParams::wo)};
    Node attn = ops::multi_head_attention(g, z, w, cfg.heads);
    z = g.layer_norm(g.add(z, attn), lparam(lp.ln1_gain, &LayerParams::ln1_gain),
                     lparam(lp.ln1_bias, &LayerParams::ln1_bias));
    Node ffn = ops::feed_forward(g, z, lparam(lp.w1, &LayerParams::w1), lparam(lp.b1, &LayerParams::b1),
                                 lparam(lp.w2, &LayerParams::w2), lparam(lp.b2, &LayerParams::b2));
    z = g.layer_norm(g.add(z, ffn), lparam(lp.ln2_gain, &LayerParams::ln2_gain),
                     lparam(lp.ln2_bias, &LayerParams::ln2_bias));
    check_finite(g, z, "layer " + std::to_string(l));
  }

  Node logits = g.add_row(g.matmul(g.row(z, 0), param(params.head_w, &ModelParams::head_w)),
                          param(params.head_b, &ModelParams::head_b));
  check_finite(g, logits, "output head");
  return g.sigmoid(logits);
}

ConfidenceVector forward(const ModelInput& input, const ModelParams& params, const ModelConfig& cfg) {
  Graph g;
  const Matrix& out = g.value(build_forward(g, input, params, cfg));
  return ConfidenceVector(out.data(), out.data() + out.size());
}

// ---------------------------------------------------------------------------
// Loss

LossResult bce_loss(std::span<const double> pred, const DeltaBitmap& label) {
  if (pred.size() != label.size()) throw RangeError("bce_loss: prediction and label sizes differ");
  LossResult r;
  r.gradient.resize(pred.size());
  const double n = static_cast<double>(pred.size());
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i];
    const double pc = std::clamp(p, kBceEpsilon, 1.0 - kBceEpsilon);
    const bool clamped = pc != p;
    if (label.test(i)) {
      total -= std::log(pc);
      r.gradient[i] = clamped ? 0.0 : -1.0 / (pc * n);
    } else {
      total -= std::log(1.0 - pc);
      r.gradient[i] = clamped ? 0.0 : 1.0 / ((1.0 - pc) * n);
    }
  }
  r.loss = total / n;
  return r;
}

double loss_and_gradient(const ModelInput& input, const DeltaBitmap& label,
                         const ModelParams& params, const ModelConfig& cfg, ModelParams& grads) {
  Graph g;
  Node out = build_forward(g, input, params, cfg, &grads);
  const Matrix& pred = g.value(out);
  LossResult lr = bce_loss(std::span(pred.data(), static_cast<std::size_t>(pred.size())), label);
  Matrix seed = Eigen::Map<const Matrix>(lr.gradient.data(), 1, static_cast<Eigen::Index>(lr.gradient.size()));
  g.backward(out, seed);
  return lr.loss;
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
  if (!(decay_factor > 0)) throw ConfigError("decay factor must be positive");
  if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1)) throw ConfigError("ADAM betas must be in (0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("ADAM epsilon must be positive");
  if (batch_size < 1 || epochs < 1) throw ConfigError("batch size and epochs must be >= 1");
  if (decay_every < 1) throw ConfigError("decay interval must be >= 1 epoch");
  if (clip_norm < 0) throw ConfigError("clip norm must be >= 0");
}

double TrainConfig::rate_at(std::size_t epoch) const {
  return learning_rate * std::pow(decay_factor, static_cast<double>(epoch / decay_every));
}

double mean_loss(std::span<const Sample> samples, const ModelParams& params, const ModelConfig& cfg) {
  double total = 0.0;
  std::size_t count = 0;
  for (const Sample& s : samples) {
    if (s.label.popcount() == 0) continue;
    ConfidenceVector p = forward(s.input, params, cfg);
    total += bce_loss(p, s.label).loss;
    ++count;
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

namespace {

class Adam {
 public:
  Adam(const ModelConfig& cfg, const TrainConfig& tc) : m_(zero_params(cfg)), v_(zero_params(cfg)), tc_(tc) {}

  void step(ModelParams& params, ModelParams& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(tc_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(tc_.beta2, static_cast<double>(t_));
    std::vector<Matrix*> ps, gs, ms, vs;
    params.for_each([&](const std::string&, Matrix& x) { ps.push_back(&x); });
    grads.for_each([&](const std::string&, Matrix& x) { gs.push_back(&x); });
    m_.for_each([&](const std::string&, Matrix& x) { ms.push_back(&x); });
    v_.for_each([&](const std::string&, Matrix& x) { vs.push_back(&x); });
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (ps[i]->size() == 0) continue;
      Matrix& m = *ms[i];
      Matrix& v = *vs[i];
      const Matrix& g = *gs[i];
      m = tc_.beta1 * m + (1.0 - tc_.beta1) * g;
      v = tc_.beta2 * v + (1.0 - tc_.beta2) * g.cwiseProduct(g);
      *ps[i] -= (lr * (m / c1).array() / ((v / c2).array().sqrt() + tc_.adam_eps)).matrix();
    }
  }

 private:
  ModelParams m_, v_;
  TrainConfig tc_;
  std::size_t t_ = 0;
};

void scale_grads(ModelParams& grads, double factor) {
  grads.for_each([&](const std::string&, Matrix& m) { m *= factor; });
}

double grad_norm(const ModelParams& grads) {
  double sq = 0.0;
  grads.for_each([&](const std::string&, const Matrix& m) { sq += m.squaredNorm(); });
  return std::sqrt(sq);
}

}  // namespace

TrainResult train(std::span<const Sample> train_set, std::span<const Sample> validation_set,
                  const ModelConfig& model_cfg, const TrainConfig& cfg) {
  return train(train_set, validation_set, model_cfg, cfg, init_params(model_cfg, cfg.seed));
}

TrainResult train(std::span<const Sample> train_set, std::span<const Sample> validation_set,
                  const ModelConfig& model_cfg, const TrainConfig& cfg, ModelParams initial) {
  model_cfg.validate();
  cfg.validate();
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    if (train_set[i].label.popcount() > 0) usable.push_back(i);
  }
  if (usable.empty()) throw TrainingError("training set has no sample with a non-empty label");

  TrainResult result;
  result.params = std::move(initial);
  result.initial_train_loss = mean_loss(train_set, result.params, model_cfg);

  Adam adam(model_cfg, cfg);
  ModelParams grads = zero_params(model_cfg);
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  ModelParams best = result.params;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  const bool have_val = std::any_of(validation_set.begin(), validation_set.end(),
                                    [](const Sample& s) { return s.label.popcount() > 0; });

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.rate_at(epoch);
    for (std::size_t i = usable.size(); i > 1; --i) {
      std::swap(usable[i - 1], usable[rng.below(i)]);
    }
    double epoch_loss = 0.0;
    for (std::size_t start = 0, batch = 0; start < usable.size(); start += cfg.batch_size, ++batch) {
      const std::size_t stop = std::min(usable.size(), start + cfg.batch_size);
      grads.for_each([](const std::string&, Matrix& m) { m.setZero(); });
      double batch_loss = 0.0;
      for (std::size_t j = start; j < stop; ++j) {
        const Sample& s = train_set[usable[j]];
        batch_loss += loss_and_gradient(s.input, s.label, result.params, model_cfg, grads);
      }
      if (!std::isfinite(batch_loss)) {
        throw TrainingError("loss diverged at epoch " + std::to_string(epoch + 1) + ", batch " +
                            std::to_string(batch + 1));
      }
      epoch_loss += batch_loss;
      scale_grads(grads, 1.0 / static_cast<double>(stop - start));
      if (cfg.clip_norm > 0) {
        const double norm = grad_norm(grads);
        if (norm > cfg.clip_norm) scale_grads(grads, cfg.clip_norm / norm);
      }
      adam.step(result.params, grads, lr);
      if (!result.params.all_finite()) {
        throw TrainingError("parameters became non-finite at epoch " + std::to_string(epoch + 1) +
                            ", batch " + std::to_string(batch + 1));
      }
    }

    EpochLog entry;
    entry.epoch = epoch + 1;
    entry.train_loss = epoch_loss / static_cast<double>(usable.size());
    entry.val_loss = have_val ? mean_loss(validation_set, result.params, model_cfg) : entry.train_loss;
    entry.learning_rate = lr;
    result.log.push_back(entry);

    if (entry.val_loss < best_val) {
      best_val = entry.val_loss;
      best = result.params;
      result.best_epoch = entry.epoch;
      since_best = 0;
    } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
      break;
    }
  }
  result.params = std::move(best);
  return result;
}

std::string training_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,train_loss,val_loss,lr\n";
  for (const EpochLog& e : log) {
    out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.learning_rate << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Gradient check

GradientCheckReport gradient_check(const ModelParams& params, const Sample& sample,
                                   const ModelConfig& cfg, double step, GradientFn analytic) {
  ModelParams grads;
  if (analytic) {
    grads = analytic(params, sample);
  } else {
    grads = zero_params(cfg);
    loss_and_gradient(sample.input, sample.label, params, cfg, grads);
  }

  auto loss_at = [&](const ModelParams& p) {
    return bce_loss(forward(sample.input, p, cfg), sample.label).loss;
  };

  ModelParams probe = params;
  std::vector<Matrix*> probe_tensors;
  probe.for_each([&](const std::string&, Matrix& m) { probe_tensors.push_back(&m); });
  std::vector<std::pair<std::string, const Matrix*>> grad_tensors;
  grads.for_each([&](const std::string& name, const Matrix& m) { grad_tensors.emplace_back(name, &m); });

  GradientCheckReport report;
  for (std::size_t t = 0; t < probe_tensors.size(); ++t) {
    Matrix& m = *probe_tensors[t];
    if (m.size() == 0) continue;
    const Matrix& a = *grad_tensors[t].second;
    double worst = 0.0;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double original = m.data()[i];
      m.data()[i] = original + step;
      const double up = loss_at(probe);
      m.data()[i] = original - step;
      const double down = loss_at(probe);
      m.data()[i] = original;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic_value = a.size() == m.size() ? a.data()[i] : 0.0;
      const double denom = std::max({std::abs(numeric), std::abs(analytic_value), 1e-8});
      worst = std::max(worst, std::abs(numeric - analytic_value) / denom);
      ++report.checked;
    }
    report.per_tensor.emplace_back(grad_tensors[t].first, worst);
    report.max_relative_error = std::max(report.max_relative_error, worst);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Latency

LatencyCosts LatencyCosts::log_tree(std::size_t d_model) {
  const double mm = 1.0 + std::log2(static_cast<double>(d_model));
  LatencyCosts c;
  c.mm_embed = c.mm_head = c.mm_attention = c.mm_ffn = mm;
  c.add = 1.0;
  c.activation = 1.0;
  c.norm = 5.0;
  return c;
}

double estimate_latency(const LatencyCosts& c, const ModelConfig& cfg) {
  for (double v : {c.mm_embed, c.add, c.mm_head, c.activation, c.mm_attention, c.mm_ffn, c.norm}) {
    if (v < 0) throw ConfigError("latency costs must be >= 0");
  }
  const double embeddings = c.mm_embed + c.add;
  const double head = c.mm_head + c.activation;
  const double layer = 4 * c.mm_attention + 3 * c.activation + c.mm_ffn + 2 * (c.add + c.norm);
  return embeddings + head + static_cast<double>(cfg.layers) * layer;
}

}  // namespace segfetch
