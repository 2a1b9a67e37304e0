#pragma once

// Offline relevance stage: propagate output relevance backward through the
// transformer, aggregate per-neuron scores over a corpus, and select the
// fixed top-K neuron set used during preference optimization.
//
// Propagation rules (deliberately simpler than full attention-aware LRP):
//   - epsilon rule for every linear map, with a sign-matched stabilizer;
//   - gated elementwise products split relevance proportionally to each
//     factor's contribution with the other held constant, which for a plain
//     two-factor product degenerates to an even split (and is pinned to an
//     even split when both contributions vanish);
//   - normalizations and the silu nonlinearity pass relevance through
//     unchanged (identity rule);
//   - attention probabilities are treated as constants, so relevance flows
//     through the value path only.
// Relevance for one response token is seeded from the realized next-token
// logit at the position that predicts it; a neuron's relevance for that
// token is the channel's total over all sequence positions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "yfpo/model.hpp"

namespace yfpo {

namespace lrp {

inline constexpr double kEpsilon = 1e-9;

inline double stabilize(double z) { return z >= 0.0 ? z + kEpsilon : z - kEpsilon; }

// Row-major value grid; the relevance engine works on plain doubles, not
// tape tensors, since it only ever needs forward values.
struct Grid {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;

  Grid() = default;
  Grid(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}

  double& at(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return v[i * cols + j]; }

  double total() const {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
};

inline Grid to_grid(const Tensor& t) {
  Grid g(t.rows(), t.cols());
  std::copy(t.data().begin(), t.data().end(), g.v.begin());
  return g;
}

inline Grid matmul(const Grid& a, const Grid& b) {
  Grid c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double av = a.at(i, k);
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < b.cols; ++j) c.at(i, j) += av * b.at(k, j);
    }
  }
  return c;
}

/// Epsilon-rule backward step through z = x * w.
/// R_x[t][i] = x[t][i] * sum_k w[i][k] * R[t][k] / stabilize(z[t][k]).
inline Grid linear_epsilon_backward(const Grid& x, const Grid& w, const Grid& z,
                                    const Grid& relevance) {
  Grid scaled(z.rows, z.cols);
  for (std::size_t t = 0; t < z.rows; ++t) {
    for (std::size_t k = 0; k < z.cols; ++k) {
      scaled.at(t, k) = relevance.at(t, k) / stabilize(z.at(t, k));
    }
  }
  Grid out(x.rows, x.cols);
  for (std::size_t t = 0; t < x.rows; ++t) {
    for (std::size_t i = 0; i < x.cols; ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < z.cols; ++k) acc += w.at(i, k) * scaled.at(t, k);
      out.at(t, i) = x.at(t, i) * acc;
    }
  }
  return out;
}

/// Relevance split for a two-factor product z = a*b. Each factor's
/// contribution with the other held constant equals z itself, so the split
/// is even whenever z != 0 and pinned to one half when both vanish.
inline std::pair<double, double> product_split(double a, double b, double relevance) {
  const double contrib_a = a * b;
  const double contrib_b = a * b;
  if (contrib_a == 0.0 && contrib_b == 0.0) return {0.5 * relevance, 0.5 * relevance};
  const double denom = stabilize(contrib_a + contrib_b);
  return {relevance * contrib_a / denom, relevance * contrib_b / denom};
}

/// One record per linear propagation step: relevance entering (toward the
/// inputs) vs leaving (at the outputs). The epsilon stabilizer makes these
/// differ by a small leakage which the tests bound.
struct ConservationRecord {
  std::string layer;
  double sum_out = 0.0;  // relevance at the layer output
  double sum_in = 0.0;   // relevance redistributed onto the layer input
};

using ConservationLog = std::vector<ConservationRecord>;

}  // namespace lrp

// ---------------------------------------------------------------------------
// Per-sample relevance
// ---------------------------------------------------------------------------

/// R_{l,j,t}: relevance of neuron (l,j) for response token t of one sample.
struct SampleRelevance {
  std::size_t n_layers = 0;
  std::size_t d_ff = 0;
  std::size_t response_tokens = 0;
  std::vector<double> values;  // [(l*d_ff + j) * response_tokens + t]

  double at(std::size_t layer, std::size_t channel, std::size_t t) const {
    return values[(layer * d_ff + channel) * response_tokens + t];
  }
  double& at(std::size_t layer, std::size_t channel, std::size_t t) {
    return values[(layer * d_ff + channel) * response_tokens + t];
  }
};

namespace detail {

// Forward activations needed by the relevance pass, all raw grids.
struct LayerTrace {
  lrp::Grid x_in, normed1, q, k, v;
  std::vector<lrp::Grid> probs;  // per head, T x T
  lrp::Grid attn_concat, attn_out, x_mid;
  lrp::Grid normed2, gate_pre, gate_act, up, hidden, mlp_out, x_out;
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
  lrp::Grid final_normed, logits;
};

inline lrp::Grid rmsnorm_grid(const lrp::Grid& x, const Tensor& w) {
  lrp::Grid y(x.rows, x.cols);
  for (std::size_t t = 0; t < x.rows; ++t) {
    double ms = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) ms += x.at(t, j) * x.at(t, j);
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(x.cols) + kRmsNormEps);
    for (std::size_t j = 0; j < x.cols; ++j) y.at(t, j) = x.at(t, j) * inv * w[j];
  }
  return y;
}

inline ForwardTrace trace_forward(const Model& model, const TokenSeq& tokens) {
  const ModelConfig& cfg = model.config();
  const std::size_t t_len = tokens.size();
  if (t_len == 0) throw ContractError("relevance: empty token sequence");
  if (t_len > cfg.max_seq_len) throw LengthError("relevance: sequence exceeds max_seq_len");
  const std::size_t d = cfg.d_model;
  const std::size_t dh = model.head_dim();

  lrp::Grid x(t_len, d);
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      x.at(t, j) = model.token_embedding().at(tokens[t], j) + model.position_embedding().at(t, j);
    }
  }

  ForwardTrace trace;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& p = model.layer(l);
    LayerTrace lt;
    lt.x_in = x;
    lt.normed1 = rmsnorm_grid(x, p.attn_norm_w);
    lt.q = lrp::matmul(lt.normed1, lrp::to_grid(p.wq));
    lt.k = lrp::matmul(lt.normed1, lrp::to_grid(p.wk));
    lt.v = lrp::matmul(lt.normed1, lrp::to_grid(p.wv));

    lt.attn_concat = lrp::Grid(t_len, d);
    lt.probs.assign(cfg.n_heads, lrp::Grid(t_len, t_len));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      lrp::Grid& probs = lt.probs[hd];
      for (std::size_t t = 0; t < t_len; ++t) {
        double mx = -1e30;
        std::vector<double> scores(t + 1);
        for (std::size_t u = 0; u <= t; ++u) {
          double dot = 0.0;
          for (std::size_t j = 0; j < dh; ++j) {
            dot += lt.q.at(t, hd * dh + j) * lt.k.at(u, hd * dh + j);
          }
          scores[u] = dot * inv_sqrt;
          mx = std::max(mx, scores[u]);
        }
        double z = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          scores[u] = std::exp(scores[u] - mx);
          z += scores[u];
        }
        for (std::size_t u = 0; u <= t; ++u) {
          const double prob = scores[u] / z;
          probs.at(t, u) = prob;
          for (std::size_t j = 0; j < dh; ++j) {
            lt.attn_concat.at(t, hd * dh + j) += prob * lt.v.at(u, hd * dh + j);
          }
        }
      }
    }
    lt.attn_out = lrp::matmul(lt.attn_concat, lrp::to_grid(p.wo));
    lt.x_mid = lrp::Grid(t_len, d);
    for (std::size_t i = 0; i < t_len * d; ++i) lt.x_mid.v[i] = lt.x_in.v[i] + lt.attn_out.v[i];

    lt.normed2 = rmsnorm_grid(lt.x_mid, p.mlp_norm_w);
    lt.gate_pre = lrp::matmul(lt.normed2, lrp::to_grid(p.w_gate));
    lt.up = lrp::matmul(lt.normed2, lrp::to_grid(p.w_up));
    lt.gate_act = lrp::Grid(t_len, cfg.d_ff);
    lt.hidden = lrp::Grid(t_len, cfg.d_ff);
    for (std::size_t i = 0; i < t_len * cfg.d_ff; ++i) {
      const double g = lt.gate_pre.v[i];
      lt.gate_act.v[i] = g / (1.0 + std::exp(-g));
      lt.hidden.v[i] = lt.gate_act.v[i] * lt.up.v[i];
    }
    lt.mlp_out = lrp::matmul(lt.hidden, lrp::to_grid(p.w_down));
    lt.x_out = lrp::Grid(t_len, d);
    for (std::size_t i = 0; i < t_len * d; ++i) lt.x_out.v[i] = lt.x_mid.v[i] + lt.mlp_out.v[i];
    x = lt.x_out;
    trace.layers.push_back(std::move(lt));
  }
  trace.final_normed = rmsnorm_grid(x, model.final_norm_weight());
  trace.logits = lrp::matmul(trace.final_normed, lrp::to_grid(model.lm_head()));
  return trace;
}

// Splits relevance of an elementwise sum y = a + b back onto the addends,
// proportionally to their signed contributions (epsilon rule on a sum).
inline void split_residual(const lrp::Grid& a, const lrp::Grid& b, const lrp::Grid& y,
                           const lrp::Grid& relevance, lrp::Grid& r_a, lrp::Grid& r_b) {
  r_a = lrp::Grid(y.rows, y.cols);
  r_b = lrp::Grid(y.rows, y.cols);
  for (std::size_t i = 0; i < y.v.size(); ++i) {
    const double r = relevance.v[i];
    if (r == 0.0) continue;
    const double s = lrp::stabilize(y.v[i]);
    r_a.v[i] = r * a.v[i] / s;
    r_b.v[i] = r * b.v[i] / s;
  }
}

}  // namespace detail

/// Backward relevance pass for every response token of (prompt, response).
/// One seed per response token: the realized logit of that token at its
/// predicting position. Optionally logs per-linear-layer conservation sums.
inline SampleRelevance relevance_backward(const Model& model, const TokenSeq& prompt,
                                          const TokenSeq& response,
                                          lrp::ConservationLog* conservation = nullptr) {
  if (response.empty()) throw EmptyResponseError("relevance_backward: empty response");
  if (prompt.empty()) throw ContractError("relevance_backward: empty prompt");
  const ModelConfig& cfg = model.config();
  const TokenSeq tokens = concat(prompt, response);
  const detail::ForwardTrace trace = detail::trace_forward(model, tokens);

  const std::size_t t_len = tokens.size();
  const std::size_t d = cfg.d_model;
  const std::size_t dh = model.head_dim();

  SampleRelevance result;
  result.n_layers = cfg.n_layers;
  result.d_ff = cfg.d_ff;
  result.response_tokens = response.size();
  result.values.assign(cfg.n_layers * cfg.d_ff * response.size(), 0.0);

  auto record = [&](std::string name, double sum_out, double sum_in) {
    if (conservation != nullptr) conservation->push_back({std::move(name), sum_out, sum_in});
  };

  const lrp::Grid lm_head = lrp::to_grid(model.lm_head());
  for (std::size_t i = 0; i < response.size(); ++i) {
    const std::size_t seed_pos = prompt.size() + i - 1;  // row predicting response token i
    const Token target = tokens[prompt.size() + i];

    lrp::Grid r_logits(t_len, cfg.vocab_size);
    r_logits.at(seed_pos, target) = trace.logits.at(seed_pos, target);

    lrp::Grid r_x = lrp::linear_epsilon_backward(trace.final_normed, lm_head, trace.logits,
                                                 r_logits);
    record("lm_head", r_logits.total(), r_x.total());
    // rmsnorm: identity rule, r_x now refers to the final block output.

    for (std::size_t l = cfg.n_layers; l-- > 0;) {
      const auto& lt = trace.layers[l];
      const auto& p = model.layer(l);
      const std::string tag = "layer" + std::to_string(l) + ".";

      lrp::Grid r_x_mid, r_mlp_out;
      detail::split_residual(lt.x_mid, lt.mlp_out, lt.x_out, r_x, r_x_mid, r_mlp_out);

      lrp::Grid r_hidden = lrp::linear_epsilon_backward(lt.hidden, lrp::to_grid(p.w_down),
                                                        lt.mlp_out, r_mlp_out);
      record(tag + "down", r_mlp_out.total(), r_hidden.total());

      // Tap the neuron grid: channel total over all positions for this token.
      for (std::size_t j = 0; j < cfg.d_ff; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < t_len; ++t) acc += r_hidden.at(t, j);
        result.at(l, j, i) += acc;
      }

      lrp::Grid r_gate_act(t_len, cfg.d_ff), r_up(t_len, cfg.d_ff);
      for (std::size_t idx = 0; idx < r_hidden.v.size(); ++idx) {
        auto [ra, rb] = lrp::product_split(lt.gate_act.v[idx], lt.up.v[idx], r_hidden.v[idx]);
        r_gate_act.v[idx] = ra;
        r_up.v[idx] = rb;
      }
      // silu: identity rule, r_gate_act refers to gate_pre now.
      lrp::Grid r_normed2 = lrp::linear_epsilon_backward(lt.normed2, lrp::to_grid(p.w_gate),
                                                         lt.gate_pre, r_gate_act);
      record(tag + "gate", r_gate_act.total(), r_normed2.total());
      {
        lrp::Grid r_from_up = lrp::linear_epsilon_backward(lt.normed2, lrp::to_grid(p.w_up),
                                                           lt.up, r_up);
        record(tag + "up", r_up.total(), r_from_up.total());
        for (std::size_t idx = 0; idx < r_normed2.v.size(); ++idx) {
          r_normed2.v[idx] += r_from_up.v[idx];
        }
      }
      // rmsnorm identity: relevance lands on x_mid.
      for (std::size_t idx = 0; idx < r_x_mid.v.size(); ++idx) r_x_mid.v[idx] += r_normed2.v[idx];

      lrp::Grid r_x_in, r_attn_out;
      detail::split_residual(lt.x_in, lt.attn_out, lt.x_mid, r_x_mid, r_x_in, r_attn_out);

      lrp::Grid r_concat = lrp::linear_epsilon_backward(lt.attn_concat, lrp::to_grid(p.wo),
                                                        lt.attn_out, r_attn_out);
      record(tag + "wo", r_attn_out.total(), r_concat.total());

      // Attention with constant probabilities: out[:, j] = probs * v[:, j].
      lrp::Grid r_v(t_len, d);
      for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
        const lrp::Grid& probs = lt.probs[hd];
        double head_out_sum = 0.0, head_in_sum = 0.0;
        for (std::size_t j = 0; j < dh; ++j) {
          const std::size_t col = hd * dh + j;
          for (std::size_t t = 0; t < t_len; ++t) {
            const double r = r_concat.at(t, col);
            if (r == 0.0) continue;
            head_out_sum += r;
            const double scaled = r / lrp::stabilize(lt.attn_concat.at(t, col));
            for (std::size_t u = 0; u <= t; ++u) {
              const double contrib = probs.at(t, u) * lt.v.at(u, col);
              if (contrib == 0.0) continue;
              r_v.at(u, col) += contrib * scaled;
            }
          }
        }
        for (std::size_t j = 0; j < dh; ++j) {
          for (std::size_t t = 0; t < t_len; ++t) head_in_sum += r_v.at(t, hd * dh + j);
        }
        record(tag + "head" + std::to_string(hd) + ".av", head_out_sum, head_in_sum);
      }

      lrp::Grid r_normed1 = lrp::linear_epsilon_backward(lt.normed1, lrp::to_grid(p.wv), lt.v,
                                                         r_v);
      record(tag + "wv", r_v.total(), r_normed1.total());
      // Query/key paths carry no relevance under the constant-attention rule.
      // rmsnorm identity: relevance lands on x_in.
      for (std::size_t idx = 0; idx < r_x_in.v.size(); ++idx) r_x_in.v[idx] += r_normed1.v[idx];
      r_x = std::move(r_x_in);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Aggregation (flat mean of |R| over all (sample, response-token) pairs)
// ---------------------------------------------------------------------------

struct RelevanceTable {
  std::size_t n_layers = 0;
  std::size_t d_ff = 0;
  std::vector<double> scores;  // [l * d_ff + j], all >= 0
  std::size_t sample_count = 0;
  std::size_t token_count = 0;
  std::string config_fingerprint;

  double score(const NeuronId& n) const { return scores[n.layer * d_ff + n.channel]; }
};

class RelevanceAccumulator {
 public:
  RelevanceAccumulator(std::size_t n_layers, std::size_t d_ff)
      : n_layers_(n_layers), d_ff_(d_ff), sums_(n_layers * d_ff, 0.0) {}

  void add(const SampleRelevance& sample) {
    if (sample.n_layers != n_layers_ || sample.d_ff != d_ff_) {
      throw CompatibilityError("relevance sample grid does not match accumulator");
    }
    if (sample.response_tokens == 0) {
      throw ContractError("relevance sample with zero response tokens");
    }
    for (std::size_t idx = 0; idx < sums_.size(); ++idx) {
      const double* row = &sample.values[idx * sample.response_tokens];
      for (std::size_t t = 0; t < sample.response_tokens; ++t) sums_[idx] += std::fabs(row[t]);
    }
    token_count_ += sample.response_tokens;
    ++sample_count_;
  }

  RelevanceTable finalize(const std::string& config_fingerprint) const {
    if (sample_count_ == 0) throw EmptyCorpusError("relevance aggregation over zero samples");
    RelevanceTable table;
    table.n_layers = n_layers_;
    table.d_ff = d_ff_;
    table.scores.resize(sums_.size());
    for (std::size_t i = 0; i < sums_.size(); ++i) {
      table.scores[i] = sums_[i] / static_cast<double>(token_count_);
    }
    table.sample_count = sample_count_;
    table.token_count = token_count_;
    table.config_fingerprint = config_fingerprint;
    return table;
  }

 private:
  std::size_t n_layers_, d_ff_;
  std::vector<double> sums_;
  std::size_t sample_count_ = 0;
  std::size_t token_count_ = 0;
};

/// Convenience wrapper: mean |R| over a batch of per-sample relevances.
inline RelevanceTable aggregate_relevance(const std::vector<SampleRelevance>& samples,
                                          std::size_t n_layers, std::size_t d_ff,
                                          const std::string& config_fingerprint) {
  RelevanceAccumulator acc(n_layers, d_ff);
  for (const auto& s : samples) acc.add(s);
  return acc.finalize(config_fingerprint);
}

// ---------------------------------------------------------------------------
// Top-K selection
// ---------------------------------------------------------------------------

struct ScoredNeuron {
  NeuronId id;
  double score = 0.0;
};

/// Fixed neuron set, ordered by (score desc, layer asc, channel asc).
struct NeuronSet {
  std::vector<ScoredNeuron> neurons;
  std::string model_fingerprint;

  std::size_t k() const { return neurons.size(); }

  std::vector<NeuronId> ids() const {
    std::vector<NeuronId> out;
    out.reserve(neurons.size());
    for (const auto& n : neurons) out.push_back(n.id);
    return out;
  }
};

inline constexpr std::size_t kDefaultTopK = 64;

inline NeuronSet select_top_k(const RelevanceTable& table, std::size_t k) {
  const std::size_t total = table.n_layers * table.d_ff;
  if (k < 1 || k > total) {
    throw SelectionError("top-k selection: k = " + std::to_string(k) +
                         " outside [1, " + std::to_string(total) + "]");
  }
  std::vector<ScoredNeuron> all;
  all.reserve(total);
  for (std::size_t l = 0; l < table.n_layers; ++l) {
    for (std::size_t j = 0; j < table.d_ff; ++j) {
      all.push_back({{l, j}, table.scores[l * table.d_ff + j]});
    }
  }
  std::sort(all.begin(), all.end(), [](const ScoredNeuron& a, const ScoredNeuron& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  NeuronSet set;
  set.neurons.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k));
  set.model_fingerprint = table.config_fingerprint;
  return set;
}

// ---------------------------------------------------------------------------
// Neuron-set persistence (line-oriented text)
// ---------------------------------------------------------------------------

inline constexpr int kNeuronSetVersion = 1;

inline void save_neuron_set(const NeuronSet& set, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PersistenceError("cannot open neuron set for writing: " + path.string());
  out << "version " << kNeuronSetVersion << "\n";
  out << "model_fingerprint " << set.model_fingerprint << "\n";
  out << "k " << set.neurons.size() << "\n";
  out << std::setprecision(17);
  for (const auto& n : set.neurons) {
    out << n.id.layer << "\t" << n.id.channel << "\t" << n.score << "\n";
  }
  if (!out) throw PersistenceError("short write while saving neuron set: " + path.string());
}

/// Loads and validates a neuron set. The stored fingerprint must match
/// `expected_fingerprint` (pass the current model config's fingerprint).
inline NeuronSet load_neuron_set(const std::filesystem::path& path,
                                 const std::string& expected_fingerprint) {
  std::ifstream in(path);
  if (!in) throw PersistenceError("cannot open neuron set: " + path.string());
  std::string key;
  int version = -1;
  if (!(in >> key >> version) || key != "version") {
    throw FormatError("neuron set: missing version header");
  }
  if (version != kNeuronSetVersion) {
    throw FormatError("neuron set: unsupported version " + std::to_string(version));
  }
  NeuronSet set;
  if (!(in >> key >> set.model_fingerprint) || key != "model_fingerprint") {
    throw FormatError("neuron set: missing model_fingerprint header");
  }
  std::size_t k = 0;
  if (!(in >> key >> k) || key != "k") throw FormatError("neuron set: missing k header");
  if (set.model_fingerprint != expected_fingerprint) {
    throw CompatibilityError("neuron set fingerprint " + set.model_fingerprint +
                             " does not match model " + expected_fingerprint);
  }
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (std::size_t i = 0; i < k; ++i) {
    ScoredNeuron n;
    if (!(in >> n.id.layer >> n.id.channel >> n.score)) {
      throw FormatError("neuron set: truncated at entry " + std::to_string(i));
    }
    if (!seen.insert({n.id.layer, n.id.channel}).second) {
      throw FormatError("neuron set: duplicate neuron (" + std::to_string(n.id.layer) + ", " +
                        std::to_string(n.id.channel) + ")");
    }
    set.neurons.push_back(n);
  }
  return set;
}

}  // namespace yfpo
