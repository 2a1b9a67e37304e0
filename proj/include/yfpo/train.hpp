#pragma once

// Online stage: iterate preference batches, compute the combined loss with
// tapped activations, update the policy with Adam against a frozen
// reference, save three checkpoints, and log every margin per step.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "yfpo/data.hpp"
#include "yfpo/model.hpp"
#include "yfpo/objectives.hpp"
#include "yfpo/relevance.hpp"

namespace yfpo {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// One Adam update for a single parameter buffer. `t` is the 1-based global
/// step used for bias correction; `m`/`v` are the running moments.
inline void adam_step(std::span<double> param, std::span<const double> grad,
                      std::vector<double>& m, std::vector<double>& v, std::size_t t, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  if (param.size() != grad.size() || param.size() != m.size() || param.size() != v.size()) {
    throw ContractError("adam_step: parameter/gradient/state sizes disagree");
  }
  if (t == 0) throw ContractError("adam_step: step index must be >= 1");
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::vector<std::pair<std::string, Tensor>> params, double lr)
      : params_(std::move(params)), lr_(lr) {
    for (const auto& [name, p] : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  std::size_t steps() const { return t_; }

  void step() {
    ++t_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor p = params_[i].second;
      auto g = p.grad();
      if (g.empty()) {
        const std::vector<double> zeros(p.size(), 0.0);
        adam_step(p.mutable_data(), zeros, m_[i], v_[i], t_, lr_);
      } else {
        adam_step(p.mutable_data(), g, m_[i], v_[i], t_, lr_);
      }
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) {
      Tensor t = p;
      t.zero_grad();
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Train configuration and run log
// ---------------------------------------------------------------------------

struct TrainConfig {
  ModelConfig model;
  std::string method = "yfpo";  // "yfpo" or "dpo" (identical when lambda == 0)
  double beta = 0.1;
  double lambda = 0.0;
  double learning_rate = 1e-4;
  std::size_t batch_size = 8;
  std::size_t total_steps = 500;
  std::vector<double> checkpoint_fractions = {1.0 / 3.0, 2.0 / 3.0, 1.0};
  std::uint64_t seed = 0;
  std::string dataset_path;
  std::string eval_dataset_path;
  std::string neuron_set_path;
  std::string out_dir;
  std::size_t eval_limit = 64;
  std::size_t eval_max_new = 48;
  std::string run_label;  // train-data label in reports; defaults to the dataset stem

  void validate() const {
    model.validate();
    if (method != "yfpo" && method != "dpo") {
      throw ConfigError("train config: method must be 'yfpo' or 'dpo'");
    }
    if (!(beta > 0.0)) throw ConfigError("train config: beta must be positive");
    if (lambda < 0.0) throw ConfigError("train config: lambda must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("train config: learning_rate must be positive");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (total_steps < 3) throw ConfigError("train config: total_steps must be >= 3");
    if (checkpoint_fractions.empty()) {
      throw ConfigError("train config: need at least one checkpoint fraction");
    }
    double prev = 0.0;
    for (double f : checkpoint_fractions) {
      if (!(f > prev) || f > 1.0) {
        throw ConfigError("train config: checkpoint fractions must be strictly increasing in (0, 1]");
      }
      prev = f;
    }
    const auto steps = checkpoint_steps();
    for (std::size_t i = 1; i < steps.size(); ++i) {
      if (steps[i] <= steps[i - 1]) {
        throw ConfigError("train config: checkpoint fractions collapse onto the same step");
      }
    }
  }

  std::vector<std::size_t> checkpoint_steps() const {
    std::vector<std::size_t> out;
    out.reserve(checkpoint_fractions.size());
    for (double f : checkpoint_fractions) {
      const auto s = static_cast<std::size_t>(
          std::ceil(f * static_cast<double>(total_steps) - 1e-9));
      out.push_back(std::max<std::size_t>(1, std::min(s, total_steps)));
    }
    return out;
  }

  std::string label() const {
    if (!run_label.empty()) return run_label;
    return std::filesystem::path(dataset_path).stem().string();
  }

  std::string method_label() const { return method == "dpo" ? "DPO" : "DPO+YFPO"; }
};

struct StepRecord {
  std::size_t step = 0;
  double loss_total = 0.0;
  double loss_dpo = 0.0;
  double delta_dpo = 0.0;
  double delta_neu = 0.0;  // per-step batch mean
  double s_neu_plus = 0.0;
  double s_neu_minus = 0.0;
};

struct CheckpointRecord {
  std::string name;  // Ckpt-1, Ckpt-2, Ckpt-3
  std::size_t step = 0;
  double eval_accuracy = 0.0;
  std::string path;  // relative to the run directory
};

struct RunLog {
  std::vector<StepRecord> steps;
  std::vector<CheckpointRecord> checkpoints;
  bool aborted = false;
  std::string abort_reason;
};

// ---------------------------------------------------------------------------
// Run log persistence (JSONL)
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::ordered_json step_json(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["type"] = "step";
  j["step"] = r.step;
  j["loss_total"] = r.loss_total;
  j["loss_dpo"] = r.loss_dpo;
  j["delta_dpo"] = r.delta_dpo;
  j["delta_neu"] = r.delta_neu;
  j["s_neu_plus"] = r.s_neu_plus;
  j["s_neu_minus"] = r.s_neu_minus;
  return j;
}

inline nlohmann::ordered_json checkpoint_json(const CheckpointRecord& r) {
  nlohmann::ordered_json j;
  j["type"] = "checkpoint";
  j["name"] = r.name;
  j["step"] = r.step;
  j["eval_accuracy"] = r.eval_accuracy;
  j["path"] = r.path;
  return j;
}

}  // namespace detail

inline RunLog load_runlog(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw PersistenceError("cannot open run log: " + path.string());
  RunLog log;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("run log line " + std::to_string(line_no) + ": " + e.what());
    }
    const std::string type = j.value("type", "");
    if (type == "step") {
      StepRecord r;
      r.step = j.at("step").get<std::size_t>();
      r.loss_total = j.at("loss_total").get<double>();
      r.loss_dpo = j.at("loss_dpo").get<double>();
      r.delta_dpo = j.at("delta_dpo").get<double>();
      r.delta_neu = j.at("delta_neu").get<double>();
      r.s_neu_plus = j.at("s_neu_plus").get<double>();
      r.s_neu_minus = j.at("s_neu_minus").get<double>();
      log.steps.push_back(r);
    } else if (type == "checkpoint") {
      CheckpointRecord r;
      r.name = j.at("name").get<std::string>();
      r.step = j.at("step").get<std::size_t>();
      r.eval_accuracy = j.at("eval_accuracy").get<double>();
      r.path = j.at("path").get<std::string>();
      log.checkpoints.push_back(r);
    } else if (type == "abort") {
      log.aborted = true;
      log.abort_reason = j.value("reason", "");
    } else {
      throw FormatError("run log line " + std::to_string(line_no) + ": unknown record type");
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// Evaluation: greedy decode, extract the answer after '#', exact match
// ---------------------------------------------------------------------------

struct EvalExample {
  TokenSeq prompt;
  std::string expected_answer;
};

inline std::vector<EvalExample> build_eval_set(const std::vector<DatasetRecord>& records,
                                               const Tokenizer& tok, std::size_t limit) {
  std::vector<EvalExample> out;
  for (const auto& rec : records) {
    if (out.size() >= limit) break;
    auto answer = extract_answer(rec.chosen);
    if (!answer.has_value()) {
      throw FormatError("eval record '" + rec.id + "' has no answer delimiter");
    }
    out.push_back({tok.tokenize(rec.prompt), *answer});
  }
  return out;
}

/// Exact-match accuracy under an arbitrary decoder. Outputs with no parsable
/// answer count as incorrect, never as errors.
inline double evaluate_with_decoder(const std::vector<EvalExample>& eval_set,
                                    const std::function<TokenSeq(const TokenSeq&)>& decode,
                                    const Tokenizer& tok) {
  if (eval_set.empty()) throw ContractError("evaluate: empty eval set");
  auto parse_int = [](const std::string& s) -> std::optional<long long> {
    if (s.empty()) return std::nullopt;
    std::size_t i = s[0] == '-' ? 1 : 0;
    if (i == s.size()) return std::nullopt;
    long long value = 0;
    for (; i < s.size(); ++i) {
      if (s[i] < '0' || s[i] > '9') return std::nullopt;
      value = value * 10 + (s[i] - '0');
    }
    return s[0] == '-' ? -value : value;
  };
  std::size_t correct = 0;
  for (const auto& ex : eval_set) {
    const TokenSeq generated = decode(ex.prompt);
    std::string text;
    try {
      text = tok.detokenize(generated);
    } catch (const IndexError&) {
      continue;  // tokens outside the alphabet: undecodable, counts as incorrect
    }
    const auto got = extract_answer(text);
    if (!got.has_value()) continue;
    const auto got_value = parse_int(*got);
    const auto want_value = parse_int(ex.expected_answer);
    if (got_value.has_value() && want_value.has_value() && *got_value == *want_value) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(eval_set.size());
}

inline double evaluate(const Model& model, const std::vector<EvalExample>& eval_set,
                       const Tokenizer& tok, std::size_t max_new) {
  return evaluate_with_decoder(
      eval_set, [&](const TokenSeq& prompt) { return model.greedy_decode(prompt, max_new); },
      tok);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace detail {

// Deterministic Fisher-Yates; std::shuffle's draw sequence is
// implementation-defined, this one is pinned.
inline void deterministic_shuffle(std::vector<std::size_t>& indices, std::mt19937_64& rng) {
  for (std::size_t i = indices.size(); i > 1; --i) {
    const std::size_t j = rng() % i;
    std::swap(indices[i - 1], indices[j]);
  }
}

// Shuffle-once-per-epoch index stream.
class BatchStream {
 public:
  BatchStream(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) { refill(); }

  std::size_t next() {
    if (cursor_ == order_.size()) refill();
    return order_[cursor_++];
  }

 private:
  void refill() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    std::mt19937_64 rng(seed_ + 0x9e3779b97f4a7c15ULL * (epoch_ + 1));
    deterministic_shuffle(order_, rng);
    cursor_ = 0;
    ++epoch_;
  }

  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace detail

/// Runs the full training loop on a caller-provided policy (already matching
/// config.model). Writes runlog.jsonl, run_meta.json and ckpt-*.bin into
/// config.out_dir. The reference model is cloned from the policy before the
/// first step and never updated.
inline RunLog train_with_model(const TrainConfig& config, Model& policy) {
  config.validate();
  if (policy.config() != config.model) {
    throw CompatibilityError("train: policy model does not match config");
  }

  const Tokenizer tok;
  const auto records = load_dataset(config.dataset_path);
  if (records.empty()) throw EmptyCorpusError("train: dataset is empty");
  std::vector<PreferenceExample> examples;
  examples.reserve(records.size());
  for (const auto& rec : records) {
    PreferenceExample ex = to_example(rec, tok);
    ex.validate(config.model);
    examples.push_back(std::move(ex));
  }

  // The neuron set is loaded once and stays fixed for the whole run.
  const NeuronSet neuron_set =
      load_neuron_set(config.neuron_set_path, config.model.fingerprint());
  const std::vector<NeuronId> neuron_ids = neuron_set.ids();

  std::vector<EvalExample> eval_set;
  if (!config.eval_dataset_path.empty()) {
    eval_set = build_eval_set(load_dataset(config.eval_dataset_path), tok, config.eval_limit);
  }

  std::filesystem::create_directories(config.out_dir);
  const std::filesystem::path out_dir(config.out_dir);
  std::ofstream log_out(out_dir / "runlog.jsonl", std::ios::trunc);
  if (!log_out) throw PersistenceError("cannot open run log for writing in " + config.out_dir);

  {
    nlohmann::ordered_json meta;
    meta["train_data"] = config.label();
    meta["method"] = config.method_label();
    meta["lambda"] = config.lambda;
    meta["beta"] = config.beta;
    meta["learning_rate"] = config.learning_rate;
    meta["batch_size"] = config.batch_size;
    meta["total_steps"] = config.total_steps;
    meta["seed"] = config.seed;
    meta["model_fingerprint"] = config.model.fingerprint();
    meta["k"] = neuron_set.k();
    meta["dataset"] = config.dataset_path;
    meta["eval_dataset"] = config.eval_dataset_path;
    meta["neuron_set"] = config.neuron_set_path;
    std::ofstream meta_out(out_dir / "run_meta.json", std::ios::trunc);
    meta_out << meta.dump(2) << "\n";
  }

  Model reference = policy.clone_frozen_reference();
  AdamOptimizer optimizer(policy.named_parameters(), config.learning_rate);
  detail::BatchStream stream(examples.size(), config.seed);
  const auto ckpt_steps = config.checkpoint_steps();
  const double effective_lambda = config.method == "dpo" ? 0.0 : config.lambda;

  RunLog log;
  for (std::size_t step = 1; step <= config.total_steps; ++step) {
    StepRecord rec;
    rec.step = step;
    try {
      Tape tape;
      Tensor batch_loss = Tensor::scalar(0.0);
      for (std::size_t b = 0; b < config.batch_size; ++b) {
        const PreferenceExample& ex = examples[stream.next()];

        auto plus = policy.forward_with_taps(tape, concat(ex.prompt, ex.chosen), neuron_ids);
        auto minus = policy.forward_with_taps(tape, concat(ex.prompt, ex.rejected), neuron_ids);
        Tensor pol_plus = Model::response_log_prob_from_logits(tape, plus.logits,
                                                               ex.prompt.size(), ex.chosen);
        Tensor pol_minus = Model::response_log_prob_from_logits(tape, minus.logits,
                                                                ex.prompt.size(), ex.rejected);
        Tensor ref_plus = reference.sequence_log_prob(tape, ex.prompt, ex.chosen);
        Tensor ref_minus = reference.sequence_log_prob(tape, ex.prompt, ex.rejected);
        Tensor delta = sub(tape, sub(tape, pol_plus, pol_minus),
                           sub(tape, ref_plus, ref_minus));

        std::map<NeuronId, Tensor> taps_plus, taps_minus;
        for (auto& [n, tap] : plus.taps) {
          taps_plus[n] = slice_rows(tape, tap, ex.prompt.size(), ex.chosen.size());
        }
        for (auto& [n, tap] : minus.taps) {
          taps_minus[n] = slice_rows(tape, tap, ex.prompt.size(), ex.rejected.size());
        }
        auto [total, bd] =
            example_loss(tape, delta, taps_plus, taps_minus, config.beta, effective_lambda);
        batch_loss = add(tape, batch_loss, total);
        rec.loss_total += bd.loss_total;
        rec.loss_dpo += bd.loss_dpo;
        rec.delta_dpo += bd.delta_dpo;
        rec.delta_neu += bd.delta_neu;
        rec.s_neu_plus += bd.s_neu_plus;
        rec.s_neu_minus += bd.s_neu_minus;
      }
      const double inv_b = 1.0 / static_cast<double>(config.batch_size);
      batch_loss = scale(tape, batch_loss, inv_b);
      rec.loss_total *= inv_b;
      rec.loss_dpo *= inv_b;
      rec.delta_dpo *= inv_b;
      rec.delta_neu *= inv_b;
      rec.s_neu_plus *= inv_b;
      rec.s_neu_minus *= inv_b;

      backward(tape, batch_loss);
      optimizer.step();
      optimizer.zero_grad();
      policy.set_train_step(step);
    } catch (const NumericsError& e) {
      nlohmann::ordered_json j;
      j["type"] = "abort";
      j["step"] = step;
      j["reason"] = e.what();
      log_out << j.dump() << "\n";
      log_out.flush();
      log.aborted = true;
      log.abort_reason = e.what();
      throw TrainingError("training aborted at step " + std::to_string(step) + ": " + e.what());
    }

    log.steps.push_back(rec);
    log_out << detail::step_json(rec).dump() << "\n";

    for (std::size_t k = 0; k < ckpt_steps.size(); ++k) {
      if (ckpt_steps[k] != step) continue;
      CheckpointRecord ckpt;
      ckpt.name = "Ckpt-" + std::to_string(k + 1);
      ckpt.step = step;
      ckpt.path = "ckpt-" + std::to_string(k + 1) + ".bin";
      policy.save_checkpoint(out_dir / ckpt.path);
      ckpt.eval_accuracy =
          eval_set.empty() ? 0.0 : evaluate(policy, eval_set, tok, config.eval_max_new);
      log.checkpoints.push_back(ckpt);
      log_out << detail::checkpoint_json(ckpt).dump() << "\n";
    }
  }
  if (!log_out) throw PersistenceError("short write on run log in " + config.out_dir);
  return log;
}

/// Builds the policy from config.model and trains it.
inline RunLog train(const TrainConfig& config) {
  Model policy(config.model);
  return train_with_model(config, policy);
}

}  // namespace yfpo
