#pragma once

// The loss layer: neuron score and margin, DPO delta and loss, and the
// combined objective that adds the neuron margin as an auxiliary reward.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "yfpo/model.hpp"
#include "yfpo/tensor.hpp"

namespace yfpo {

/// One preference example: prompt, preferred and dispreferred responses, as
/// token sequences. Response sequences include the trailing EOS token.
struct PreferenceExample {
  TokenSeq prompt;
  TokenSeq chosen;
  TokenSeq rejected;
  std::string id;

  void validate(const ModelConfig& cfg) const {
    if (chosen.empty() || rejected.empty()) {
      throw EmptyResponseError("preference example '" + id + "': empty response");
    }
    if (prompt.empty()) throw ContractError("preference example '" + id + "': empty prompt");
    if (prompt.size() + chosen.size() > cfg.max_seq_len ||
        prompt.size() + rejected.size() > cfg.max_seq_len) {
      throw LengthError("preference example '" + id + "' exceeds max_seq_len");
    }
  }
};

/// All scalar terms of one loss evaluation.
struct LossBreakdown {
  double delta_dpo = 0.0;
  double loss_dpo = 0.0;
  double s_neu_plus = 0.0;
  double s_neu_minus = 0.0;
  double delta_neu = 0.0;
  double loss_total = 0.0;
  double lambda = 0.0;
  double beta = 0.0;
};

/// Mean absolute activation over every (neuron, response-token) pair.
/// Differentiable; taps must already be restricted to response positions.
inline Tensor neuron_score(Tape& tape, const std::map<NeuronId, Tensor>& taps) {
  if (taps.empty()) throw ContractError("neuron_score: empty neuron set");
  std::size_t count = 0;
  Tensor acc = Tensor::scalar(0.0);
  for (const auto& [id, tap] : taps) {
    if (tap.size() == 0) throw ContractError("neuron_score: tap with zero response tokens");
    acc = add(tape, acc, sum(tape, abs(tape, tap)));
    count += tap.size();
  }
  if (count == 0) throw ContractError("neuron_score: zero response tokens");
  return scale(tape, acc, 1.0 / static_cast<double>(count));
}

/// Signed difference of the chosen and rejected neuron scores.
inline Tensor neuron_margin(Tape& tape, const Tensor& s_plus, const Tensor& s_minus) {
  return sub(tape, s_plus, s_minus);
}

/// Policy-vs-reference double margin of response log-probabilities.
/// Gradient flows only into the policy (the reference is frozen).
inline Tensor dpo_delta(Tape& tape, const Model& policy, const Model& reference,
                        const PreferenceExample& example) {
  if (policy.config() != reference.config()) {
    throw CompatibilityError("dpo_delta: policy and reference configs differ");
  }
  example.validate(policy.config());
  Tensor pol_plus = policy.sequence_log_prob(tape, example.prompt, example.chosen);
  Tensor pol_minus = policy.sequence_log_prob(tape, example.prompt, example.rejected);
  Tensor ref_plus = reference.sequence_log_prob(tape, example.prompt, example.chosen);
  Tensor ref_minus = reference.sequence_log_prob(tape, example.prompt, example.rejected);
  return sub(tape, sub(tape, pol_plus, pol_minus), sub(tape, ref_plus, ref_minus));
}

/// -log sigmoid(beta * delta), evaluated as softplus(-beta * delta); stable
/// for |beta * delta| far beyond anything training produces.
inline Tensor dpo_loss(Tape& tape, const Tensor& delta, double beta) {
  if (!(beta > 0.0)) throw ConfigError("dpo_loss: beta must be positive");
  return softplus(tape, scale(tape, delta, -beta));
}

/// Combined objective: loss_dpo - lambda * delta_neu. With lambda == 0 the
/// returned tensor is the dpo loss node itself, so the reduction to plain
/// DPO is bit-exact all the way through backward.
inline std::pair<Tensor, LossBreakdown> yfpo_loss(Tape& tape, const Tensor& loss_dpo,
                                                  const Tensor& delta_neu, double lambda) {
  if (lambda < 0.0) throw ConfigError("yfpo_loss: lambda must be >= 0");
  LossBreakdown breakdown;
  breakdown.loss_dpo = loss_dpo.value();
  breakdown.delta_neu = delta_neu.value();
  breakdown.lambda = lambda;
  Tensor total =
      (lambda == 0.0) ? loss_dpo : sub(tape, loss_dpo, scale(tape, delta_neu, lambda));
  breakdown.loss_total = total.value();
  return {total, breakdown};
}

/// Everything needed for one example's loss, from models to breakdown.
/// `taps_plus`/`taps_minus` must cover response positions only.
inline std::pair<Tensor, LossBreakdown> example_loss(
    Tape& tape, const Tensor& delta_dpo_t, const std::map<NeuronId, Tensor>& taps_plus,
    const std::map<NeuronId, Tensor>& taps_minus, double beta, double lambda) {
  Tensor s_plus = neuron_score(tape, taps_plus);
  Tensor s_minus = neuron_score(tape, taps_minus);
  Tensor d_neu = neuron_margin(tape, s_plus, s_minus);
  Tensor l_dpo = dpo_loss(tape, delta_dpo_t, beta);
  auto [total, breakdown] = yfpo_loss(tape, l_dpo, d_neu, lambda);
  breakdown.delta_dpo = delta_dpo_t.value();
  breakdown.s_neu_plus = s_plus.value();
  breakdown.s_neu_minus = s_minus.value();
  breakdown.beta = beta;
  return {total, breakdown};
}

}  // namespace yfpo
