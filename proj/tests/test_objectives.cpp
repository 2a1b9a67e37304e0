#include "yfpo/objectives.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"

namespace {

using yfpo::Model;
using yfpo::ModelConfig;
using yfpo::NeuronId;
using yfpo::PreferenceExample;
using yfpo::Tape;
using yfpo::Tensor;
using yfpo::TokenSeq;
using yfpo::concat;

ModelConfig tiny_config(std::uint64_t seed = 0) {
  ModelConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 12;
  cfg.max_seq_len = 24;
  cfg.seed = seed;
  return cfg;
}

TokenSeq random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  TokenSeq out(n);
  for (auto& t : out) t = static_cast<yfpo::Token>(1 + rng() % (vocab - 1));
  return out;
}

PreferenceExample random_example(std::mt19937_64& rng, std::size_t vocab = 16) {
  PreferenceExample ex;
  ex.prompt = random_tokens(3 + rng() % 3, vocab, rng);
  ex.chosen = random_tokens(3 + rng() % 4, vocab, rng);
  ex.rejected = random_tokens(3 + rng() % 4, vocab, rng);
  ex.chosen.push_back(yfpo::kEosToken);
  ex.rejected.push_back(yfpo::kEosToken);
  ex.id = "test-" + std::to_string(rng() % 1000);
  return ex;
}

std::map<NeuronId, Tensor> taps_from(std::initializer_list<std::pair<NeuronId, std::vector<double>>> xs) {
  std::map<NeuronId, Tensor> taps;
  for (auto& [id, values] : xs) {
    std::vector<double> copy = values;
    const std::size_t n = copy.size();
    taps[id] = Tensor::from_data({n}, std::move(copy));
  }
  return taps;
}

TEST(NeuronScore, ConstantActivations) {
  Tape tape;
  auto taps = taps_from({{{0, 0}, {-1.5, -1.5, -1.5}}, {{1, 3}, {-1.5, -1.5}}});
  EXPECT_DOUBLE_EQ(yfpo::neuron_score(tape, taps).value(), 1.5);
}

TEST(NeuronScore, DirectArithmetic) {
  Tape tape;
  auto taps = taps_from({{{0, 2}, {1.0, -2.0, 3.0}}});
  EXPECT_DOUBLE_EQ(yfpo::neuron_score(tape, taps).value(), 2.0);
}

TEST(NeuronScore, MatchesNaiveRecomputation) {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> dist(-3.0, 3.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::map<NeuronId, Tensor> taps;
    double total = 0.0;
    std::size_t count = 0;
    const std::size_t n_neurons = 1 + rng() % 6;
    for (std::size_t i = 0; i < n_neurons; ++i) {
      const std::size_t t_len = 1 + rng() % 7;
      std::vector<double> values(t_len);
      for (double& v : values) {
        v = dist(rng);
        total += std::fabs(v);
      }
      count += t_len;
      taps[{i / 3, i % 3}] = Tensor::from_data({t_len}, std::move(values));
    }
    Tape tape;
    EXPECT_NEAR(yfpo::neuron_score(tape, taps).value(), total / static_cast<double>(count), 1e-12);
  }
}

TEST(NeuronScore, EmptyInputsThrow) {
  Tape tape;
  std::map<NeuronId, Tensor> empty;
  EXPECT_THROW(yfpo::neuron_score(tape, empty), yfpo::ContractError);
}

TEST(NeuronMargin, IdentityAndAntisymmetry) {
  Tape tape;
  Tensor a = Tensor::scalar(2.0);
  Tensor b = Tensor::scalar(0.5);
  EXPECT_DOUBLE_EQ(yfpo::neuron_margin(tape, a, a).value(), 0.0);
  EXPECT_DOUBLE_EQ(yfpo::neuron_margin(tape, a, b).value(), 1.5);
  EXPECT_DOUBLE_EQ(yfpo::neuron_margin(tape, b, a).value(), -1.5);
}

TEST(DpoDelta, ZeroWhenPolicyEqualsReference) {
  Model policy(tiny_config(7));
  Model ref = policy.clone_frozen_reference();
  std::mt19937_64 rng(50);
  for (int trial = 0; trial < 5; ++trial) {
    Tape tape;
    EXPECT_EQ(yfpo::dpo_delta(tape, policy, ref, random_example(rng)).value(), 0.0);
  }
}

// Shifts every parameter slightly so the policy is no longer the reference.
void perturb_params(Model& model, double base = 1e-2) {
  std::size_t i = 0;
  for (auto& [name, t] : model.named_parameters()) {
    Tensor tensor = t;
    for (double& v : tensor.mutable_data()) v += base * static_cast<double>((i++ % 7) - 3) / 7.0;
  }
}

TEST(DpoDelta, SwapNegates) {
  Model policy(tiny_config(8));
  Model ref = policy.clone_frozen_reference();
  perturb_params(policy);
  std::mt19937_64 rng(51);
  PreferenceExample ex = random_example(rng);
  PreferenceExample swapped = ex;
  std::swap(swapped.chosen, swapped.rejected);
  Tape tape;
  const double d = yfpo::dpo_delta(tape, policy, ref, ex).value();
  const double ds = yfpo::dpo_delta(tape, policy, ref, swapped).value();
  EXPECT_NEAR(ds, -d, 1e-12);
}

TEST(DpoDelta, MatchesFourCallRecomposition) {
  Model policy(tiny_config(10));
  Model ref = policy.clone_frozen_reference();
  perturb_params(policy);
  std::mt19937_64 rng(52);
  for (int trial = 0; trial < 20; ++trial) {
    PreferenceExample ex = random_example(rng);
    Tape tape;
    const double d = yfpo::dpo_delta(tape, policy, ref, ex).value();
    Tape t2;
    const double expect =
        (policy.sequence_log_prob(t2, ex.prompt, ex.chosen).value() -
         policy.sequence_log_prob(t2, ex.prompt, ex.rejected).value()) -
        (ref.sequence_log_prob(t2, ex.prompt, ex.chosen).value() -
         ref.sequence_log_prob(t2, ex.prompt, ex.rejected).value());
    EXPECT_NEAR(d, expect, 1e-12);
  }
}

TEST(DpoDelta, ConfigMismatchThrows) {
  Model policy(tiny_config(1));
  ModelConfig other = tiny_config(1);
  other.d_ff = 10;
  Model ref(other);
  std::mt19937_64 rng(53);
  Tape tape;
  EXPECT_THROW(yfpo::dpo_delta(tape, policy, ref, random_example(rng)),
               yfpo::CompatibilityError);
}

TEST(DpoLoss, ZeroDeltaGivesLn2) {
  Tape tape;
  for (double beta : {0.05, 0.1, 1.0, 7.5}) {
    EXPECT_NEAR(yfpo::dpo_loss(tape, Tensor::scalar(0.0), beta).value(), std::log(2.0), 1e-15);
  }
}

TEST(DpoLoss, KnownValue) {
  Tape tape;
  // beta=0.1, delta=5 -> ln(1 + e^-0.5)
  EXPECT_NEAR(yfpo::dpo_loss(tape, Tensor::scalar(5.0), 0.1).value(), 0.47407698418010663,
              1e-12);
}

TEST(DpoLoss, LimitBehaviorAndStability) {
  Tape tape;
  // Large positive delta: loss -> 0 from above, never negative.
  const double near_zero = yfpo::dpo_loss(tape, Tensor::scalar(200.0), 1.0).value();
  EXPECT_GE(near_zero, 0.0);
  EXPECT_LT(near_zero, 1e-80);
  // Large negative delta: loss ~ beta * |delta|, no overflow.
  const double big = yfpo::dpo_loss(tape, Tensor::scalar(-1e4), 1.0).value();
  EXPECT_NEAR(big, 1e4, 1e-6);
  for (double d : {1e4, -1e4, 12345.678, -0.0}) {
    Tensor loss = yfpo::dpo_loss(tape, Tensor::scalar(d), 1.0);
    EXPECT_TRUE(std::isfinite(loss.value()));
  }
  // Monotone decreasing in delta.
  double prev = yfpo::dpo_loss(tape, Tensor::scalar(-5.0), 0.5).value();
  for (double d = -4.0; d <= 5.0; d += 1.0) {
    const double cur = yfpo::dpo_loss(tape, Tensor::scalar(d), 0.5).value();
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(DpoLoss, InvalidBetaThrows) {
  Tape tape;
  EXPECT_THROW(yfpo::dpo_loss(tape, Tensor::scalar(1.0), 0.0), yfpo::ConfigError);
  EXPECT_THROW(yfpo::dpo_loss(tape, Tensor::scalar(1.0), -0.1), yfpo::ConfigError);
}

TEST(YfpoLoss, LambdaZeroIsBitIdenticalToDpo) {
  Tape tape;
  Tensor l_dpo = yfpo::dpo_loss(tape, Tensor::scalar(0.37), 0.1);
  Tensor d_neu = Tensor::scalar(123.456);
  auto [total, breakdown] = yfpo::yfpo_loss(tape, l_dpo, d_neu, 0.0);
  EXPECT_EQ(total.value(), l_dpo.value());
  EXPECT_EQ(total.impl(), l_dpo.impl());  // same tape node
  EXPECT_EQ(breakdown.loss_total, breakdown.loss_dpo);
}

TEST(YfpoLoss, DirectArithmetic) {
  Tape tape;
  auto [t1, b1] = yfpo::yfpo_loss(tape, Tensor::scalar(0.693147), Tensor::scalar(0.1), 1.0);
  EXPECT_NEAR(t1.value(), 0.593147, 1e-12);
  auto [t2, b2] = yfpo::yfpo_loss(tape, Tensor::scalar(0.693147), Tensor::scalar(-0.2), 0.05);
  EXPECT_NEAR(t2.value(), 0.693147 + 0.01, 1e-12);
}

TEST(YfpoLoss, NegativeLambdaThrows) {
  Tape tape;
  EXPECT_THROW(yfpo::yfpo_loss(tape, Tensor::scalar(0.5), Tensor::scalar(0.0), -0.01),
               yfpo::ConfigError);
}

TEST(YfpoLoss, BreakdownInvariants) {
  std::mt19937_64 rng(60);
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    Tape tape;
    auto taps_plus = std::map<NeuronId, Tensor>{};
    auto taps_minus = std::map<NeuronId, Tensor>{};
    for (std::size_t i = 0; i < 3; ++i) {
      std::vector<double> a(4), b(4);
      for (double& v : a) v = dist(rng);
      for (double& v : b) v = dist(rng);
      taps_plus[{0, i}] = Tensor::from_data({4}, std::move(a));
      taps_minus[{0, i}] = Tensor::from_data({4}, std::move(b));
    }
    const double lambda = std::fabs(dist(rng));
    auto [total, bd] =
        yfpo::example_loss(tape, Tensor::scalar(dist(rng)), taps_plus, taps_minus, 0.1, lambda);
    EXPECT_NEAR(bd.loss_total, bd.loss_dpo - bd.lambda * bd.delta_neu, 1e-12);
    EXPECT_NEAR(bd.delta_neu, bd.s_neu_plus - bd.s_neu_minus, 1e-12);
    EXPECT_EQ(bd.loss_total, total.value());
  }
}

// Swapping chosen/rejected negates both margins and mirrors the loss.
TEST(Objectives, AntisymmetryUnderSwap) {
  Model policy(tiny_config(12));
  Model ref = policy.clone_frozen_reference();
  perturb_params(policy);  // move the policy off the reference so deltas are nonzero
  std::mt19937_64 rng(61);
  const std::vector<NeuronId> neurons = {{0, 0}, {0, 5}, {1, 2}, {1, 11}};
  for (int trial = 0; trial < 10; ++trial) {
    PreferenceExample ex = random_example(rng);
    PreferenceExample swapped = ex;
    std::swap(swapped.chosen, swapped.rejected);

    auto eval = [&](const PreferenceExample& e) {
      Tape tape;
      Tensor delta = yfpo::dpo_delta(tape, policy, ref, e);
      auto plus = policy.forward_with_taps(tape, concat(e.prompt, e.chosen), neurons);
      auto minus = policy.forward_with_taps(tape, concat(e.prompt, e.rejected), neurons);
      std::map<NeuronId, Tensor> tp, tm;
      for (auto& [n, tap] : plus.taps) {
        tp[n] = yfpo::slice_rows(tape, tap, e.prompt.size(), e.chosen.size());
      }
      for (auto& [n, tap] : minus.taps) {
        tm[n] = yfpo::slice_rows(tape, tap, e.prompt.size(), e.rejected.size());
      }
      auto [total, bd] = yfpo::example_loss(tape, delta, tp, tm, 0.1, 0.25);
      return bd;
    };
    const auto bd = eval(ex);
    const auto bds = eval(swapped);
    EXPECT_NEAR(bds.delta_dpo, -bd.delta_dpo, 1e-12);
    EXPECT_NEAR(bds.delta_neu, -bd.delta_neu, 1e-12);
    // L(delta) maps to L(-delta): check through the sigmoid identity
    // softplus(x) - softplus(-x) = x.
    EXPECT_NEAR(bds.loss_dpo - bd.loss_dpo, 0.1 * bd.delta_dpo - 0.0, 1e-9);
  }
}

// With the policy cloned from the reference, every example yields ln 2.
TEST(Objectives, IdentityAtInit) {
  Model policy(tiny_config(13));
  Model ref = policy.clone_frozen_reference();
  std::mt19937_64 rng(62);
  for (int trial = 0; trial < 100; ++trial) {
    Tape tape;
    Tensor delta = yfpo::dpo_delta(tape, policy, ref, random_example(rng));
    const double loss = yfpo::dpo_loss(tape, delta, 0.1).value();
    EXPECT_NEAR(loss, std::log(2.0), 1e-9);
  }
}

// Replacing prompt-position activations arbitrarily leaves the score alone
// because taps are sliced to response rows before scoring.
TEST(Objectives, PromptExclusion) {
  Model policy(tiny_config(14));
  std::mt19937_64 rng(63);
  PreferenceExample ex = random_example(rng);
  const std::vector<NeuronId> neurons = {{0, 1}, {1, 3}};

  TokenSeq seq = concat(ex.prompt, ex.chosen);
  Tape tape;
  auto result = policy.forward_with_taps(tape, seq, neurons);
  double base;
  {
    std::map<NeuronId, Tensor> sliced;
    for (auto& [n, tap] : result.taps) {
      sliced[n] = yfpo::slice_rows(tape, tap, ex.prompt.size(), ex.chosen.size());
    }
    base = yfpo::neuron_score(tape, sliced).value();
  }
  // Same tap values with garbage written into prompt positions.
  {
    std::map<NeuronId, Tensor> sliced;
    for (auto& [n, tap] : result.taps) {
      std::vector<double> vals(tap.data().begin(), tap.data().end());
      for (std::size_t t = 0; t < ex.prompt.size(); ++t) vals[t] = 1e6 + static_cast<double>(t);
      const std::size_t n_vals = vals.size();
      Tensor junk = Tensor::from_data({n_vals}, std::move(vals));
      sliced[n] = yfpo::slice_rows(tape, junk, ex.prompt.size(), ex.chosen.size());
    }
    EXPECT_EQ(yfpo::neuron_score(tape, sliced).value(), base);
  }
}

// Gradient of the full combined loss w.r.t. every model parameter.
TEST(Objectives, FullLossGradientMatchesFiniteDifferences) {
  Model policy(tiny_config(15));
  Model ref = policy.clone_frozen_reference();
  std::mt19937_64 rng(64);
  PreferenceExample ex = random_example(rng);
  const std::vector<NeuronId> neurons = {{0, 0}, {0, 7}, {1, 2}, {1, 9}};

  auto build = [&](Tape& tape) {
    auto plus = policy.forward_with_taps(tape, concat(ex.prompt, ex.chosen), neurons);
    auto minus = policy.forward_with_taps(tape, concat(ex.prompt, ex.rejected), neurons);
    Tensor pol_plus =
        Model::response_log_prob_from_logits(tape, plus.logits, ex.prompt.size(), ex.chosen);
    Tensor pol_minus =
        Model::response_log_prob_from_logits(tape, minus.logits, ex.prompt.size(), ex.rejected);
    Tensor ref_plus = ref.sequence_log_prob(tape, ex.prompt, ex.chosen);
    Tensor ref_minus = ref.sequence_log_prob(tape, ex.prompt, ex.rejected);
    Tensor delta = yfpo::sub(tape, yfpo::sub(tape, pol_plus, pol_minus),
                             yfpo::sub(tape, ref_plus, ref_minus));
    std::map<NeuronId, Tensor> tp, tm;
    for (auto& [n, tap] : plus.taps) {
      tp[n] = yfpo::slice_rows(tape, tap, ex.prompt.size(), ex.chosen.size());
    }
    for (auto& [n, tap] : minus.taps) {
      tm[n] = yfpo::slice_rows(tape, tap, ex.prompt.size(), ex.rejected.size());
    }
    auto [total, bd] = yfpo::example_loss(tape, delta, tp, tm, 0.1, 0.3);
    return total;
  };
  auto report = yfpo::grad_check(build, policy.named_parameters(), 1e-4, 1e-4, 10, 5);
  EXPECT_TRUE(report.passed) << "max rel err " << report.max_rel_err << " at "
                             << report.worst_tensor << "[" << report.worst_index << "]";
}

}  // namespace
