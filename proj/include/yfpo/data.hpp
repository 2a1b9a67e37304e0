#pragma once

// Desk-scale arithmetic preference data: templated word problems with
// step-by-step chosen derivations and singly-corrupted rejected ones, a
// fixed-vocabulary greedy tokenizer, and JSONL persistence.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "yfpo/objectives.hpp"
#include "yfpo/tensor.hpp"

namespace yfpo {

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

/// Fixed-vocabulary tokenizer: digits, operator symbols, a small word list,
/// EOS (id 0) and the '#' answer delimiter. Tokenization is greedy
/// longest-match over the vocabulary strings, so detokenize(tokenize(s)) == s
/// for any s over the alphabet.
class Tokenizer {
 public:
  Tokenizer()
      : pieces_{"",                                                  // 0: EOS
                "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",    // 1..10
                "+", "-", "*", "=", ";", "#",                        // 11..16
                "what ", "is ", "?", " "} {}                         // 17..20

  std::size_t vocab_size() const { return pieces_.size(); }

  Token answer_delimiter() const { return 16; }

  TokenSeq tokenize(std::string_view text) const {
    TokenSeq out;
    std::size_t pos = 0;
    while (pos < text.size()) {
      Token best = 0;
      std::size_t best_len = 0;
      for (Token id = 1; id < pieces_.size(); ++id) {
        const std::string& piece = pieces_[id];
        if (piece.size() > best_len && text.substr(pos, piece.size()) == piece) {
          best = id;
          best_len = piece.size();
        }
      }
      if (best_len == 0) {
        throw TokenizationError("unrecognized input at byte " + std::to_string(pos) + " of \"" +
                                std::string(text) + "\"");
      }
      out.push_back(best);
      pos += best_len;
    }
    return out;
  }

  std::string detokenize(const TokenSeq& tokens) const {
    std::string out;
    for (Token id : tokens) {
      if (id >= pieces_.size()) {
        throw IndexError("detokenize: token id " + std::to_string(id) + " out of range");
      }
      out += pieces_[id];
    }
    return out;
  }

 private:
  std::vector<std::string> pieces_;
};

/// Text after the last answer delimiter '#'; nullopt when there is none.
inline std::optional<std::string> extract_answer(std::string_view text) {
  const std::size_t pos = text.rfind('#');
  if (pos == std::string_view::npos) return std::nullopt;
  return std::string(text.substr(pos + 1));
}

// ---------------------------------------------------------------------------
// Problem generation
// ---------------------------------------------------------------------------

enum class ArithmeticOp { Add, Sub, Mul };

struct ArithmeticProblem {
  long long lhs = 0;
  long long rhs = 0;
  ArithmeticOp op = ArithmeticOp::Add;
  std::string surface;  // prompt text
  long long answer = 0;
};

enum class DataSplit { Train, Eval };

struct DatasetRecord {
  std::string id;
  std::string prompt;
  std::string chosen;
  std::string rejected;
};

namespace detail {

inline long long apply_op(ArithmeticOp op, long long a, long long b) {
  switch (op) {
    case ArithmeticOp::Add:
      return a + b;
    case ArithmeticOp::Sub:
      return a - b;
    case ArithmeticOp::Mul:
      return a * b;
  }
  return 0;
}

inline char op_symbol(ArithmeticOp op) {
  switch (op) {
    case ArithmeticOp::Add:
      return '+';
    case ArithmeticOp::Sub:
      return '-';
    case ArithmeticOp::Mul:
      return '*';
  }
  return '?';
}

struct DerivationStep {
  std::string lhs;      // e.g. "12+30"
  long long value = 0;  // its result
};

// Step-by-step derivation: split the right operand into tens and ones so
// two-digit arithmetic decomposes into one or two (mul: three) steps.
inline std::vector<DerivationStep> build_steps(ArithmeticOp op, long long a, long long b) {
  std::vector<DerivationStep> steps;
  const char sym = op_symbol(op);
  const long long tens = (b / 10) * 10;
  const long long ones = b % 10;
  auto term = [&](long long x, long long y, char s) {
    return std::to_string(x) + s + std::to_string(y);
  };
  if (op == ArithmeticOp::Mul) {
    if (tens != 0 && ones != 0) {
      const long long p1 = a * tens;
      const long long p2 = a * ones;
      steps.push_back({term(a, tens, '*'), p1});
      steps.push_back({term(a, ones, '*'), p2});
      steps.push_back({term(p1, p2, '+'), p1 + p2});
    } else {
      steps.push_back({term(a, b, '*'), a * b});
    }
  } else {
    if (tens != 0 && ones != 0) {
      const long long v1 = apply_op(op, a, tens);
      steps.push_back({term(a, tens, sym), v1});
      steps.push_back({term(v1, ones, sym), apply_op(op, v1, ones)});
    } else {
      steps.push_back({term(a, b, sym), apply_op(op, a, b)});
    }
  }
  return steps;
}

inline std::string render_response(const std::vector<DerivationStep>& steps, long long answer) {
  std::string out;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (i) out += ';';
    out += steps[i].lhs + "=" + std::to_string(steps[i].value);
  }
  out += "#" + std::to_string(answer);
  return out;
}

// Stable hash of the canonical problem instance, used to partition the
// problem space into disjoint train/eval pools.
inline std::uint64_t instance_hash(ArithmeticOp op, long long a, long long b) {
  std::string key = std::to_string(static_cast<int>(op)) + ":" + std::to_string(a) + ":" +
                    std::to_string(b);
  return fnv1a64(key);
}

}  // namespace detail

inline bool in_split(const ArithmeticProblem& p, DataSplit split) {
  const bool eval = detail::instance_hash(p.op, p.lhs, p.rhs) % 5 == 0;
  return split == DataSplit::Eval ? eval : !eval;
}

/// Deterministic pseudo-random problem for (seed-derived) rng state.
/// Subtraction operands are ordered so answers stay nonnegative.
inline ArithmeticProblem draw_problem(std::mt19937_64& rng, int difficulty) {
  if (difficulty < 1) throw ConfigError("difficulty must be >= 1");
  long long max_operand = 1;
  for (int i = 0; i < difficulty; ++i) max_operand *= 10;
  max_operand -= 1;

  ArithmeticProblem p;
  p.op = static_cast<ArithmeticOp>(rng() % 3);
  p.lhs = static_cast<long long>(rng() % static_cast<std::uint64_t>(max_operand + 1));
  p.rhs = static_cast<long long>(rng() % static_cast<std::uint64_t>(max_operand + 1));
  if (p.op == ArithmeticOp::Sub && p.lhs < p.rhs) std::swap(p.lhs, p.rhs);
  p.answer = detail::apply_op(p.op, p.lhs, p.rhs);
  const std::string expr =
      std::to_string(p.lhs) + detail::op_symbol(p.op) + std::to_string(p.rhs);
  p.surface = (rng() % 2 == 0) ? expr + "=" : "what is " + expr + "?";
  return p;
}

/// Chosen response plus its singly-corrupted sibling. The corruption type is
/// drawn from the rng: a wrong intermediate value, a wrong final answer, or
/// a skipped derivation step (single-step derivations always corrupt the
/// final answer).
inline DatasetRecord make_record(const ArithmeticProblem& p, std::mt19937_64& rng,
                                 const std::string& id) {
  auto steps = detail::build_steps(p.op, p.lhs, p.rhs);
  if (steps.back().value != p.answer) {
    throw ContractError("derivation does not reproduce the oracle answer");  // unreachable
  }
  DatasetRecord rec;
  rec.id = id;
  rec.prompt = p.surface;
  rec.chosen = detail::render_response(steps, p.answer);

  int kind = static_cast<int>(rng() % 3);
  if (steps.size() < 2 && kind != 1) kind = 1;
  // Nonzero perturbation, kept nonnegative so the digit alphabet suffices.
  auto perturb = [&](long long v) {
    const long long delta = 1 + static_cast<long long>(rng() % 9);
    return (v >= delta && rng() % 2 == 0) ? v - delta : v + delta;
  };
  if (kind == 0) {
    // Wrong intermediate: one non-final step reports a bad value; later
    // steps keep their correct arithmetic, leaving the derivation inconsistent.
    auto bad = steps;
    const std::size_t idx = rng() % (steps.size() - 1);
    bad[idx].value = perturb(bad[idx].value);
    rec.rejected = detail::render_response(bad, p.answer);
  } else if (kind == 1) {
    // Wrong final answer, consistently in the last step and after '#'.
    auto bad = steps;
    const long long wrong = perturb(p.answer);
    bad.back().value = wrong;
    rec.rejected = detail::render_response(bad, wrong);
  } else {
    // Skipped step: drop one non-final step.
    auto bad = steps;
    const std::size_t idx = rng() % (steps.size() - 1);
    bad.erase(bad.begin() + static_cast<std::ptrdiff_t>(idx));
    rec.rejected = detail::render_response(bad, p.answer);
  }
  return rec;
}

/// Pure function of (seed, n, difficulty, split): n preference records whose
/// problem instances all fall in the requested split.
inline std::vector<DatasetRecord> generate_preference_pairs(std::uint64_t seed, std::size_t n,
                                                            int difficulty, DataSplit split) {
  if (n < 1) throw ConfigError("generate_preference_pairs: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<DatasetRecord> out;
  out.reserve(n);
  const char* prefix = split == DataSplit::Eval ? "eval-" : "train-";
  while (out.size() < n) {
    ArithmeticProblem p = draw_problem(rng, difficulty);
    if (!in_split(p, split)) continue;
    out.push_back(make_record(p, rng, prefix + std::to_string(out.size())));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Token conversion
// ---------------------------------------------------------------------------

/// Tokenized example; responses get a trailing EOS so the model learns to
/// terminate.
inline PreferenceExample to_example(const DatasetRecord& rec, const Tokenizer& tok) {
  PreferenceExample ex;
  ex.id = rec.id;
  ex.prompt = tok.tokenize(rec.prompt);
  ex.chosen = tok.tokenize(rec.chosen);
  ex.chosen.push_back(kEosToken);
  ex.rejected = tok.tokenize(rec.rejected);
  ex.rejected.push_back(kEosToken);
  return ex;
}

// ---------------------------------------------------------------------------
// Persistence: one JSON object per line, UTF-8
// ---------------------------------------------------------------------------

inline void save_dataset(const std::vector<DatasetRecord>& records,
                         const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PersistenceError("cannot open dataset for writing: " + path.string());
  for (const auto& rec : records) {
    nlohmann::ordered_json j;
    j["id"] = rec.id;
    j["prompt"] = rec.prompt;
    j["chosen"] = rec.chosen;
    j["rejected"] = rec.rejected;
    out << j.dump() << "\n";
  }
  if (!out) throw PersistenceError("short write while saving dataset: " + path.string());
}

inline std::vector<DatasetRecord> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw PersistenceError("cannot open dataset: " + path.string());
  std::vector<DatasetRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.contains("id") || !j.contains("prompt") || !j.contains("chosen") ||
        !j.contains("rejected")) {
      throw FormatError("dataset line " + std::to_string(line_no) + ": missing field");
    }
    DatasetRecord rec;
    try {
      rec.id = j["id"].get<std::string>();
      rec.prompt = j["prompt"].get<std::string>();
      rec.chosen = j["chosen"].get<std::string>();
      rec.rejected = j["rejected"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace yfpo
