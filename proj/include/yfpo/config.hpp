#pragma once

// Key-value config files: one `key = value` pair per line, '#' comments.
// Command-line flags override file values by rewriting the store before the
// typed configs are built from it.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "yfpo/train.hpp"

namespace yfpo {

class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw PersistenceError("cannot open config file: " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    try {
      return from_string(buf.str());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }

  static KeyValueConfig from_string(const std::string& content) {
    KeyValueConfig cfg;
    std::istringstream in(content);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const std::size_t eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw FormatError("line " + std::to_string(line_no) + ": expected 'key = value'");
      }
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty()) {
        throw FormatError("line " + std::to_string(line_no) + ": empty key");
      }
      cfg.values_[key] = value;
    }
    return cfg;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get_string(const std::string& key, const std::string& fallback = "") const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw FormatError("config key '" + key + "': not a number: '" + it->second + "'");
    }
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t pos = 0;
      const std::uint64_t v = std::stoull(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw FormatError("config key '" + key + "': not an integer: '" + it->second + "'");
    }
  }

  std::vector<double> get_double_list(const std::string& key,
                                      std::vector<double> fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    std::istringstream in(it->second);
    std::string cell;
    while (std::getline(in, cell, ',')) {
      try {
        out.push_back(std::stod(trim(cell)));
      } catch (const std::exception&) {
        throw FormatError("config key '" + key + "': bad list entry '" + cell + "'");
      }
    }
    if (out.empty()) throw FormatError("config key '" + key + "': empty list");
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
  }

  std::map<std::string, std::string> values_;
};

inline ModelConfig model_config_from(const KeyValueConfig& kv) {
  ModelConfig cfg;
  cfg.vocab_size = kv.get_u64("vocab_size", cfg.vocab_size);
  cfg.d_model = kv.get_u64("d_model", cfg.d_model);
  cfg.n_layers = kv.get_u64("n_layers", cfg.n_layers);
  cfg.n_heads = kv.get_u64("n_heads", cfg.n_heads);
  cfg.d_ff = kv.get_u64("d_ff", cfg.d_ff);
  cfg.max_seq_len = kv.get_u64("max_seq_len", cfg.max_seq_len);
  cfg.seed = kv.get_u64("model_seed", cfg.seed);
  cfg.validate();
  return cfg;
}

inline TrainConfig train_config_from(const KeyValueConfig& kv) {
  TrainConfig cfg;
  cfg.model = model_config_from(kv);
  cfg.method = kv.get_string("method", cfg.method);
  cfg.beta = kv.get_double("beta", cfg.beta);
  cfg.lambda = kv.get_double("lambda", cfg.lambda);
  cfg.learning_rate = kv.get_double("learning_rate", cfg.learning_rate);
  cfg.batch_size = kv.get_u64("batch_size", cfg.batch_size);
  cfg.total_steps = kv.get_u64("total_steps", cfg.total_steps);
  cfg.checkpoint_fractions =
      kv.get_double_list("checkpoint_fractions", cfg.checkpoint_fractions);
  cfg.seed = kv.get_u64("seed", cfg.seed);
  cfg.dataset_path = kv.get_string("dataset", cfg.dataset_path);
  cfg.eval_dataset_path = kv.get_string("eval_dataset", cfg.eval_dataset_path);
  cfg.neuron_set_path = kv.get_string("neuron_set", cfg.neuron_set_path);
  cfg.out_dir = kv.get_string("out_dir", cfg.out_dir);
  cfg.eval_limit = kv.get_u64("eval_limit", cfg.eval_limit);
  cfg.eval_max_new = kv.get_u64("eval_max_new", cfg.eval_max_new);
  cfg.run_label = kv.get_string("run_label", cfg.run_label);
  return cfg;
}

}  // namespace yfpo
