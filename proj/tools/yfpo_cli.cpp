// Command-line front end: gen-data, select-neurons, train, eval, report.
//
// Every subcommand accepts --config (key = value file) and flags override
// file values. Exit codes: 0 success, 1 on any pipeline error, 2 on usage
// errors.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "yfpo/config.hpp"
#include "yfpo/data.hpp"
#include "yfpo/relevance.hpp"
#include "yfpo/report.hpp"
#include "yfpo/train.hpp"

namespace fs = std::filesystem;

namespace {

struct GenDataArgs {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> n, seed;
  std::optional<int> difficulty;
  std::string split = "train";
};

struct SelectNeuronsArgs {
  std::string config_path;
  std::string out;
  std::optional<std::string> dataset;
  std::optional<std::uint64_t> k, samples, seed;
};

struct TrainArgs {
  std::string config_path;
  std::optional<std::string> method, dataset, eval_dataset, neuron_set, out_dir, label;
  std::optional<double> lambda, beta, lr;
  std::optional<std::uint64_t> batch_size, steps, seed;
};

struct EvalArgs {
  std::string config_path;
  std::string checkpoint;
  std::optional<std::string> dataset;
  std::optional<std::uint64_t> limit, max_new, seed;
};

struct ReportArgs {
  std::vector<std::string> runs;
  std::string baseline = "DPO";
  std::string out_dir;
  std::optional<std::uint64_t> seed;
};

yfpo::KeyValueConfig load_kv(const std::string& config_path) {
  if (config_path.empty()) return {};
  return yfpo::KeyValueConfig::from_file(config_path);
}

int run_gen_data(const GenDataArgs& args) {
  auto kv = load_kv(args.config_path);
  if (args.n) kv.set("n", std::to_string(*args.n));
  if (args.seed) kv.set("seed", std::to_string(*args.seed));
  if (args.difficulty) kv.set("difficulty", std::to_string(*args.difficulty));

  const auto split = args.split == "eval" ? yfpo::DataSplit::Eval : yfpo::DataSplit::Train;
  const auto records = yfpo::generate_preference_pairs(
      kv.get_u64("seed", 1), kv.get_u64("n", 2000),
      static_cast<int>(kv.get_u64("difficulty", 2)), split);
  yfpo::save_dataset(records, args.out);
  std::cout << "wrote " << records.size() << " " << args.split << " pairs to " << args.out
            << "\n";
  return 0;
}

int run_select_neurons(const SelectNeuronsArgs& args) {
  auto kv = load_kv(args.config_path);
  if (args.dataset) kv.set("dataset", *args.dataset);
  if (args.k) kv.set("k", std::to_string(*args.k));
  if (args.samples) kv.set("relevance_samples", std::to_string(*args.samples));
  if (args.seed) kv.set("seed", std::to_string(*args.seed));

  const yfpo::ModelConfig model_cfg = yfpo::model_config_from(kv);
  const std::string dataset_path = kv.get_string("dataset");
  if (dataset_path.empty()) throw yfpo::ConfigError("select-neurons: no dataset given");

  const yfpo::Model model(model_cfg);
  const yfpo::Tokenizer tok;
  auto records = yfpo::load_dataset(dataset_path);
  if (records.empty()) throw yfpo::EmptyCorpusError("select-neurons: dataset is empty");

  // Deterministic seed-derived subsample of the corpus.
  const std::size_t want =
      std::min<std::size_t>(records.size(), kv.get_u64("relevance_samples", 128));
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(kv.get_u64("seed", 0));
  yfpo::detail::deterministic_shuffle(order, rng);

  yfpo::RelevanceAccumulator acc(model_cfg.n_layers, model_cfg.d_ff);
  for (std::size_t i = 0; i < want; ++i) {
    const auto ex = yfpo::to_example(records[order[i]], tok);
    acc.add(yfpo::relevance_backward(model, ex.prompt, ex.chosen));
  }
  const auto table = acc.finalize(model_cfg.fingerprint());
  const auto set = yfpo::select_top_k(table, kv.get_u64("k", yfpo::kDefaultTopK));
  yfpo::save_neuron_set(set, args.out);
  std::cout << "selected top-" << set.k() << " of " << model_cfg.n_layers * model_cfg.d_ff
            << " neurons from " << want << " samples -> " << args.out << "\n";
  return 0;
}

int run_train(const TrainArgs& args) {
  auto kv = load_kv(args.config_path);
  if (args.method) kv.set("method", *args.method);
  if (args.dataset) kv.set("dataset", *args.dataset);
  if (args.eval_dataset) kv.set("eval_dataset", *args.eval_dataset);
  if (args.neuron_set) kv.set("neuron_set", *args.neuron_set);
  if (args.out_dir) kv.set("out_dir", *args.out_dir);
  if (args.label) kv.set("run_label", *args.label);
  if (args.lambda) kv.set("lambda", std::to_string(*args.lambda));
  if (args.beta) kv.set("beta", std::to_string(*args.beta));
  if (args.lr) kv.set("learning_rate", std::to_string(*args.lr));
  if (args.batch_size) kv.set("batch_size", std::to_string(*args.batch_size));
  if (args.steps) kv.set("total_steps", std::to_string(*args.steps));
  if (args.seed) kv.set("seed", std::to_string(*args.seed));

  const yfpo::TrainConfig cfg = yfpo::train_config_from(kv);
  if (cfg.dataset_path.empty()) throw yfpo::ConfigError("train: no dataset given");
  if (cfg.neuron_set_path.empty()) throw yfpo::ConfigError("train: no neuron set given");
  if (cfg.out_dir.empty()) throw yfpo::ConfigError("train: no out_dir given");

  const auto log = yfpo::train(cfg);
  std::cout << "trained " << cfg.total_steps << " steps (method=" << cfg.method
            << ", lambda=" << cfg.lambda << "), run dir " << cfg.out_dir << "\n";
  for (const auto& c : log.checkpoints) {
    std::cout << "  " << c.name << " @ step " << c.step << ": eval accuracy "
              << c.eval_accuracy << "\n";
  }
  return 0;
}

int run_eval(const EvalArgs& args) {
  auto kv = load_kv(args.config_path);
  if (args.dataset) kv.set("eval_dataset", *args.dataset);
  if (args.limit) kv.set("eval_limit", std::to_string(*args.limit));
  if (args.max_new) kv.set("eval_max_new", std::to_string(*args.max_new));

  const std::string dataset_path = kv.get_string("eval_dataset");
  if (dataset_path.empty()) throw yfpo::ConfigError("eval: no dataset given");

  const yfpo::Model model = yfpo::Model::load_checkpoint(args.checkpoint);
  const yfpo::Tokenizer tok;
  const auto eval_set =
      yfpo::build_eval_set(yfpo::load_dataset(dataset_path), tok, kv.get_u64("eval_limit", 64));
  const double acc = yfpo::evaluate(model, eval_set, tok, kv.get_u64("eval_max_new", 48));
  std::cout << "checkpoint " << args.checkpoint << " (step " << model.train_step()
            << "): accuracy " << acc << " on " << eval_set.size() << " examples\n";
  return 0;
}

int run_report(const ReportArgs& args) {
  if (args.runs.empty()) throw yfpo::ReportError("report: no run directories given");
  std::vector<yfpo::RunSummary> summaries;
  std::vector<yfpo::LabeledRunLog> logs;
  for (const auto& dir : args.runs) {
    const fs::path run_dir(dir);
    std::ifstream meta_in(run_dir / "run_meta.json");
    if (!meta_in) throw yfpo::PersistenceError("report: cannot open " +
                                               (run_dir / "run_meta.json").string());
    nlohmann::json meta;
    try {
      meta_in >> meta;
    } catch (const nlohmann::json::exception& e) {
      throw yfpo::FormatError("report: bad run_meta.json in " + dir + ": " + e.what());
    }
    const auto log = yfpo::load_runlog(run_dir / "runlog.jsonl");
    if (log.aborted) throw yfpo::ReportError("report: run " + dir + " was aborted");
    const std::string method = meta.value("method", "DPO");
    const double lambda = meta.value("lambda", 0.0);
    summaries.push_back(yfpo::summarize_run(
        meta.value("train_data", "?"), method,
        method == "DPO" ? std::nullopt : std::optional<double>(lambda), log));
    std::ostringstream label;
    if (method == "DPO") {
      label << "DPO";
    } else {
      label << "lambda=" << lambda;
    }
    logs.push_back({label.str(), log});
  }

  const auto rows = yfpo::build_result_table(summaries, args.baseline);
  const std::string text = yfpo::format_result_table(rows);
  fs::create_directories(args.out_dir);
  {
    std::ofstream out(fs::path(args.out_dir) / "table.txt", std::ios::trunc);
    out << text;
  }
  {
    std::ofstream out(fs::path(args.out_dir) / "table.csv", std::ios::trunc);
    out << yfpo::result_table_csv(rows);
  }
  yfpo::plot_dynamics(logs, args.out_dir);
  std::cout << text;
  std::cout << "report written to " << args.out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neuron-guided preference optimization on a toy transformer"};
  app.require_subcommand(1);

  GenDataArgs gen_args;
  auto* gen = app.add_subcommand("gen-data", "Generate an arithmetic preference dataset");
  gen->add_option("--config", gen_args.config_path, "Key-value config file");
  gen->add_option("--out", gen_args.out, "Output dataset path (.jsonl)")->required();
  gen->add_option("--n", gen_args.n, "Number of preference pairs");
  gen->add_option("--seed", gen_args.seed, "Generator seed");
  gen->add_option("--difficulty", gen_args.difficulty, "Operand magnitude in digits");
  gen->add_option("--split", gen_args.split, "Problem-space split: train or eval")
      ->check(CLI::IsMember({"train", "eval"}));

  SelectNeuronsArgs sel_args;
  auto* sel = app.add_subcommand("select-neurons",
                                 "Relevance-propagate over a corpus and pick the top-K neurons");
  sel->add_option("--config", sel_args.config_path, "Key-value config file");
  sel->add_option("--dataset", sel_args.dataset, "Corpus of (prompt, chosen) samples");
  sel->add_option("--k", sel_args.k, "Neuron set size");
  sel->add_option("--samples", sel_args.samples, "Corpus samples to propagate");
  sel->add_option("--seed", sel_args.seed, "Subsampling seed");
  sel->add_option("--out", sel_args.out, "Output neuron set path")->required();

  TrainArgs train_args;
  auto* tr = app.add_subcommand("train", "Train with the combined preference objective");
  tr->add_option("--config", train_args.config_path, "Key-value config file");
  tr->add_option("--method", train_args.method, "yfpo or dpo")
      ->check(CLI::IsMember({"yfpo", "dpo"}));
  tr->add_option("--lambda", train_args.lambda, "Neuron reward weight (>= 0)");
  tr->add_option("--beta", train_args.beta, "Preference temperature (> 0)");
  tr->add_option("--lr", train_args.lr, "Learning rate");
  tr->add_option("--batch-size", train_args.batch_size, "Examples per step");
  tr->add_option("--steps", train_args.steps, "Total optimizer steps");
  tr->add_option("--seed", train_args.seed, "Batch-shuffling seed");
  tr->add_option("--dataset", train_args.dataset, "Training dataset (.jsonl)");
  tr->add_option("--eval-dataset", train_args.eval_dataset, "Eval dataset (.jsonl)");
  tr->add_option("--neuron-set", train_args.neuron_set, "Neuron set file");
  tr->add_option("--out-dir", train_args.out_dir, "Run output directory");
  tr->add_option("--label", train_args.label, "Train-data label used in reports");

  EvalArgs eval_args;
  auto* ev = app.add_subcommand("eval", "Greedy-decode a checkpoint and score exact-match");
  ev->add_option("--config", eval_args.config_path, "Key-value config file");
  ev->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint path")->required();
  ev->add_option("--dataset", eval_args.dataset, "Eval dataset (.jsonl)");
  ev->add_option("--limit", eval_args.limit, "Max eval examples");
  ev->add_option("--max-new", eval_args.max_new, "Decode budget per prompt");
  ev->add_option("--seed", eval_args.seed, "Unused; evaluation is deterministic");

  ReportArgs report_args;
  auto* rep = app.add_subcommand("report", "Summarize runs: table + dynamics plots");
  rep->add_option("--run", report_args.runs, "Run directory (repeatable)")->required();
  rep->add_option("--baseline", report_args.baseline, "Baseline method label");
  rep->add_option("--out-dir", report_args.out_dir, "Report output directory")->required();
  rep->add_option("--seed", report_args.seed, "Unused; reporting is deterministic");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return run_gen_data(gen_args);
    if (sel->parsed()) return run_select_neurons(sel_args);
    if (tr->parsed()) return run_train(train_args);
    if (ev->parsed()) return run_eval(eval_args);
    if (rep->parsed()) return run_report(report_args);
  } catch (const yfpo::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
