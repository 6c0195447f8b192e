#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rvgtree/dataio.hpp"
#include "rvgtree/model.hpp"
#include "rvgtree/model_checks.hpp"
#include "rvgtree/training.hpp"
#include "rvgtree/viz.hpp"

namespace rvg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

// Everything a run can be configured with. Flat key=value text file; CLI
// flags override file values, file values override built-in defaults.
struct AppConfig {
  TrainConfig train;
  int embed_dim = 64;
  int hidden_dim = 64;
  GenConfig gen;
  int min_freq = 5;
  std::string word_vectors;  // optional warm-start file

  std::map<std::string, std::string> as_map() const {
    std::map<std::string, std::string> kv;
    kv["learning_rate"] = format_double(train.learning_rate);
    kv["adam_beta1"] = format_double(train.adam_beta1);
    kv["adam_beta2"] = format_double(train.adam_beta2);
    kv["adam_eps"] = format_double(train.adam_eps);
    kv["batch_size"] = std::to_string(train.batch_size);
    kv["tau"] = format_double(train.tau);
    kv["noise"] = train.noise ? "1" : "0";
    kv["max_sentence_length"] = std::to_string(train.max_sentence_length);
    kv["pad_to_max"] = train.pad_to_max ? "1" : "0";
    kv["seed"] = std::to_string(train.seed);
    kv["variant"] = variant_name(train.variant);
    kv["pretrain_epochs"] = std::to_string(train.pretrain_epochs);
    kv["finetune_epochs"] = std::to_string(train.finetune_epochs);
    kv["tree_loss_weight"] = format_double(train.tree_loss_weight);
    kv["embed_dim"] = std::to_string(embed_dim);
    kv["hidden_dim"] = std::to_string(hidden_dim);
    kv["feature_dim"] = std::to_string(gen.feature_dim);
    kv["n_scenes"] = std::to_string(gen.n_scenes);
    kv["objects_per_scene"] = std::to_string(gen.objects_per_scene);
    kv["grid"] = std::to_string(gen.grid);
    kv["noise_sigma"] = format_double(gen.noise_sigma);
    kv["frac_train"] = format_double(gen.frac_train);
    kv["frac_val"] = format_double(gen.frac_val);
    kv["frac_test"] = format_double(gen.frac_test);
    kv["emit_boxes"] = gen.emit_boxes ? "1" : "0";
    kv["min_freq"] = std::to_string(min_freq);
    kv["word_vectors"] = word_vectors;
    return kv;
  }

  void set(const std::string& key, const std::string& value) {
    try {
      if (key == "learning_rate") train.learning_rate = std::stod(value);
      else if (key == "adam_beta1") train.adam_beta1 = std::stod(value);
      else if (key == "adam_beta2") train.adam_beta2 = std::stod(value);
      else if (key == "adam_eps") train.adam_eps = std::stod(value);
      else if (key == "batch_size") train.batch_size = std::stoi(value);
      else if (key == "tau") train.tau = std::stod(value);
      else if (key == "noise") train.noise = std::stoi(value) != 0;
      else if (key == "max_sentence_length") train.max_sentence_length = std::stoi(value);
      else if (key == "pad_to_max") train.pad_to_max = std::stoi(value) != 0;
      else if (key == "seed") train.seed = std::stoull(value);
      else if (key == "variant") train.variant = parse_variant(value);
      else if (key == "pretrain_epochs") train.pretrain_epochs = std::stoi(value);
      else if (key == "finetune_epochs") train.finetune_epochs = std::stoi(value);
      else if (key == "tree_loss_weight") train.tree_loss_weight = std::stod(value);
      else if (key == "embed_dim") embed_dim = std::stoi(value);
      else if (key == "hidden_dim") hidden_dim = std::stoi(value);
      else if (key == "feature_dim") gen.feature_dim = std::stoi(value);
      else if (key == "n_scenes") gen.n_scenes = std::stoi(value);
      else if (key == "objects_per_scene") gen.objects_per_scene = std::stoi(value);
      else if (key == "grid") gen.grid = std::stoi(value);
      else if (key == "noise_sigma") gen.noise_sigma = std::stod(value);
      else if (key == "frac_train") gen.frac_train = std::stod(value);
      else if (key == "frac_val") gen.frac_val = std::stod(value);
      else if (key == "frac_test") gen.frac_test = std::stod(value);
      else if (key == "emit_boxes") gen.emit_boxes = std::stoi(value) != 0;
      else if (key == "min_freq") min_freq = std::stoi(value);
      else if (key == "word_vectors") word_vectors = value;
      else throw DataError("unknown config key: " + key);
    } catch (const DataError&) {
      throw;
    } catch (const std::exception&) {
      throw DataError("bad value for config key '" + key + "': " + value);
    }
  }
};

inline AppConfig load_config_file(const std::string& path, AppConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      if (!split_ws(line).empty())
        throw DataError(path + ":" + std::to_string(lineno) + ": expected key = value");
      continue;
    }
    auto trim = [](std::string s) {
      auto b = s.find_first_not_of(" \t");
      auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw DataError(path + ":" + std::to_string(lineno) + ": empty key");
    try {
      base.set(key, value);
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

// CLI-level overrides; only fields the user actually passed are set.
struct CliOverrides {
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<double> tau;
  bool no_noise = false;
  std::optional<std::string> variant;
};

inline AppConfig resolve_config(const CliOverrides& cli) {
  AppConfig cfg;
  if (cli.config_path) cfg = load_config_file(*cli.config_path, cfg);
  if (cli.seed) {
    cfg.train.seed = *cli.seed;
    cfg.gen.seed = *cli.seed;
  }
  if (cli.tau) cfg.train.tau = *cli.tau;
  if (cli.no_noise) cfg.train.noise = false;
  if (cli.variant) cfg.train.variant = parse_variant(*cli.variant);
  return cfg;
}

// ---------------------------------------------------------------------------
// Run manifests and atomic writes
// ---------------------------------------------------------------------------

inline void write_text_atomic(const std::string& path, const std::string& content) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write: " + tmp);
    out << content;
    if (!out) throw DataError("failed writing: " + tmp);
  }
  fs::rename(tmp, path);
}

inline void write_run_manifest(const std::string& out_dir, const std::string& command,
                               const AppConfig& cfg,
                               const std::vector<std::string>& input_paths,
                               const std::vector<std::string>& output_paths) {
  nlohmann::json j;
  j["command"] = command;
  j["seed"] = cfg.train.seed;
  j["config"] = cfg.as_map();
  nlohmann::json inputs = nlohmann::json::object();
  for (const std::string& p : input_paths)
    inputs[p] = fs::exists(p) && fs::is_regular_file(p) ? to_hex(hash_file(p)) : "missing";
  j["inputs"] = inputs;
  j["outputs"] = output_paths;
  write_text_atomic(out_dir + "/run_manifest.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Model/dataset glue
// ---------------------------------------------------------------------------

struct LoadedData {
  SplitData train, val, test;
  Vocabulary vocab;
  int feature_dim = 0;
};

inline LoadedData load_dataset(const std::string& dir) {
  LoadedData data;
  data.train = load_split(dir, "train");
  data.val = load_split(dir, "val");
  data.test = load_split(dir, "test");
  data.vocab = Vocabulary::load(dir + "/vocab.txt");
  if (!data.train.scenes.empty()) data.feature_dim = data.train.scenes[0].feature_dim;
  else if (!data.test.scenes.empty()) data.feature_dim = data.test.scenes[0].feature_dim;
  for (const SplitData* s : {&data.train, &data.val, &data.test})
    for (const Scene& scene : s->scenes)
      if (scene.feature_dim != data.feature_dim)
        throw DataError(dir + ": inconsistent feature widths across scenes");
  return data;
}

inline void save_model_meta(const std::string& out_dir, const Model& model,
                            const Vocabulary& vocab, const AppConfig& cfg) {
  nlohmann::json j;
  j["format"] = "rvg-model v1";
  j["embed_dim"] = model.config().embed_dim;
  j["hidden_dim"] = model.config().hidden_dim;
  j["feature_dim"] = model.config().feature_dim;
  j["vocab_size"] = model.config().vocab_size;
  j["vocab_checksum"] = to_hex(vocab.checksum());
  j["variant"] = variant_name(model.config().variant);
  j["tau"] = cfg.train.tau;
  write_text_atomic(out_dir + "/model.json", j.dump(2) + "\n");
}

inline ModelConfig load_model_meta(const std::string& dir, const Vocabulary& vocab,
                                   int dataset_feature_dim) {
  std::ifstream in(dir + "/model.json");
  if (!in) throw DataError("cannot open model metadata: " + dir + "/model.json");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw DataError(dir + "/model.json: " + e.what());
  }
  if (j.value("format", "") != "rvg-model v1")
    throw DataError(dir + "/model.json: unknown format");
  ModelConfig mc;
  mc.embed_dim = j.at("embed_dim").get<int>();
  mc.hidden_dim = j.at("hidden_dim").get<int>();
  mc.feature_dim = j.at("feature_dim").get<int>();
  mc.vocab_size = j.at("vocab_size").get<int>();
  mc.variant = parse_variant(j.at("variant").get<std::string>());
  if (mc.vocab_size != vocab.size())
    throw DataError("checkpoint vocabulary size does not match dataset vocabulary");
  if (j.at("vocab_checksum").get<std::string>() != to_hex(vocab.checksum()))
    throw DataError("checkpoint vocabulary checksum does not match dataset");
  if (mc.feature_dim != dataset_feature_dim)
    throw DataError("checkpoint feature width " + std::to_string(mc.feature_dim) +
                    " does not match dataset width " +
                    std::to_string(dataset_feature_dim));
  return mc;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline int cmd_gen(const AppConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  GeneratedCorpus corpus = generate_corpus(cfg.gen);
  save_split(out_dir, "train", corpus.train);
  save_split(out_dir, "val", corpus.val);
  save_split(out_dir, "test", corpus.test);
  Vocabulary vocab = Vocabulary::build(pruned_corpus(corpus.train), cfg.min_freq);
  vocab.save(out_dir + "/vocab.txt");

  nlohmann::json j;
  j["format"] = "rvg-dataset v1";
  j["seed"] = cfg.gen.seed;
  j["feature_dim"] = cfg.gen.feature_dim;
  j["vocab_checksum"] = to_hex(vocab.checksum());
  j["counts"] = {
      {"train", {{"scenes", corpus.train.scenes.size()},
                 {"expressions", corpus.train.expressions.size()}}},
      {"val", {{"scenes", corpus.val.scenes.size()},
               {"expressions", corpus.val.expressions.size()}}},
      {"test", {{"scenes", corpus.test.scenes.size()},
                {"expressions", corpus.test.expressions.size()}}}};
  j["grammar"] = {{"categories", corpus.grammar.categories},
                  {"colors", corpus.grammar.colors},
                  {"sizes", corpus.grammar.sizes},
                  {"relations", {"left", "right", "above", "below"}}};
  write_text_atomic(out_dir + "/manifest.json", j.dump(2) + "\n");
  write_run_manifest(out_dir, "gen", cfg, {},
                     {out_dir + "/train.scenes", out_dir + "/manifest.json"});
  std::cout << "generated " << corpus.train.scenes.size() << " train / "
            << corpus.val.scenes.size() << " val / " << corpus.test.scenes.size()
            << " test scenes into " << out_dir << "\n";
  return 0;
}

struct TrainCommandPaths {
  std::string data_dir;
  std::string out_dir;
  std::string init_checkpoint_dir;  // optional
};

namespace detail {

inline Model build_model(const AppConfig& cfg, const Vocabulary& vocab,
                         int feature_dim) {
  ModelConfig mc;
  mc.vocab_size = vocab.size();
  mc.embed_dim = cfg.embed_dim;
  mc.hidden_dim = cfg.hidden_dim;
  mc.feature_dim = feature_dim;
  mc.variant = cfg.train.variant;
  Model model(mc, cfg.train.seed);
  if (!cfg.word_vectors.empty()) {
    load_word_vectors(cfg.word_vectors, model.embeddings(), mc.embed_dim,
                      [&](const std::string& tok) { return vocab.exact_id(tok); });
  }
  return model;
}

inline void require_expert_trees(const SplitData& split, const std::string& dir,
                                 const std::string& name) {
  if (split.expert_trees.empty())
    throw DataError("no expert trees: expected file " + dir + "/" + name + ".trees");
}

}  // namespace detail

inline int cmd_train(const std::string& command, const AppConfig& cfg,
                     const TrainCommandPaths& paths) {
  cfg.train.validate();
  fs::create_directories(paths.out_dir);
  LoadedData data = load_dataset(paths.data_dir);
  Model model = detail::build_model(cfg, data.vocab, data.feature_dim);
  if (!paths.init_checkpoint_dir.empty())
    model.store().load(paths.init_checkpoint_dir + "/checkpoint.txt");

  std::vector<TrainingExample> train_examples = prepare_examples(
      data.train, data.vocab, cfg.train.max_sentence_length, cfg.train.pad_to_max);

  bool is_pretrain = command == "pretrain";
  bool needs_experts = is_pretrain || cfg.train.variant == Variant::Fix;
  if (needs_experts) {
    detail::require_expert_trees(data.train, paths.data_dir, "train");
    validate_split_expert_trees(data.train, train_examples);
  }

  std::ofstream log(paths.out_dir + "/train.log");
  if (!log) throw DataError("cannot write training log");
  TrainLogger logger;
  logger.out = &log;

  TrainConfig tc = cfg.train;
  if (is_pretrain) {
    tc.finetune_epochs = 0;
  } else {
    tc.pretrain_epochs = 0;
  }
  run_training(model, std::move(train_examples),
               needs_experts ? &data.train.expert_trees : nullptr, tc, logger);

  model.store().save(paths.out_dir + "/checkpoint.txt");
  save_model_meta(paths.out_dir, model, data.vocab, cfg);
  write_run_manifest(paths.out_dir, command, cfg,
                     {paths.data_dir + "/manifest.json"},
                     {paths.out_dir + "/checkpoint.txt", paths.out_dir + "/train.log"});
  std::cout << command << " done: " << paths.out_dir << "/checkpoint.txt\n";
  return 0;
}

inline int cmd_eval(const AppConfig& cfg, const std::string& checkpoint_dir,
                    const std::string& data_dir, const std::string& split_name,
                    const std::string& out_dir, bool dump_predictions) {
  fs::create_directories(out_dir);
  LoadedData data = load_dataset(data_dir);
  const SplitData& split = split_name == "train" ? data.train
                           : split_name == "val" ? data.val
                                                 : data.test;
  ModelConfig mc = load_model_meta(checkpoint_dir, data.vocab, data.feature_dim);
  AppConfig run_cfg = cfg;
  run_cfg.train.variant = mc.variant;
  Model model(mc, /*init_seed=*/0);
  model.store().load(checkpoint_dir + "/checkpoint.txt");

  std::vector<TrainingExample> examples = prepare_examples(
      split, data.vocab, run_cfg.train.max_sentence_length, run_cfg.train.pad_to_max);
  const ExpertTreeMap* experts = nullptr;
  if (mc.variant == Variant::Fix) {
    detail::require_expert_trees(split, data_dir, split_name);
    validate_split_expert_trees(split, examples);
    experts = &split.expert_trees;
  }
  EvalResult result = evaluate(model, examples, run_cfg.train.tau, experts);

  std::ostringstream report;
  report << "split " << split_name << "\n"
         << "examples " << result.total << "\n"
         << "correct " << result.correct << "\n"
         << "metric " << (result.iou_based ? "iou@0.5" : "gt-index") << "\n"
         << "top1_accuracy " << format_double(result.accuracy) << "\n";
  write_text_atomic(out_dir + "/eval.txt", report.str());
  std::cout << report.str();
  if (dump_predictions) {
    std::ostringstream preds;
    preds << "expression_id\tprediction\tgt\n";
    for (std::size_t i = 0; i < examples.size(); ++i)
      preds << examples[i].id << "\t" << result.predictions[i] << "\t"
            << examples[i].gt << "\n";
    write_text_atomic(out_dir + "/predictions.tsv", preds.str());
  }
  write_run_manifest(out_dir, "eval", run_cfg,
                     {checkpoint_dir + "/checkpoint.txt"}, {out_dir + "/eval.txt"});
  return 0;
}

// Trains each requested variant from scratch on the same data and reports
// held-out accuracy, one row per variant.
inline int cmd_ablate(const AppConfig& cfg, const std::string& data_dir,
                      const std::string& out_dir,
                      const std::vector<std::string>& variant_names) {
  fs::create_directories(out_dir);
  LoadedData data = load_dataset(data_dir);

  std::ostringstream table;
  table << "variant\ttop1_accuracy\n";
  for (const std::string& vname : variant_names) {
    AppConfig vcfg = cfg;
    vcfg.train.variant = parse_variant(vname);
    Model model = detail::build_model(vcfg, data.vocab, data.feature_dim);
    std::vector<TrainingExample> train_examples = prepare_examples(
        data.train, data.vocab, vcfg.train.max_sentence_length, vcfg.train.pad_to_max);
    bool needs_experts = vcfg.train.variant != Variant::Scratch &&
                         vcfg.train.variant != Variant::Chain;
    if (needs_experts) {
      detail::require_expert_trees(data.train, data_dir, "train");
      validate_split_expert_trees(data.train, train_examples);
    }
    std::ofstream log(out_dir + "/train_" + vname + ".log");
    TrainLogger logger;
    logger.out = &log;
    run_training(model, std::move(train_examples),
                 needs_experts ? &data.train.expert_trees : nullptr, vcfg.train,
                 logger);

    std::vector<TrainingExample> test_examples = prepare_examples(
        data.test, data.vocab, vcfg.train.max_sentence_length, vcfg.train.pad_to_max);
    const ExpertTreeMap* experts = nullptr;
    if (vcfg.train.variant == Variant::Fix) {
      detail::require_expert_trees(data.test, data_dir, "test");
      experts = &data.test.expert_trees;
    }
    EvalResult r = evaluate(model, test_examples, vcfg.train.tau, experts);
    table << vname << "\t" << format_double(r.accuracy) << "\n";
    std::cout << vname << "\t" << format_double(r.accuracy) << "\n";
  }
  write_text_atomic(out_dir + "/ablate.tsv", table.str());
  write_run_manifest(out_dir, "ablate", cfg, {data_dir + "/manifest.json"},
                     {out_dir + "/ablate.tsv"});
  return 0;
}

inline int cmd_gradcheck(const AppConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ostringstream report;
  GradCheckReport prim = check_primitive_gradients(cfg.train.seed, 1e-5, 1e-4);
  report << "primitive ops (tol 1e-4):\n" << prim.summary();
  ModelCheckConfig mcc;
  mcc.seed = cfg.train.seed;
  mcc.embed_dim = std::min(cfg.embed_dim, 8);
  mcc.hidden_dim = std::min(cfg.hidden_dim, 8);
  GradCheckReport full = check_model_gradients(mcc);
  report << "full model (tol 1e-3): max_rel_err=" << format_double(full.max_rel_err)
         << (full.ok() ? "" : " FLAGGED") << "\n";
  write_text_atomic(out_dir + "/gradcheck.txt", report.str());
  std::cout << report.str();
  if (!prim.ok() || !full.ok())
    throw NumericError("gradient check failed; see " + out_dir + "/gradcheck.txt");
  return 0;
}

inline int cmd_viz(const AppConfig& cfg, const std::string& checkpoint_dir,
                   const std::string& data_dir, const std::string& split_name,
                   const std::string& expr_id, const std::string& out_dir) {
  fs::create_directories(out_dir);
  LoadedData data = load_dataset(data_dir);
  const SplitData& split = split_name == "train" ? data.train
                           : split_name == "val" ? data.val
                                                 : data.test;
  ModelConfig mc = load_model_meta(checkpoint_dir, data.vocab, data.feature_dim);
  if (mc.variant == Variant::Chain)
    throw DataError("viz: the Chain variant has no tree to visualize");
  Model model(mc, 0);
  model.store().load(checkpoint_dir + "/checkpoint.txt");

  std::vector<TrainingExample> examples = prepare_examples(
      split, data.vocab, cfg.train.max_sentence_length, cfg.train.pad_to_max);
  if (examples.empty()) throw DataError("viz: split is empty");

  GumbelSampler sampler(cfg.train.tau, false, 0);
  RoleFrequency freq;
  std::string dot_payload;
  std::string chosen = expr_id.empty() ? examples[0].id : expr_id;
  bool found = false;
  for (const TrainingExample& ex : examples) {
    Tape tape;
    Model::ForwardOptions opts;
    opts.tree_mode = TreeMode::Eval;
    opts.role_mode = RoleMode::Argmax;
    if (mc.variant == Variant::Fix) {
      auto it = split.expert_trees.find(ex.id);
      if (it == split.expert_trees.end())
        throw DataError("viz: missing expert tree for " + ex.id);
      opts.tree_mode = TreeMode::Expert;
      opts.expert = &it->second;
    }
    auto fwd = model.forward(tape, ex.tokens, ex.regions, opts, sampler);
    freq.accumulate(fwd.tree, fwd.trace, ex.tokens.tokens);
    if (ex.id == chosen) {
      dot_payload = tree_to_dot(fwd.tree, fwd.trace, ex.tokens.tokens);
      found = true;
    }
  }
  if (!found) throw DataError("viz: expression id not found: " + chosen);

  parse_dot(dot_payload);  // round-trip validation before writing
  write_text_atomic(out_dir + "/tree_" + chosen + ".dot", dot_payload);
  write_text_atomic(out_dir + "/role_frequency.tsv", freq.to_tsv());
  write_run_manifest(out_dir, "viz", cfg, {checkpoint_dir + "/checkpoint.txt"},
                     {out_dir + "/tree_" + chosen + ".dot",
                      out_dir + "/role_frequency.tsv"});
  std::cout << "wrote " << out_dir << "/tree_" << chosen << ".dot and role_frequency.tsv\n";
  return 0;
}

}  // namespace rvg
