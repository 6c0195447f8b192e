#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rvgtree/commands.hpp"

namespace {

struct GlobalFlags {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  double tau = 0.0;
  bool tau_set = false;
  bool no_noise = false;
  std::string variant;
  std::string out_dir = "out";
};

void add_common(CLI::App* app, GlobalFlags& g) {
  app->add_option("--config", g.config_path, "key = value config file");
  app->add_option("--seed", g.seed, "random seed")->each([&](const std::string&) {
    g.seed_set = true;
  });
  app->add_option("--tau", g.tau, "Gumbel-Softmax temperature")
      ->each([&](const std::string&) { g.tau_set = true; });
  app->add_flag("--no-noise", g.no_noise, "disable Gumbel noise");
  app->add_option("--variant", g.variant,
                  "model variant: Full|Chain|Fix|Scratch|NoNode|NoS|NoF");
  app->add_option("--out", g.out_dir, "output directory");
}

rvg::AppConfig resolve(const GlobalFlags& g) {
  rvg::CliOverrides cli;
  if (!g.config_path.empty()) cli.config_path = g.config_path;
  if (g.seed_set) cli.seed = g.seed;
  if (g.tau_set) cli.tau = g.tau;
  cli.no_noise = g.no_noise;
  if (!g.variant.empty()) cli.variant = g.variant;
  return rvg::resolve_config(cli);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rvg: latent-tree visual grounding at desk scale"};
  app.require_subcommand(1);

  GlobalFlags gen_flags, pre_flags, fine_flags, eval_flags, ablate_flags,
      grad_flags, viz_flags;
  std::string data_dir, checkpoint_dir, init_dir, split_name = "test", expr_id,
                                                  variants_csv;
  bool dump_predictions = false;

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic grounding corpus");
  add_common(gen, gen_flags);

  CLI::App* pre = app.add_subcommand("pretrain", "supervised pretraining on expert trees");
  add_common(pre, pre_flags);
  pre->add_option("--data", data_dir, "dataset directory")->required();
  pre->add_option("--init", init_dir, "checkpoint directory to start from");

  CLI::App* fine = app.add_subcommand("finetune", "straight-through fine-tuning");
  add_common(fine, fine_flags);
  fine->add_option("--data", data_dir, "dataset directory")->required();
  fine->add_option("--init", init_dir, "checkpoint directory to start from");

  CLI::App* eval = app.add_subcommand("eval", "top-1 accuracy of a checkpoint");
  add_common(eval, eval_flags);
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")->required();
  eval->add_option("--split", split_name, "train|val|test (default test)");
  eval->add_flag("--dump-predictions", dump_predictions, "write predictions.tsv");

  CLI::App* ablate = app.add_subcommand("ablate", "train and score model variants");
  add_common(ablate, ablate_flags);
  ablate->add_option("--data", data_dir, "dataset directory")->required();
  ablate->add_option("--variants", variants_csv,
                     "comma-separated variant list (default all)");

  CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_common(grad, grad_flags);

  CLI::App* viz = app.add_subcommand("viz", "DOT tree export and role frequencies");
  add_common(viz, viz_flags);
  viz->add_option("--data", data_dir, "dataset directory")->required();
  viz->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")->required();
  viz->add_option("--split", split_name, "train|val|test (default test)");
  viz->add_option("--expr-id", expr_id, "expression to render (default: first)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      return rvg::cmd_gen(resolve(gen_flags), gen_flags.out_dir);
    }
    if (pre->parsed()) {
      rvg::TrainCommandPaths paths{data_dir, pre_flags.out_dir, init_dir};
      return rvg::cmd_train("pretrain", resolve(pre_flags), paths);
    }
    if (fine->parsed()) {
      rvg::TrainCommandPaths paths{data_dir, fine_flags.out_dir, init_dir};
      return rvg::cmd_train("finetune", resolve(fine_flags), paths);
    }
    if (eval->parsed()) {
      return rvg::cmd_eval(resolve(eval_flags), checkpoint_dir, data_dir, split_name,
                           eval_flags.out_dir, dump_predictions);
    }
    if (ablate->parsed()) {
      std::vector<std::string> variants;
      if (variants_csv.empty()) {
        variants = {"Full", "Chain", "Fix", "Scratch", "NoNode", "NoS", "NoF"};
      } else {
        std::string cur;
        for (char c : variants_csv + ",") {
          if (c == ',') {
            if (!cur.empty()) variants.push_back(cur);
            cur.clear();
          } else {
            cur.push_back(c);
          }
        }
      }
      return rvg::cmd_ablate(resolve(ablate_flags), data_dir, ablate_flags.out_dir,
                             variants);
    }
    if (grad->parsed()) {
      return rvg::cmd_gradcheck(resolve(grad_flags), grad_flags.out_dir);
    }
    if (viz->parsed()) {
      return rvg::cmd_viz(resolve(viz_flags), checkpoint_dir, data_dir, split_name,
                          expr_id, viz_flags.out_dir);
    }
  } catch (const rvg::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const rvg::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
