#include "steerlab/cli/app.hpp"

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "steerlab/cli/pipeline.hpp"
#include "steerlab/error.hpp"

namespace steerlab::cli {

namespace {

using json = nlohmann::json;

void add_model_config(CLI::App* sub, tinylmm::ModelConfig& c) {
  sub->add_option("--vocab-size", c.vocab_size, "vocabulary size")->capture_default_str();
  sub->add_option("--d-model", c.d_model, "residual width")->capture_default_str();
  sub->add_option("--layers", c.n_layers, "number of blocks")->capture_default_str();
  sub->add_option("--heads", c.n_heads, "attention heads")->capture_default_str();
  sub->add_option("--d-ff", c.d_ff, "MLP hidden width")->capture_default_str();
  sub->add_option("--max-seq", c.max_seq, "context length including image tokens")->capture_default_str();
  sub->add_option("--image-tokens", c.n_image_tokens, "image tokens per input")->capture_default_str();
  sub->add_option("--model-seed", c.seed, "initialization seed")->capture_default_str();
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"steerlab: activation steering for a toy multimodal transformer"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML/INI file with option values (sections per subcommand)");
  std::uint64_t seed = 1;
  int workers = 1;
  bool verbose = false;
  app.add_option("--seed", seed, "global seed")->capture_default_str();
  app.add_option("--workers", workers, "worker threads for generation")->capture_default_str();
  app.add_flag("-v,--verbose", verbose, "progress on stderr");

  InitModelCommand init;
  auto* init_cmd = app.add_subcommand("init-model", "write a freshly initialized model");
  add_model_config(init_cmd, init.config);
  init_cmd->add_option("-o,--out", init.out, "model file")->required();

  GenDataCommand gen;
  std::string spec_file;
  auto* gen_cmd = app.add_subcommand("gen-data", "write the synthetic counterfactual corpus");
  gen_cmd->add_option("-o,--out", gen.out_dir, "output directory")->required();
  gen_cmd->add_option("--spec", spec_file, "JSON corpus spec (defaults otherwise)");
  gen_cmd->add_option("--train-sets", gen.spec.train_sets)->capture_default_str();
  gen_cmd->add_option("--probe-sets", gen.spec.probe_sets)->capture_default_str();
  gen_cmd->add_option("--eval-sets", gen.spec.eval_sets)->capture_default_str();
  gen_cmd->add_option("--data-seed", gen.spec.seed)->capture_default_str();

  TrainCommand train;
  std::string train_init;
  auto* train_cmd = app.add_subcommand("train", "train a toy model on a corpus directory");
  train_cmd->add_option("--corpus", train.corpus_dir, "corpus directory")->required();
  train_cmd->add_option("--init", train_init, "start from this model instead of a fresh one");
  add_model_config(train_cmd, train.config);
  train_cmd->add_option("--steps", train.steps)->capture_default_str();
  train_cmd->add_option("--lr", train.learning_rate, "SGD learning rate")->capture_default_str();
  train_cmd->add_option("--batch", train.batch_size)->capture_default_str();
  train_cmd->add_option("--clip", train.clip_norm, "global gradient-norm clip (<= 0 disables)")->capture_default_str();
  train_cmd->add_option("-o,--out", train.out, "trained model file")->required();
  train_cmd->add_option("--loss-csv", train.loss_csv, "loss curve (default <out>.loss.csv)");

  DirectionCommand dir;
  std::string method = "dataset";
  std::string perturb = steering::to_string(steering::kDefaultPerturbMode);
  int dir_layer = -1;
  std::string dir_position, dir_prompts;
  double eps_override = 0.0;
  auto* dir_cmd = app.add_subcommand("direction", "estimate and select a steering direction");
  dir_cmd->add_option("--method", method, "dataset | gradient")
      ->check(CLI::IsMember({"dataset", "gradient"}))
      ->capture_default_str();
  dir_cmd->add_option("--attribute", dir.attribute)->capture_default_str();
  dir_cmd->add_option("--model", dir.model)->required();
  dir_cmd->add_option("--corpus", dir.corpus_dir)->required();
  dir_cmd->add_option("--prompts", dir_prompts, "prompt file (five lines)");
  dir_cmd->add_option("-o,--out", dir.out, "direction file")->required();
  dir_cmd->add_option("--candidates", dir.candidates, "grid size")->capture_default_str();
  dir_cmd->add_option("--layer", dir_layer, "fix the capture layer (skips the grid)");
  dir_cmd->add_option("--position", dir_position, "final | mean | final-k");
  dir_cmd->add_option("--epsilon-multiplier", dir.epsilon_multiplier)->capture_default_str();
  auto* eps_opt = dir_cmd->add_option("--epsilon", eps_override, "fixed FGSM step size");
  dir_cmd->add_option("--perturb-mode", perturb, "descent | paper_plus")
      ->check(CLI::IsMember({"descent", "paper_plus"}))
      ->capture_default_str();
  dir_cmd->add_option("--selection-seeds", dir.selection_seeds)->capture_default_str();
  dir_cmd->add_option("--temperature", dir.temperature)->capture_default_str();
  dir_cmd->add_option("--max-new-tokens", dir.max_new_tokens)->capture_default_str();
  dir_cmd->add_option("--max-perplexity-increase", dir.max_perplexity_increase)->capture_default_str();
  dir_cmd->add_option("--max-occupation-drop", dir.max_occupation_drop)->capture_default_str();

  GenerateCommand genr;
  std::string gen_direction, gen_prompts;
  std::size_t max_images = 0;
  auto* genr_cmd = app.add_subcommand("generate", "generate responses for every image of a split");
  genr_cmd->add_option("--model", genr.model)->required();
  genr_cmd->add_option("--corpus", genr.corpus_dir)->required();
  genr_cmd->add_option("--prompts", gen_prompts, "prompt file (five lines)");
  genr_cmd->add_option("--direction", gen_direction, "steer with this direction file");
  genr_cmd->add_option("--split", genr.split)->capture_default_str();
  genr_cmd->add_flag("--include-attribute-free", genr.include_attribute_free);
  genr_cmd->add_option("--seeds", genr.seeds, "responses per (image, prompt)")->capture_default_str();
  genr_cmd->add_option("--temperature", genr.temperature)->capture_default_str();
  genr_cmd->add_flag("--greedy", genr.greedy);
  genr_cmd->add_option("--max-new-tokens", genr.max_new_tokens)->capture_default_str();
  genr_cmd->add_option("--max-images", max_images, "limit the number of images (0 = all)");
  genr_cmd->add_option("-o,--out", genr.out, "generations JSONL")->required();

  EvaluateCommand eval;
  std::vector<std::string> eval_inputs;
  auto* eval_cmd = app.add_subcommand("evaluate", "mention, sentiment and occupation report");
  eval_cmd->add_option("--generations", eval_inputs, "generations JSONL files")->required();
  eval_cmd->add_option("--corpus", eval.corpus_dir, "corpus directory (lexicons)")->required();
  eval_cmd->add_option("-o,--out", eval.out_dir, "report directory")->required();

  LossbenchCommand bench;
  auto* bench_cmd = app.add_subcommand("lossbench", "finite-difference check of the logit losses");
  bench_cmd->add_option("--vocab", bench.vocab_sizes)->capture_default_str();
  bench_cmd->add_option("--targets", bench.target_counts)->capture_default_str();
  bench_cmd->add_option("--trials", bench.trials)->capture_default_str();
  bench_cmd->add_option("--logit-scale", bench.logit_scale)->capture_default_str();
  bench_cmd->add_flag("--naive-softmax", bench.naive_softmax, "skip max subtraction");
  bench_cmd->add_option("--magnitudes", bench.saturation_magnitudes, "sigmoid saturation probe")->capture_default_str();
  bench_cmd->add_option("-o,--out", bench.out, "CSV")->required();
  bench_cmd->add_option("--saturation-out", bench.saturation_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ExitCode::kArgument);
  }

  try {
    if (*init_cmd) {
      std::cout << cmd_init_model(init) << '\n';
    } else if (*gen_cmd) {
      if (!spec_file.empty()) {
        std::ifstream in(spec_file);
        if (!in) throw ArgumentError("cannot open " + spec_file);
        json j;
        try {
          j = json::parse(in);
        } catch (const json::exception& e) {
          throw ConfigError(spec_file + ": " + e.what());
        }
        evalkit::SynthSpec s = evalkit::synth_spec_from_json(j);
        // explicit flags win over the file
        if (gen_cmd->count("--train-sets")) s.train_sets = gen.spec.train_sets;
        if (gen_cmd->count("--probe-sets")) s.probe_sets = gen.spec.probe_sets;
        if (gen_cmd->count("--eval-sets")) s.eval_sets = gen.spec.eval_sets;
        if (gen_cmd->count("--data-seed")) s.seed = gen.spec.seed;
        gen.spec = s;
      }
      cmd_gen_data(gen);
    } else if (*train_cmd) {
      train.seed = seed;
      train.verbose = verbose;
      if (!train_init.empty()) train.init_model = train_init;
      const auto result = cmd_train(train);
      std::cout << "final loss " << result.loss_curve.back() << '\n';
    } else if (*dir_cmd) {
      dir.method = steering::parse_method(method);
      dir.perturb_mode = steering::parse_perturb_mode(perturb);
      if (dir_layer >= 0) dir.layer = dir_layer;
      if (!dir_position.empty()) dir.position = dir_position;
      if (*eps_opt) dir.epsilon_override = eps_override;
      if (!dir_prompts.empty()) dir.prompts = dir_prompts;
      dir.seed = seed;
      dir.verbose = verbose;
      const auto result = cmd_direction(dir);
      std::cout << "selected candidate " << result.selected << " (layer " << result.direction.source_layer
                << ", " << result.direction.position.to_string() << ")\n";
    } else if (*genr_cmd) {
      if (!gen_direction.empty()) genr.direction = gen_direction;
      if (!gen_prompts.empty()) genr.prompts = gen_prompts;
      if (max_images > 0) genr.max_images = max_images;
      genr.workers = workers;
      genr.seed = seed;
      std::cout << cmd_generate(genr).size() << " records\n";
    } else if (*eval_cmd) {
      for (const auto& p : eval_inputs) eval.generations.emplace_back(p);
      const auto report = cmd_evaluate(eval);
      for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
      std::cout << report.rows.size() << " report rows\n";
    } else if (*bench_cmd) {
      bench.seed = seed;
      const auto result = cmd_lossbench(bench);
      if (!result.all_pass) {
        std::cerr << "lossbench: some gradient checks failed\n";
        return static_cast<int>(ExitCode::kNumeric);
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kArgument);
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kFormat);
  }
  return 0;
}

}  // namespace steerlab::cli
