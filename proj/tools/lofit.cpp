#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "lofit/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Localized fine-tuning of attention-head offsets on a toy transformer"};
  app.require_subcommand(1);
  lofit::cli::Options opts;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", opts.config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("-o,--out", opts.out, "Output directory")->capture_default_str();
    sub->add_option("--checkpoint", opts.checkpoint, "Base checkpoint (default: paths.checkpoint or <out>/base.lft)");
    sub->add_option("--seed", opts.seed, "Run a single seed instead of the configured list");
    sub->add_flag("-q,--quiet", opts.quiet, "No progress output");
  };

  CLI::App* pretrain = app.add_subcommand("pretrain", "Train the base model on the task mixture");
  common(pretrain);
  CLI::App* select = app.add_subcommand("select", "Select target heads and write a head-set file");
  common(select);
  CLI::App* tune = app.add_subcommand("tune", "Tune head offsets on a head set and write an intervention file");
  common(tune);
  tune->add_option("--heads", opts.heads, "Head-set file")->required()->check(CLI::ExistingFile);
  CLI::App* eval = app.add_subcommand("eval", "Evaluate the base model with and without interventions");
  common(eval);
  eval->add_option("--intervention", opts.interventions, "Intervention file (repeatable, one per seed)")
      ->check(CLI::ExistingFile);
  eval->add_flag("--baselines", opts.baselines, "Also evaluate probe-offset and contrast-vector baselines");
  CLI::App* sweep = app.add_subcommand("sweep-k", "Accuracy as a function of the number of tuned heads");
  common(sweep);
  CLI::App* transfer = app.add_subcommand("transfer", "Tune offsets on heads selected for another task");
  common(transfer);
  transfer->add_option("--source", opts.source, "Restrict to one source task");
  transfer->add_option("--target", opts.target, "Restrict to one target task");
  CLI::App* analyze = app.add_subcommand("analyze", "Head-set overlap, layer distributions and logit lens");
  common(analyze);
  analyze->add_option("--heads", opts.heads, "Head-set files to compare")->check(CLI::ExistingFile);
  analyze->add_option("--intervention", opts.interventions, "Intervention files to project through the unembedding")
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : lofit::cli::kExitConfig;
  }
  return lofit::cli::run(app.get_subcommands().front()->get_name(), opts);
}
