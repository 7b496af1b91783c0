#include "detox/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "detox/data.hpp"
#include "detox/debias.hpp"
#include "detox/error.hpp"
#include "detox/finetune.hpp"
#include "detox/model.hpp"

namespace detox {
namespace {

namespace fs = std::filesystem;

struct RunArgs {
  std::string config, model, arch, data, out;
  std::optional<std::uint64_t> seed;
};

struct SynthArgs {
  std::string out;
  std::size_t n = 4000;
  double rho = 0.9;
  std::size_t size = 32;
  std::uint64_t seed = 0;
};

struct TrainArgs {
  std::string arch, data, out;
  std::size_t epochs = 10;
  double lr = 3e-3;
  std::size_t batch = 64;
  std::uint64_t seed = 0;
};

std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

void print_summary(const std::vector<DebiasResult>& rows, Metric criterion, std::ostream& out) {
  out << "method            f1      " << metric_name(criterion) << "  status\n";
  for (const auto& r : rows) {
    std::string name = r.method;
    name.resize(std::max<std::size_t>(name.size(), 17), ' ');
    out << name << " ";
    if (r.failed()) {
      out << "-       -        failed: " << r.error << "\n";
    } else {
      out << fixed3(r.report_after.at(Metric::kF1)) << "   "
          << fixed3(r.report_after.at(criterion)) << "    " << r.status << "\n";
    }
  }
}

int do_run(const RunArgs& a, std::ostream& out) {
  DebiasConfig config = load_config(a.config);
  if (!a.out.empty()) config.output_dir = a.out;
  if (a.seed) config.seed = *a.seed;
  const Model model = load_model(a.model, a.arch);
  const DatasetManifest data = load_manifest(a.data);
  const DebiasRun run = debias(model, data, config);
  const auto rows = run.rows();
  write_report(rows, config.output_dir, config.fairness_criterion, run.extra_points);
  print_summary(rows, config.fairness_criterion, out);
  out << "reports written to " << config.output_dir.string() << "\n";
  return kExitOk;
}

int do_validate(const std::string& path, const std::string& model_path, const std::string& arch,
                std::ostream& out) {
  const DebiasConfig config = load_config(path);
  if (!model_path.empty()) {
    const Model model = load_model(model_path, arch);
    if (config.target_layer) {
      try {
        model.layer(*config.target_layer);
      } catch (const Error& e) {
        fail(ErrorCode::kConfigError, "target_layer: " + std::string(e.what()));
      }
    }
  }
  out << "config ok: " << config.methods.size() << " method(s)\n";
  return kExitOk;
}

int do_synth(const SynthArgs& a, std::ostream& out) {
  const auto manifest = make_synthetic_biased({a.n, a.rho, a.size, a.seed}, a.out);
  out << "wrote " << manifest.size() << " images to " << a.out << "\n";
  return kExitOk;
}

int do_train(const TrainArgs& a, std::ostream& out) {
  const DatasetManifest data = load_manifest(a.data);
  Model model = make_model(a.arch, a.seed);
  const DatasetManifest fit = data.has_splits() ? data.subset(Split::kFit) : data;
  const LabeledBatch batch = load_all(fit, model.input_shape());
  const auto losses = train_classifier(model, batch, {a.epochs, a.lr, a.batch, a.seed});
  save_model(model, a.out);
  out << "trained " << a.arch << " (" << model.parameter_count() << " parameters), final loss "
      << fixed3(losses.back()) << "\n";
  if (data.has_splits()) {
    const LabeledBatch eval = load_all(data.subset(Split::kEval), model.input_shape());
    const auto report = full_report(eval.y, binarize(model.predict_scores(eval)), eval.a);
    out << "eval: " << report.to_json().dump() << "\n";
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Post-hoc debiasing for binary image classifiers", "detox"};
  app.require_subcommand(1);

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "Debias a model and write reports");
  run->add_option("--config", run_args.config, "JSON config")->required();
  run->add_option("--model", run_args.model, "Model checkpoint")->required();
  run->add_option("--arch", run_args.arch, "Architecture id, e.g. small_cnn:3x32x32")->required();
  run->add_option("--data", run_args.data, "Dataset manifest CSV")->required();
  run->add_option("--out", run_args.out, "Output directory (overrides the config)");
  run->add_option("--seed", run_args.seed, "Seed (overrides the config)");

  std::string validate_config, validate_model, validate_arch;
  auto* validate = app.add_subcommand("validate", "Check a config without running anything");
  validate->add_option("--config", validate_config, "JSON config")->required();
  validate->add_option("--model", validate_model, "Also check the target layer against a checkpoint");
  validate->add_option("--arch", validate_arch, "Architecture id of --model");

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "Write the synthetic shape/colour benchmark");
  synth->add_option("--out", synth_args.out, "Output directory")->required();
  synth->add_option("--n", synth_args.n, "Number of images");
  synth->add_option("--rho", synth_args.rho, "Fraction of samples with a == y");
  synth->add_option("--size", synth_args.size, "Image side in pixels");
  synth->add_option("--seed", synth_args.seed, "Seed");

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train a registered architecture on a manifest");
  train->add_option("--arch", train_args.arch, "Architecture id")->required();
  train->add_option("--data", train_args.data, "Dataset manifest CSV")->required();
  train->add_option("--out", train_args.out, "Checkpoint path")->required();
  train->add_option("--epochs", train_args.epochs, "Epochs");
  train->add_option("--lr", train_args.lr, "Adam learning rate");
  train->add_option("--batch", train_args.batch, "Batch size");
  train->add_option("--seed", train_args.seed, "Seed");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitConfig;
  }

  try {
    if (run->parsed()) return do_run(run_args, out);
    if (validate->parsed()) return do_validate(validate_config, validate_model, validate_arch, out);
    if (synth->parsed()) return do_synth(synth_args, out);
    if (train->parsed()) return do_train(train_args, out);
  } catch (const Error& e) {
    err << "error [" << error_code_name(e.code()) << "]: " << e.what() << "\n";
    return e.code() == ErrorCode::kConfigError ? kExitConfig : kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitConfig;
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace detox
