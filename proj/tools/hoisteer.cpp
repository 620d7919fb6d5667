#include <CLI11.hpp>

#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "hoi/commands.hpp"

namespace {

hoi::model::RunConfig load_config(const std::string& config_path, std::optional<int> seed,
                                  const std::string& out_dir) {
  hoi::model::RunConfig cfg;
  if (!config_path.empty()) cfg = hoi::model::RunConfig::load(config_path);
  if (seed) cfg.optim.seed = *seed;
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  cfg.validate();
  return cfg;
}

void print_report(const char* tag, const hoi::evaluation::EvalReport& r) {
  std::cout << tag << "  mAP full " << r.map_full << "  rare " << r.map_rare << "  non-rare "
            << r.map_non_rare << "  unseen " << r.map_unseen << "  seen " << r.map_seen << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Human-object interaction pipeline: salience-gated candidate pairs steer a frozen "
               "generator through compact visual kernels"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint, axis;
  std::optional<int> seed;
  int image_id = -1;
  std::vector<std::string> points;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "RunConfig JSON file (defaults apply when omitted)");
    sub->add_option("--seed", seed, "Override the training seed");
    sub->add_option("--out", out_dir, "Override the output directory");
  };

  auto* train = app.add_subcommand("train", "Train and write checkpoint + metrics");
  add_common(train);
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint and write report.json");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  auto* infer = app.add_subcommand("infer", "Run inference on one evaluation image");
  add_common(infer);
  infer->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  infer->add_option("--image", image_id, "Evaluation image id")->required();
  auto* sweep = app.add_subcommand("sweep", "Train+eval across an ablation axis");
  add_common(sweep);
  sweep->add_option("--axis", axis, "kernel_length | alpha | component_toggle")->required();
  sweep->add_option("--points", points, "Axis points (axis defaults when omitted)");
  auto* plot = app.add_subcommand("plot-attention", "Write encoder and kernel heatmaps");
  add_common(plot);
  plot->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  plot->add_option("--image", image_id, "Evaluation image id")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    hoi::model::RunConfig cfg = load_config(config_path, seed, out_dir);
    if (train->parsed()) {
      auto res = hoi::commands::cmd_train(cfg);
      std::cout << "trained " << res.steps << " steps, total loss " << res.first_total << " -> "
                << res.last_total << "\n"
                << "checkpoint: " << res.checkpoint_path << "\n"
                << "metrics:    " << res.metrics_path << "\n";
    } else if (eval->parsed()) {
      auto res = hoi::commands::cmd_eval(cfg, checkpoint);
      print_report("default     ", res.default_setting);
      print_report("known-object", res.known_object);
      std::cout << "report: " << cfg.out_dir << "/report.json\n";
    } else if (infer->parsed()) {
      auto triplets = hoi::commands::cmd_infer(cfg, checkpoint, image_id);
      std::cout << triplets.size() << " scored predictions -> " << cfg.out_dir << "/infer_"
                << image_id << ".json\n";
    } else if (sweep->parsed()) {
      std::optional<std::vector<std::string>> pts;
      if (!points.empty()) pts = points;
      auto rows = hoi::commands::cmd_sweep(cfg, axis, pts);
      for (const auto& row : rows)
        std::cout << row.axis << "=" << row.point << "  mAP "
                  << row.reports.default_setting.map_full << "\n";
      std::cout << "table: " << cfg.out_dir << "/sweep.csv\n";
    } else if (plot->parsed()) {
      auto res = hoi::commands::cmd_plot_attention(cfg, checkpoint, image_id);
      for (const auto& f : res.files) std::cout << f << "\n";
      if (!res.message.empty()) std::cout << res.message << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
