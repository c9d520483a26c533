#include "gendistill/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "gendistill/cache.hpp"
#include "gendistill/errors.hpp"
#include "gendistill/pipeline.hpp"

namespace gendistill {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output;
  int64_t seed = -1;
  std::string teacher;
  std::string checkpoint;
  std::string runs;
  std::string cache_out;
};

ExperimentConfig resolve_config(const CommonArgs& args) {
  nlohmann::json doc = nlohmann::json::object();
  if (!args.config_path.empty()) {
    std::ifstream in(args.config_path);
    if (!in) throw ConfigError("cannot read config file " + args.config_path);
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config " + args.config_path + " is not valid JSON: " + e.what());
    }
  }
  for (const auto& o : args.overrides) apply_override(doc, o);
  auto config = parse_experiment_config(doc);
  if (args.seed >= 0) config.set_seed(static_cast<uint64_t>(args.seed));
  if (!args.output.empty()) config.output_dir = args.output;
  config.validate();
  return config;
}

// Everything that determines the results; the output location does not.
nlohmann::json identity_json(const ExperimentConfig& config) {
  auto j = to_json(config);
  j.erase("output_dir");
  return j;
}

fs::path prepare_run_dir(const ExperimentConfig& config, const std::string& command, std::string& run_id) {
  nlohmann::json snapshot = identity_json(config);
  run_id = run_id_for(command, snapshot);
  const fs::path dir = fs::path(config.output_dir) / run_id;
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << stable_dump(snapshot);
  return dir;
}

void finish_report(MetricsReport& report, const ExperimentConfig& config, const std::string& run_id,
                   const fs::path& dir, Clock::time_point started) {
  report.run_id = run_id;
  report.config = identity_json(config);
  report.wall_clock_seconds = std::chrono::duration<double>(Clock::now() - started).count();
  report.write(dir.string());
}

struct LoadedTeacher {
  DiffusionTeacher teacher;
  std::shared_ptr<Interpreter> interpreter;
};

LoadedTeacher obtain_teacher(const CommonArgs& args, const ExperimentConfig& config, const ToyData& data,
                             bool need_interpreter, const fs::path& dir) {
  if (!args.teacher.empty()) {
    auto bundle = load_teacher_bundle(args.teacher);
    if (need_interpreter && !bundle.interpreter) {
      std::cout << "training interpreter on " << config.dataset.num_interpreter_labeled << " labeled images\n";
      bundle.interpreter = std::make_shared<Interpreter>(train_interpreter_for(config, bundle.teacher, data).interpreter);
    }
    return {bundle.teacher, bundle.interpreter};
  }
  std::cout << "training teacher on " << config.dataset.num_unlabeled << " images\n";
  auto teacher = train_teacher_for(config, data).teacher;
  std::shared_ptr<Interpreter> interpreter;
  if (need_interpreter) {
    std::cout << "training interpreter on " << config.dataset.num_interpreter_labeled << " labeled images\n";
    interpreter = std::make_shared<Interpreter>(train_interpreter_for(config, teacher, data).interpreter);
  }
  save_teacher_bundle((dir / "teacher.pt").string(), teacher, interpreter ? *interpreter : Interpreter{nullptr});
  return {teacher, interpreter};
}

int cmd_train_teacher(const CommonArgs& args) {
  const auto started = Clock::now();
  auto config = resolve_config(args);
  std::string run_id;
  const auto dir = prepare_run_dir(config, "train-teacher", run_id);
  const auto data = build_toy_data(config.dataset);
  auto result = train_teacher_for(config, data);
  result.teacher.save((dir / "teacher.pt").string());
  MetricsReport report;
  report.kind = "train-teacher";
  for (size_t e = 0; e < result.train_loss.size(); ++e) {
    report.epochs.push_back({static_cast<int64_t>(e + 1), result.heldout_mse[e + 1], 0.0, 0.0, result.train_loss[e]});
  }
  report.final_metrics = {{"heldout_mse_initial", result.heldout_mse.front()},
                          {"heldout_mse_final", result.heldout_mse.back()}};
  report.seeds = {{"teacher_model", config.teacher.model.seed}, {"teacher_train", config.teacher.train.seed}};
  finish_report(report, config, run_id, dir, started);
  std::cout << "teacher written to " << (dir / "teacher.pt").string() << "\n";
  return kExitOk;
}

int cmd_train_interpreter(const CommonArgs& args) {
  const auto started = Clock::now();
  auto config = resolve_config(args);
  std::string run_id;
  const auto dir = prepare_run_dir(config, "train-interpreter", run_id);
  const auto data = build_toy_data(config.dataset);
  DiffusionTeacher teacher = args.teacher.empty() ? train_teacher_for(config, data).teacher
                                                  : load_teacher_bundle(args.teacher).teacher;
  const auto digest_before = teacher.digest();
  auto result = train_interpreter_for(config, teacher, data);
  if (teacher.digest() != digest_before) throw std::runtime_error("interpreter training modified the teacher");
  save_teacher_bundle((dir / "teacher.pt").string(), teacher, result.interpreter);
  MetricsReport report;
  report.kind = "train-interpreter";
  for (size_t e = 0; e < result.train_loss.size(); ++e) {
    report.epochs.push_back({static_cast<int64_t>(e + 1), 0.0, 0.0, 0.0, result.train_loss[e]});
  }
  report.final_metrics = {{"train_miou_initial", result.train_miou.front()},
                          {"train_miou_final", result.train_miou.back()}};
  report.seeds = {{"interpreter_model", config.interpreter.model.seed},
                  {"interpreter_train", config.interpreter.train.seed}};
  finish_report(report, config, run_id, dir, started);
  std::cout << "teacher + interpreter written to " << (dir / "teacher.pt").string() << "\n";
  return kExitOk;
}

int cmd_pretrain(const CommonArgs& args) {
  const auto started = Clock::now();
  auto config = resolve_config(args);
  std::string run_id;
  const auto dir = prepare_run_dir(config, "pretrain", run_id);
  const auto data = build_toy_data(config.dataset);
  const bool need_interp = config.run.loss != LossVariant::kFeat;
  auto loaded = obtain_teacher(args, config, data, need_interp, dir);
  auto settings = pipeline_settings(config, (dir / "work").string());
  auto inputs = pipeline_inputs(loaded.teacher, data, loaded.interpreter);
  if (settings.regressor.teacher_channels.empty()) settings.regressor.teacher_channels = loaded.teacher.feature_channels();
  settings.regressor.validate_for_input({config.dataset.resolution, config.dataset.resolution});
  auto backbone = build_backbone(settings.backbone);
  auto regressor = build_regressor(settings.regressor, settings.backbone);
  const auto factory = make_stream_factory(inputs, settings);
  auto result = config.run.loss == LossVariant::kFeat
                    ? pretrain_feature_distill(backbone, regressor, factory, settings.distill, settings.run)
                    : pretrain_mix_distill(backbone, regressor, *loaded.interpreter, factory, settings.distill,
                                           settings.run, config.run.loss);
  save_pretrain_checkpoint((dir / "checkpoint.pt").string(), result);
  finish_report(result.report, config, run_id, dir, started);
  std::cout << "checkpoint written to " << (dir / "checkpoint.pt").string() << "\n";
  return kExitOk;
}

int cmd_finetune(const CommonArgs& args) {
  const auto started = Clock::now();
  auto config = resolve_config(args);
  std::string run_id;
  const auto dir = prepare_run_dir(config, args.checkpoint.empty() ? "finetune-random" : "finetune", run_id);
  Backbone backbone = args.checkpoint.empty() ? build_backbone(config.backbone) : load_backbone(args.checkpoint);
  const auto data = build_toy_data(config.dataset);
  SegmentationSplit split{data.labeled_images, data.labeled_masks, data.test_images, data.test_masks};
  auto report = finetune_segmentation(backbone, split, config.dataset.num_classes, config.run.finetune);
  finish_report(report, config, run_id, dir, started);
  std::cout << "mIoU " << report.final_metrics.at("miou") << "  pixel accuracy "
            << report.final_metrics.at("pixel_accuracy") << "\n";
  return kExitOk;
}

int cmd_sweep(const CommonArgs& args) {
  const auto started = Clock::now();
  auto config = resolve_config(args);
  std::string run_id;
  const auto dir = prepare_run_dir(config, "sweep", run_id);
  const auto data = build_toy_data(config.dataset);
  const auto axis = parse_sweep_axis(config.run.sweep_axis);
  bool need_interp = config.run.loss != LossVariant::kFeat;
  if (axis == SweepAxis::kLossVariant) {
    for (const auto& v : config.run.sweep_values) need_interp = need_interp || parse_loss_variant(v) != LossVariant::kFeat;
  }
  auto loaded = obtain_teacher(args, config, data, need_interp, dir);
  const auto rows = run_ablation_sweep(axis, config.run.sweep_values, pipeline_inputs(loaded.teacher, data, loaded.interpreter),
                                       pipeline_settings(config, (dir / "work").string()));
  for (auto row : rows) {
    const auto row_dir = dir / (to_string(axis) + "_" + row.value);
    finish_report(row.pretrain, config, run_id + "/" + row.value + "/pretrain", row_dir / "pretrain", started);
    finish_report(row.finetune, config, run_id + "/" + row.value + "/finetune", row_dir / "finetune", started);
  }
  const auto table = sweep_table_markdown(axis, rows);
  std::ofstream(dir / "sweep.md") << "# Sweep over " << to_string(axis) << "\n\n" << table;
  std::cout << table;
  return kExitOk;
}

int cmd_export_cache(const CommonArgs& args) {
  auto config = resolve_config(args);
  std::string run_id;
  const auto dir = prepare_run_dir(config, "export-cache", run_id);
  const auto data = build_toy_data(config.dataset);
  const bool need_interp = config.run.loss != LossVariant::kFeat;
  auto loaded = obtain_teacher(args, config, data, need_interp, dir);
  auto spec = config.dataset.spec;
  if (spec.mode != DatasetMode::kEncoded) throw ConfigError("export-cache supports dataset.spec.mode = encoded only");
  auto stream = iterate_encoded(loaded.teacher, data.unlabeled, spec, 0, {}, loaded.interpreter);
  const std::string path = args.cache_out.empty() ? (dir / "features.dtfc").string() : args.cache_out;
  const int64_t count = export_cache(*stream, path);
  std::cout << count << " records written to " << path << " (" << fs::file_size(path) << " bytes)\n";
  return kExitOk;
}

int cmd_report(const CommonArgs& args) {
  if (args.runs.empty()) throw ConfigError("report needs --runs DIR");
  if (!fs::is_directory(args.runs)) throw ConfigError("--runs " + args.runs + " is not a directory");
  std::cout << write_report(args.runs);
  return kExitOk;
}

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

}  // namespace

std::string loss_curve_svg(const MetricsReport& report) {
  constexpr double kW = 480, kH = 300, kPad = 40;
  struct Series {
    const char* name;
    const char* color;
    double EpochLosses::*field;
  };
  const Series series[] = {{"total", "#1f77b4", &EpochLosses::total},
                           {"mse", "#ff7f0e", &EpochLosses::mse},
                           {"at", "#2ca02c", &EpochLosses::at},
                           {"ld", "#d62728", &EpochLosses::ld}};
  double lo = 0.0, hi = 0.0;
  bool any = false;
  for (const auto& e : report.epochs) {
    for (const auto& s : series) {
      const double v = e.*(s.field);
      if (!std::isfinite(v)) continue;
      lo = any ? std::min(lo, v) : v;
      hi = any ? std::max(hi, v) : v;
      any = true;
    }
  }
  if (hi <= lo) hi = lo + 1.0;
  const auto n = static_cast<double>(std::max<size_t>(report.epochs.size(), 2) - 1);
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << kPad << "\" y=\"20\" font-size=\"13\">" << svg_escape(report.run_id) << "</text>\n";
  svg << "<line x1=\"" << kPad << "\" y1=\"" << kH - kPad << "\" x2=\"" << kW - 10 << "\" y2=\"" << kH - kPad
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << kPad << "\" y1=\"30\" x2=\"" << kPad << "\" y2=\"" << kH - kPad << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"4\" y=\"38\" font-size=\"10\">" << hi << "</text>\n";
  svg << "<text x=\"4\" y=\"" << kH - kPad << "\" font-size=\"10\">" << lo << "</text>\n";
  svg << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 10 << "\" font-size=\"11\">epoch</text>\n";
  int legend = 0;
  for (const auto& s : series) {
    bool nonzero = false;
    for (const auto& e : report.epochs) nonzero = nonzero || e.*(s.field) != 0.0;
    if (!nonzero) continue;
    svg << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
    for (size_t i = 0; i < report.epochs.size(); ++i) {
      const double v = report.epochs[i].*(s.field);
      const double x = kPad + (kW - kPad - 10) * static_cast<double>(i) / n;
      const double y = (kH - kPad) - (kH - kPad - 30) * (v - lo) / (hi - lo);
      svg << x << "," << y << " ";
    }
    svg << "\"/>\n";
    svg << "<text x=\"" << kW - 60 << "\" y=\"" << 40 + 14 * legend++ << "\" font-size=\"11\" fill=\"" << s.color
        << "\">" << s.name << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string write_report(const std::string& dir) {
  std::vector<fs::path> found;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().filename() == "metrics.json") found.push_back(entry.path());
  }
  std::sort(found.begin(), found.end());
  std::ostringstream md;
  md.setf(std::ios::fixed);
  md.precision(4);
  md << "# Run report\n\n| run | kind | epochs | final loss | mIoU | pixel acc | curve |\n|---|---|---|---|---|---|---|\n";
  for (const auto& path : found) {
    const auto report = MetricsReport::read(path.parent_path().string());
    const auto rel = fs::relative(path.parent_path(), dir).string();
    std::string plot = "-";
    if (!report.epochs.empty()) {
      std::string name = rel;
      std::replace(name.begin(), name.end(), '/', '_');
      plot = name + "_loss.svg";
      std::ofstream(fs::path(dir) / plot) << loss_curve_svg(report);
      plot = "![](" + plot + ")";
    }
    auto metric = [&](const char* key) {
      auto it = report.final_metrics.find(key);
      if (it == report.final_metrics.end()) return std::string("-");
      std::ostringstream s;
      s.setf(std::ios::fixed);
      s.precision(2);
      s << it->second;
      return s.str();
    };
    md << "| " << rel << " | " << report.kind << " | " << report.epochs.size() << " | ";
    if (report.epochs.empty()) {
      md << "-";
    } else {
      md << report.epochs.back().total;
    }
    md << " | " << metric("miou") << " | " << metric("pixel_accuracy") << " | " << plot << " |\n";
  }
  if (found.empty()) md << "\nNo metrics.json found below " << dir << ".\n";
  std::ofstream(fs::path(dir) / "report.md") << md.str();
  return md.str();
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Generative-teacher feature distillation at desk scale", "gendistill"};
  app.require_subcommand(1);
  app.fallthrough();
  CommonArgs args;
  app.add_option("--config", args.config_path, "Experiment config (JSON)");
  app.add_option("--seed", args.seed, "Seed applied to every stochastic component")->check(CLI::NonNegativeNumber);
  app.add_option("--set", args.overrides, "Override KEY=VALUE (repeatable), e.g. distill.lambda_at=0");
  app.add_option("--output", args.output, "Output directory (overrides output_dir)");

  auto* teacher_cmd = app.add_subcommand("train-teacher", "Train the diffusion teacher on unlabeled toy images");
  auto* interp_cmd = app.add_subcommand("train-interpreter", "Train the feature interpreter on labeled images");
  interp_cmd->add_option("--teacher", args.teacher, "Teacher archive");
  auto* pretrain_cmd = app.add_subcommand("pretrain", "Distill teacher features into the student backbone");
  pretrain_cmd->add_option("--teacher", args.teacher, "Teacher archive (trained inline when omitted)");
  auto* finetune_cmd = app.add_subcommand("finetune", "Finetune a backbone for segmentation");
  finetune_cmd->add_option("--checkpoint", args.checkpoint, "Pretrained checkpoint (random init when omitted)");
  auto* sweep_cmd = app.add_subcommand("sweep", "Ablation sweep over run.sweep_axis / run.sweep_values");
  sweep_cmd->add_option("--teacher", args.teacher, "Teacher archive (trained inline when omitted)");
  auto* export_cmd = app.add_subcommand("export-cache", "Encode the unlabeled set into a feature cache file");
  export_cmd->add_option("--teacher", args.teacher, "Teacher archive (trained inline when omitted)");
  export_cmd->add_option("--cache-out", args.cache_out, "Cache file path");
  auto* report_cmd = app.add_subcommand("report", "Summarize runs as markdown with loss-curve SVGs");
  report_cmd->add_option("--runs", args.runs, "Directory containing run outputs")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return kExitValidation;
  }

  try {
    if (teacher_cmd->parsed()) return cmd_train_teacher(args);
    if (interp_cmd->parsed()) return cmd_train_interpreter(args);
    if (pretrain_cmd->parsed()) return cmd_pretrain(args);
    if (finetune_cmd->parsed()) return cmd_finetune(args);
    if (sweep_cmd->parsed()) return cmd_sweep(args);
    if (export_cmd->parsed()) return cmd_export_cache(args);
    if (report_cmd->parsed()) return cmd_report(args);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return kExitRuntime;
  }
  std::cerr << app.help();
  return kExitValidation;
}

}  // namespace gendistill
