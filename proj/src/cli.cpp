#include "egmt/cli.hpp"

#include "egmt/config.hpp"
#include "egmt/data.hpp"
#include "egmt/entity.hpp"
#include "egmt/metrics.hpp"
#include "egmt/trainer.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

namespace egmt::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::string vocab;
  std::string ablation;
  std::optional<std::uint64_t> seed;
  std::optional<Index> stride;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) cfg.train.seed = *c.seed;
  if (c.stride) {
    if (*c.stride < 1) throw ConfigError("--stride must be >= 1");
    cfg.data.stride = *c.stride;
  }
  std::stringstream ss(c.ablation);
  for (std::string name; std::getline(ss, name, ',');) {
    name = trim(name);
    if (!name.empty()) apply_ablation(cfg, name);
  }
  return cfg;
}

LabelVocabulary vocabulary(const Common& c) { return c.vocab.empty() ? default_vocabulary() : load_vocabulary(c.vocab); }

void print_config(std::ostream& out, const json& j) { out << "resolved configuration:\n" << j.dump(2) << "\n"; }

json metric_config_json(const FusionMetricConfig& m) {
  return {{"bins", m.bins},
          {"gamma", m.gamma},
          {"kappa_g", m.kappa_g},
          {"sigma_g", m.sigma_g},
          {"kappa_a", m.kappa_a},
          {"sigma_a", m.sigma_a},
          {"pc_scales", m.pc_scales},
          {"pc_orientations", m.pc_orientations},
          {"pc_min_wavelength", m.pc_min_wavelength},
          {"pc_mult", m.pc_mult},
          {"pc_sigma_onf", m.pc_sigma_onf},
          {"ssim_window", m.ssim.ssim_window},
          {"ssim_sigma", m.ssim.ssim_sigma}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
}

fs::path require_out(const Common& c) {
  if (c.out.empty()) throw ConfigError("--out is required");
  fs::create_directories(c.out);
  return c.out;
}

// ---- subcommands ----

int do_preprocess(const Common& c, const std::string& manifest_path, std::ostream& out) {
  const RunConfig cfg = resolve(c);
  print_config(out, to_json(cfg));
  const fs::path dir = require_out(c);
  const DatasetManifest src = load_manifest(manifest_path);
  validate_manifest(src);
  const LabelVocabulary vocab = vocabulary(c);
  fs::create_directories(dir / "ir");
  fs::create_directories(dir / "vi");
  DatasetManifest dst;
  dst.split = src.split;
  for (const auto& entry : src.entries) {
    for (const auto& p : crop_sliding(load_pair(entry, vocab), cfg.data.crop, cfg.data.stride)) {
      const fs::path ir = dir / "ir" / (p.id + ".png"), vi = dir / "vi" / (p.id + ".png");
      write_png(ir, to_image8(p.ir));
      write_png(vi, to_image8(recolor(p.vi_y, p.vi_cbcr ? &*p.vi_cbcr : nullptr)));
      dst.entries.push_back({ir, vi, fs::absolute(entry.annotation)});
    }
  }
  const fs::path abs_dir = fs::absolute(dir);
  for (auto& e : dst.entries) {
    e.ir = fs::absolute(e.ir);
    e.vi = fs::absolute(e.vi);
  }
  write_text(dir / "manifest.json", serialize_manifest(dst, abs_dir));
  out << dst.entries.size() << " patches from " << src.entries.size() << " pairs -> " << (dir / "manifest.json").string()
      << "\n";
  return kOk;
}

int do_train(const Common& c, const std::string& manifest_path, const std::string& resume, std::ostream& out) {
  Checkpoint start;
  if (resume.empty()) {
    start = initial_checkpoint(resolve(c));
  } else {
    start = load_checkpoint(resume);
  }
  print_config(out, to_json(start.config));
  const fs::path dir = require_out(c);
  const DatasetManifest manifest = load_manifest(manifest_path);
  validate_manifest(manifest);
  const std::vector<ImagePairSample> samples = load_training_samples(manifest, vocabulary(c), start.config.data);
  out << samples.size() << " training patches\n";
  TrainOptions opts;
  opts.out_dir = dir;
  opts.on_step = [&out](const LossRecord& r) {
    if (r.step == 1 || r.step % 25 == 0) out << "step " << r.step << "  " << loss_csv_row(r) << "\n" << std::flush;
  };
  const TrainResult result = train(samples, std::move(start), opts);
  out << "finished at step " << result.final.state.step << " -> " << (dir / "checkpoint.egck").string() << "\n";
  return kOk;
}

int do_fuse(const Common& c, const std::string& ckpt_path, const std::string& manifest_path, bool color,
            std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  print_config(out, to_json(ckpt.config));
  const fs::path dir = require_out(c);
  const DatasetManifest manifest = load_manifest(manifest_path);
  validate_manifest(manifest);
  const auto written = fuse_manifest(ckpt, manifest, vocabulary(c), dir, {color});
  out << written.size() << " fused images -> " << dir.string() << "\n";
  return kOk;
}

int do_eval_fusion(const Common& c, const std::string& fused, const std::string& ir, const std::string& vi,
                   std::ostream& out) {
  const FusionMetricConfig mcfg;
  print_config(out, metric_config_json(mcfg));
  const fs::path dir = require_out(c);
  const MetricReport report = evaluate_directory(fused, ir, vi, mcfg);
  write_text(dir / "fusion_metrics.csv", report.to_csv());
  write_text(dir / "fusion_metrics.json", report.to_json());
  if (report.ids.empty()) {
    out << "empty report: no fused images in " << fused << "\n";
    return kOk;
  }
  const auto mean = report.mean();
  for (const auto& name : report.columns) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", mean.at(name));
    out << name << " " << buf << "\n";
  }
  return kOk;
}

int do_eval_cls(const Common& c, const std::string& ckpt_path, const std::string& manifest_path, double threshold,
                std::ostream& out, std::ostream& err) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  json shown = to_json(ckpt.config);
  shown["threshold"] = threshold;
  print_config(out, shown);
  const fs::path dir = require_out(c);
  const DatasetManifest manifest = load_manifest(manifest_path);
  validate_manifest(manifest);
  const LabelVocabulary vocab = vocabulary(c);

  std::vector<std::array<double, kNumLabels>> scores;
  std::vector<LabelVector> labels;
  std::ostringstream csv;
  csv << "image";
  for (std::size_t k = 0; k < kNumLabels; ++k) csv << ",p" << k;
  for (std::size_t k = 0; k < kNumLabels; ++k) csv << ",y" << k;
  csv << "\n";
  for (const auto& entry : manifest.entries) {
    const ImagePairSample s = load_pair(entry, vocab);
    const Inference inf = infer(ckpt.state.params, ckpt.config.model, s.ir, s.vi_y, entity_input(s, ckpt.config.model));
    scores.push_back(inf.probabilities);
    labels.push_back(s.label);
    csv << s.id;
    for (double p : inf.probabilities) csv << "," << p;
    for (int y : s.label) csv << "," << y;
    csv << "\n";
  }
  const ClassificationMetrics m = classification_metrics(scores, labels, threshold);
  for (const auto& w : m.warnings) err << "warning: " << w << "\n";
  MetricReport report;
  report.columns = classification_metric_names();
  report.ids = {"all"};
  report.rows = {{{"HL", m.hamming_loss}, {"RL", m.ranking_loss}, {"mAP", m.mean_ap}, {"AUC", m.auc}, {"JI", m.jaccard},
                  {"F1", m.micro_f1}}};
  write_text(dir / "classification_scores.csv", csv.str());
  write_text(dir / "classification_metrics.csv", report.to_csv());
  write_text(dir / "classification_metrics.json", report.to_json());
  for (const auto& name : report.columns) out << name << " " << report.rows[0].at(name) << "\n";
  return kOk;
}

int do_validate(const Common& c, const std::string& dir, std::ostream& out, std::ostream& err) {
  const LabelVocabulary vocab = vocabulary(c);
  print_config(out, {{"directory", dir}, {"vocabulary", c.vocab.empty() ? "default" : c.vocab}});
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::size_t bad = 0;
  for (const auto& f : files) {
    try {
      const EntityAnnotation a = load_annotation(f);
      validate_annotation(a);
      entities_to_labels(a, vocab);
    } catch (const std::exception& e) {
      ++bad;
      const std::string msg = e.what(), name = f.filename().string();
      err << (msg.starts_with(name) ? msg : name + ": " + msg) << "\n";
    }
  }
  if (bad) {
    out << (files.size() - bad) << " ok, " << bad << " invalid\n";
    return kDataError;
  }
  out << files.size() << " ok\n";
  return kOk;
}

// Reads the MEAN row of a metric CSV written by eval-fusion or eval-cls.
std::vector<std::pair<std::string, double>> read_mean_row(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string header, line;
  std::getline(in, header);
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::stringstream ss(s);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    return cells;
  };
  const auto cols = split(header);
  if (cols.empty() || cols[0] != "image") throw DataError(path.string() + ": not a metric CSV");
  while (std::getline(in, line)) {
    const auto cells = split(line);
    if (cells.empty() || cells[0] != "MEAN") continue;
    if (cells.size() != cols.size()) throw DataError(path.string() + ": ragged MEAN row");
    std::vector<std::pair<std::string, double>> out;
    for (std::size_t i = 1; i < cells.size(); ++i) out.emplace_back(cols[i], std::stod(cells[i]));
    return out;
  }
  throw DataError(path.string() + ": no MEAN row");
}

int do_report(const Common& c, const std::vector<std::string>& inputs, std::ostream& out) {
  print_config(out, {{"inputs", inputs}, {"out", c.out}});
  const fs::path dir = require_out(c);
  // Method name: the directory holding the CSV, or the file stem for loose files.
  std::vector<std::string> methods, columns;
  std::vector<std::map<std::string, double>> rows;
  for (const auto& in : inputs) {
    const fs::path p(in);
    const std::string stem = p.stem().string();
    const bool generic = stem == "fusion_metrics" || stem == "classification_metrics";
    methods.push_back(generic && p.has_parent_path() ? p.parent_path().filename().string() : stem);
    std::map<std::string, double> row;
    for (const auto& [name, value] : read_mean_row(p)) {
      if (std::find(columns.begin(), columns.end(), name) == columns.end()) columns.push_back(name);
      row[name] = value;
    }
    rows.push_back(std::move(row));
  }
  std::ostringstream table, md, plot;
  table << "method";
  md << "| method |";
  for (const auto& col : columns) {
    table << "," << col;
    md << " " << col << " |";
  }
  table << "\n";
  md << "\n|---|";
  for (std::size_t i = 0; i < columns.size(); ++i) md << "---|";
  md << "\n";
  plot << "method,metric,value\n";
  char buf[64];
  for (std::size_t r = 0; r < rows.size(); ++r) {
    table << methods[r];
    md << "| " << methods[r] << " |";
    for (const auto& col : columns) {
      auto it = rows[r].find(col);
      if (it == rows[r].end()) {
        table << ",";
        md << " - |";
        continue;
      }
      std::snprintf(buf, sizeof buf, "%.4f", it->second);
      table << "," << buf;
      md << " " << buf << " |";
      std::snprintf(buf, sizeof buf, "%.10g", it->second);
      plot << methods[r] << "," << col << "," << buf << "\n";
    }
    table << "\n";
    md << "\n";
  }
  write_text(dir / "report.csv", table.str());
  write_text(dir / "report.md", md.str());
  write_text(dir / "plot_data.csv", plot.str());
  out << md.str();
  return kOk;
}

void add_common(CLI::App* sub, Common& c, bool with_out) {
  sub->add_option("--config", c.config, "JSON file overriding the defaults")->check(CLI::ExistingFile);
  if (with_out) sub->add_option("--out", c.out, "Output directory")->required();
  sub->add_option("--seed", c.seed, "Seed override");
  sub->add_option("--ablation", c.ablation, "Comma list of components to disable: ca,ta,cgha,mt,ti");
  sub->add_option("--stride", c.stride, "Crop stride override");
  sub->add_option("--vocab", c.vocab, "Label vocabulary JSON")->check(CLI::ExistingFile);
}

void apply_thread_cap() {
  if (const char* env = std::getenv("EGMT_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) Eigen::setNbThreads(n);
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Entity-guided infrared/visible image fusion", "egmt"};
  app.require_subcommand(1, 1);
  Common c;
  std::string manifest, checkpoint, resume, fused_dir, ir_dir, vi_dir, annotation_dir;
  std::vector<std::string> report_inputs;
  bool color = false;
  double threshold = 0.5;

  auto* pre = app.add_subcommand("preprocess", "Crop image pairs into patches and write a patch manifest");
  add_common(pre, c, true);
  pre->add_option("manifest", manifest, "Source manifest")->required()->check(CLI::ExistingFile);

  auto* tr = app.add_subcommand("train", "Train from a manifest");
  add_common(tr, c, true);
  tr->add_option("manifest", manifest, "Training manifest")->required()->check(CLI::ExistingFile);
  tr->add_option("--resume", resume, "Continue from a checkpoint")->check(CLI::ExistingFile);

  auto* fu = app.add_subcommand("fuse", "Fuse every pair of a manifest with a checkpoint");
  add_common(fu, c, true);
  fu->add_option("checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  fu->add_option("manifest", manifest)->required()->check(CLI::ExistingFile);
  fu->add_flag("--color", color, "Recolor with the visible chroma");

  auto* ef = app.add_subcommand("eval-fusion", "Fusion metrics over a directory of fused images");
  add_common(ef, c, true);
  ef->add_option("fused_dir", fused_dir)->required();
  ef->add_option("ir_dir", ir_dir)->required();
  ef->add_option("vi_dir", vi_dir)->required();

  auto* ec = app.add_subcommand("eval-cls", "Classification metrics of a checkpoint on a manifest");
  add_common(ec, c, true);
  ec->add_option("checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  ec->add_option("manifest", manifest)->required()->check(CLI::ExistingFile);
  ec->add_option("--threshold", threshold, "Decision threshold")->check(CLI::Range(0.0, 1.0));

  auto* va = app.add_subcommand("validate-annotations", "Check every annotation document in a directory");
  add_common(va, c, false);
  va->add_option("dir", annotation_dir)->required();

  auto* rp = app.add_subcommand("report", "Merge metric CSVs into one table plus plot data");
  add_common(rp, c, true);
  rp->add_option("inputs", report_inputs, "Metric CSV files")->required()->check(CLI::ExistingFile);

  std::vector<std::string> argv;
  for (auto it = args.rbegin(); it != args.rend(); ++it) argv.push_back(*it);
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return kOk;
    // Usage of the subcommand that failed to parse, or of the whole program.
    const auto chosen = app.get_subcommands();
    err << (chosen.empty() ? app.help() : chosen.front()->help());
    return kUsage;
  }

  apply_thread_cap();
  try {
    if (*pre) return do_preprocess(c, manifest, out);
    if (*tr) return do_train(c, manifest, resume, out);
    if (*fu) return do_fuse(c, checkpoint, manifest, color, out);
    if (*ef) return do_eval_fusion(c, fused_dir, ir_dir, vi_dir, out);
    if (*ec) return do_eval_cls(c, checkpoint, manifest, threshold, out, err);
    if (*va) return do_validate(c, annotation_dir, out, err);
    if (*rp) return do_report(c, report_inputs, out);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumericError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  }
  return kUsage;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace egmt::cli
