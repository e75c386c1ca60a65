#pragma once

// Command-line front end: pretrain, quantize, sweep, analyze, encode, decode,
// report. Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ecqx/checkpoint.hpp"
#include "ecqx/codec.hpp"
#include "ecqx/config.hpp"
#include "ecqx/lrp.hpp"
#include "ecqx/qat.hpp"
#include "ecqx/report.hpp"

namespace ecqx {

// ---------------------------------------------------------------------------
// run directories

inline constexpr const char* kMetricsHeader = "epoch,loss,acc,sparsity,entropy_bits,coded_bytes";

inline std::string metrics_csv(const std::vector<EpochMetrics>& metrics) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& m : metrics) {
    out += std::to_string(m.epoch) + "," + detail::fmt_real(m.loss) + "," + detail::fmt_real(m.acc) + "," +
           detail::fmt_real(m.sparsity) + "," + detail::fmt_real(m.entropy_bits) + "," +
           std::to_string(m.coded_bytes) + "\n";
  }
  return out;
}

inline std::string run_name(const QatConfig& q) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%s_bw%d_lam%g_p%g_seed%llu", mode_name(q.mode), q.bitwidth, q.lambda, q.p,
                static_cast<unsigned long long>(q.seed));
  return buf;
}

/// <dir>/config.json, metrics.csv, record.csv, final.ckpt (quantized view),
/// assignments.ecqb.
inline void write_run_dir(const std::string& dir, const ExperimentConfig& cfg, const QatConfig& q,
                          const QatResult& res, const ReportRecord& record) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  ExperimentConfig snap = cfg;
  snap.seeds = {q.seed};
  snap.qat.mode = q.mode;
  snap.qat.bitwidths = {q.bitwidth};
  snap.qat.lambda_grid = {q.lambda};
  snap.qat.p_grid = {q.p};
  write_file((fs::path(dir) / "config.json").string(), serialize_config(snap));
  write_file((fs::path(dir) / "metrics.csv").string(), metrics_csv(res.metrics));
  write_file((fs::path(dir) / "record.csv").string(), report_csv({record}));
  save_checkpoint((fs::path(dir) / "final.ckpt").string(), res.session.q_model, q.seed);
  write_file((fs::path(dir) / "assignments.ecqb").string(), encode(coded_layers(res.session)).bytes);
}

// ---------------------------------------------------------------------------
// baseline

struct Baseline {
  SplitDataset data;
  Model model;
  double fp_acc = 0.0;  // test split
};

/// Data from the task, then the pretrained model: loaded from the configured
/// checkpoint, or initialized with `seed` and pretrained.
inline Baseline make_baseline(const ExperimentConfig& cfg, std::uint64_t seed) {
  Baseline b;
  b.data = prepare_inputs(load_task(cfg.task), cfg);
  if (!cfg.checkpoint.empty()) {
    b.model = load_checkpoint(cfg.checkpoint).model;
  } else {
    b.model = build_model(cfg, b.data.train.sample_shape(), b.data.train.n_classes, seed);
    b.model = pretrain(std::move(b.model), b.data.train, cfg.pretrain.epochs, cfg.pretrain.lr,
                       cfg.pretrain.batch_size, Rng(seed).next(), cfg.pretrain.weight_decay);
  }
  b.fp_acc = evaluate(b.model, b.data.test.features, b.data.test.labels);
  return b;
}

inline std::string model_label(const ExperimentConfig& cfg) { return cfg.preset.empty() ? "custom" : cfg.preset; }

// ---------------------------------------------------------------------------
// analysis

struct AnalysisResult {
  CorrelationReport report;
  RelevanceMap relevance;
  bool affine_invariant = true;
};

/// Weight relevances from a unit-seeded pass over `eval`, correlated with the
/// weights of each dense/conv layer. Also checks that c is unchanged when
/// both axes undergo positive affine maps.
inline AnalysisResult analyze_model(const Model& model, const Dataset& eval, const Composite& composite) {
  check_dataset(eval);
  Model m = model;
  auto [logits, cache] = forward(m, eval.features, false);
  AnalysisResult out;
  out.relevance = lrp_backward(m, cache, init_relevance(logits, eval.labels, SeedMode::unit), composite);
  std::vector<std::string> names;
  std::vector<Tensor> w, r;
  for (auto l : m.quantizable_layers()) {
    names.push_back("layer" + std::to_string(l) + "_" + kind_name(m.layers[l].spec.kind));
    w.push_back(m.layers[l].weight);
    r.push_back(out.relevance.weight[l]);
  }
  out.report = correlation_analysis(names, w, r);
  for (std::size_t k = 0; k < w.size(); ++k) {
    Tensor wa = w[k], ra = r[k];
    for (auto& v : wa.values()) v = 3.0 * v - 0.25;
    for (auto& v : ra.values()) v = 0.5 * v + 7.0;
    if (std::abs(pearson(wa.values(), ra.values()) - out.report.layers[k].pearson) > 1e-9)
      out.affine_invariant = false;
  }
  return out;
}

// ---------------------------------------------------------------------------
// report merging

/// Collects record.csv from every run directory below `root`.
inline std::vector<ReportRecord> collect_records(const std::string& root) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() == "record.csv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<ReportRecord> out;
  for (const auto& f : files)
    for (auto& r : parse_report_csv(read_file(f.string()))) out.push_back(std::move(r));
  return out;
}

// ---------------------------------------------------------------------------
// entry point

namespace detail {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<int> bits;
  std::optional<double> lambda;
  std::optional<double> p;
  std::optional<std::string> out_dir;
};

inline void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "experiment config (JSON)");
  app->add_option("--seed", f.seed, "seed (replaces the config's seed list)");
  app->add_option("--mode", f.mode, "quantization mode")->check(CLI::IsMember({"ecq", "ecqx"}));
  app->add_option("--bits", f.bits, "bit width")->check(CLI::Range(2, 5));
  app->add_option("--lambda", f.lambda, "lambda (replaces the lambda grid)");
  app->add_option("--p", f.p, "relevance sparsity cap p (replaces the p grid)");
  app->add_option("--out-dir", f.out_dir, "output directory");
}

inline ExperimentConfig resolve_config(const CommonFlags& f) {
  ExperimentConfig c = f.config.empty() ? ExperimentConfig{} : load_config(f.config);
  if (f.seed) c.seeds = {*f.seed};
  if (f.mode) c.qat.mode = parse_mode(*f.mode);
  if (f.bits) c.qat.bitwidths = {*f.bits};
  if (f.lambda) c.qat.lambda_grid = {*f.lambda};
  if (f.p) c.qat.p_grid = {*f.p};
  if (f.out_dir) c.out_dir = *f.out_dir;
  validate_config(c);
  return c;
}

inline std::string join(const std::string& a, const std::string& b) { return (std::filesystem::path(a) / b).string(); }

}  // namespace detail

inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Entropy-constrained, relevance-aware quantization of small neural networks"};
  app.require_subcommand(1);
  detail::CommonFlags f;

  auto* pretrain_cmd = app.add_subcommand("pretrain", "train the full-precision baseline and save it");
  detail::add_common(pretrain_cmd, f);

  auto* quantize_cmd = app.add_subcommand("quantize", "single quantization-aware training run");
  detail::add_common(quantize_cmd, f);

  auto* sweep_cmd = app.add_subcommand("sweep", "runs over the bit width, lambda and p grids");
  detail::add_common(sweep_cmd, f);
  bool compare = false;
  sweep_cmd->add_flag("--compare", compare, "run both ecq and ecqx at every grid point");

  auto* analyze_cmd = app.add_subcommand("analyze", "weight/relevance correlation of a checkpoint");
  detail::add_common(analyze_cmd, f);
  std::string ckpt_path;
  analyze_cmd->add_option("checkpoint", ckpt_path, "model checkpoint")->required();

  auto* encode_cmd = app.add_subcommand("encode", "quantize a checkpoint and write the bitstream");
  detail::add_common(encode_cmd, f);
  std::string encode_in, encode_out;
  encode_cmd->add_option("checkpoint", encode_in, "model checkpoint")->required();
  encode_cmd->add_option("output", encode_out, "bitstream file")->required();

  auto* decode_cmd = app.add_subcommand("decode", "decode a bitstream and summarize it");
  std::string decode_in, decode_json;
  decode_cmd->add_option("bitstream", decode_in, "bitstream file")->required();
  decode_cmd->add_option("--json", decode_json, "write assignment indices as JSON");

  auto* report_cmd = app.add_subcommand("report", "merge run records into report.csv and report.json");
  std::string report_root;
  report_cmd->add_option("--out-dir", report_root, "directory holding run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    if (pretrain_cmd->parsed()) {
      const auto cfg = detail::resolve_config(f);
      std::filesystem::create_directories(cfg.out_dir);
      nlohmann::json summary = nlohmann::json::array();
      for (auto seed : cfg.seeds) {
        const auto b = make_baseline(cfg, seed);
        const std::string path = detail::join(cfg.out_dir, "pretrained_seed" + std::to_string(seed) + ".ckpt");
        save_checkpoint(path, b.model, seed);
        summary.push_back({{"seed", seed}, {"checkpoint", path}, {"fp_acc", b.fp_acc}});
        out << "seed " << seed << ": test accuracy " << b.fp_acc << " -> " << path << "\n";
      }
      write_file(detail::join(cfg.out_dir, "baseline.json"), summary.dump(2) + "\n");
    } else if (quantize_cmd->parsed()) {
      const auto cfg = detail::resolve_config(f);
      const auto seed = cfg.seeds.front();
      const auto b = make_baseline(cfg, seed);
      const QatConfig q = qat_config(cfg, seed);
      const auto res = train_qat(b.model, b.data, q);
      const auto rec = make_record(model_label(cfg), q, res.metrics.back(), b.fp_acc,
                                   b.model.quantizable_weight_count());
      const std::string dir = detail::join(cfg.out_dir, run_name(q));
      write_run_dir(dir, cfg, q, res, rec);
      out << kReportHeader << "\n" << report_csv({rec}).substr(std::string(kReportHeader).size() + 1);
      out << "run directory: " << dir << "\n";
    } else if (sweep_cmd->parsed()) {
      const auto cfg = detail::resolve_config(f);
      std::filesystem::create_directories(cfg.out_dir);
      std::vector<ReportRecord> records;
      std::vector<QuantMode> modes{cfg.qat.mode};
      if (compare) modes = {QuantMode::ecq, QuantMode::ecqx};
      bool failed = false;
      for (auto seed : cfg.seeds) {
        const auto b = make_baseline(cfg, seed);
        for (auto mode : modes) {
          QatConfig base = qat_config(cfg, seed);
          base.mode = mode;
          auto results = sweep(b.model, b.data, base, cfg.qat.lambda_grid, cfg.qat.p_grid, cfg.qat.bitwidths,
                               model_label(cfg), cfg.threads);
          for (auto& r : results) {
            QatConfig q = base;
            q.bitwidth = r.point.bitwidth;
            q.lambda = r.point.lambda;
            q.p = r.point.p;
            const std::string dir = detail::join(cfg.out_dir, run_name(q));
            std::filesystem::create_directories(dir);
            if (!r.error.empty()) {
              failed = true;
              err << "run " << run_name(q) << " failed: " << r.error << "\n";
              write_file(detail::join(dir, "error.txt"), r.error + "\n");
            } else {
              write_file(detail::join(dir, "metrics.csv"), metrics_csv(r.metrics));
            }
            write_file(detail::join(dir, "record.csv"), report_csv({r.record}));
            records.push_back(r.record);
          }
        }
      }
      emit_report(records, detail::join(cfg.out_dir, "sweep.csv"), detail::join(cfg.out_dir, "sweep.json"));
      out << report_csv(records);
      if (failed) return 2;
    } else if (analyze_cmd->parsed()) {
      auto cfg = detail::resolve_config(f);
      const auto ck = load_checkpoint(ckpt_path);
      const auto data = prepare_inputs(load_task(cfg.task), cfg);
      const auto a = analyze_model(ck.model, data.val, Composite::standard());
      std::filesystem::create_directories(cfg.out_dir);
      nlohmann::json j{{"layers", to_json(a.report)}, {"affine_invariant", a.affine_invariant}};
      write_file(detail::join(cfg.out_dir, "analysis.json"), j.dump(2) + "\n");
      write_relevance_dump(detail::join(cfg.out_dir, "relevance"), ck.model, a.relevance, Composite::standard());
      for (const auto& l : a.report.layers) out << l.name << " pearson " << l.pearson << "\n";
      out << "affine invariance " << (a.affine_invariant ? "holds" : "VIOLATED") << "\n";
      if (!a.affine_invariant) return 2;
    } else if (encode_cmd->parsed()) {
      auto cfg = detail::resolve_config(f);
      const auto ck = load_checkpoint(encode_in);
      std::vector<CodedLayer> layers;
      for (auto l : ck.model.quantizable_layers()) {
        const Tensor& w = ck.model.layers[l].weight;
        const auto grid = make_grid(w.values(), cfg.qat.bitwidths.front());
        const auto nn = nearest_assign(w, grid);
        const auto lam = cfg.qat.lambda_grid.front();
        layers.push_back({"layer" + std::to_string(l) + "_" + kind_name(ck.model.layers[l].spec.kind), grid,
                          lam > 0.0 ? ecq_assign(w, grid, cluster_stats(nn, grid), lam) : nn});
      }
      const auto bs = encode(layers);
      write_file(encode_out, bs.bytes);
      out << encode_out << ": " << bs.size() << " bytes, " << layers.size() << " layers\n";
    } else if (decode_cmd->parsed()) {
      const auto layers = decode(read_file(decode_in));
      nlohmann::json j = nlohmann::json::array();
      for (const auto& l : layers) {
        out << l.name << " " << shape_str(l.assign.shape) << " bw " << l.grid.bitwidth << " step " << l.grid.step
            << " sparsity " << sparsity(l.assign, l.grid) << "\n";
        if (!decode_json.empty())
          j.push_back({{"name", l.name},
                       {"shape", l.assign.shape},
                       {"bitwidth", l.grid.bitwidth},
                       {"step", l.grid.step},
                       {"index", l.assign.index}});
      }
      if (!decode_json.empty()) write_file(decode_json, j.dump() + "\n");
    } else if (report_cmd->parsed()) {
      const auto records = collect_records(report_root);
      emit_report(records, detail::join(report_root, "report.csv"), detail::join(report_root, "report.json"));
      out << records.size() << " records -> " << detail::join(report_root, "report.csv") << "\n";
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace ecqx
