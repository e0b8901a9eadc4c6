#pragma once

// `sdd` command-line surface. run() is the whole program minus main(), so
// tests drive it in-process with string streams.
//
// Exit codes: 0 success, 1 validation error (bad flag, config key or value,
// missing config file, failed verification), 2 runtime failure.

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sdd/bench.hpp"
#include "sdd/checkpoint.hpp"
#include "sdd/config.hpp"
#include "sdd/data.hpp"
#include "sdd/io.hpp"
#include "sdd/training.hpp"
#include "sdd/verify.hpp"

namespace sdd::cli {

namespace detail {

inline Dataset take_first(const Dataset& ds, std::size_t n) {
  if (n == 0 || n >= ds.count) return ds;
  Dataset out = ds;
  out.count = n;
  out.images.resize(n * ds.image_size());
  out.labels.resize(n);
  return out;
}

}  // namespace detail

/// Train and test sets per the data section; the test set uses train normalization.
inline DatasetSplit load_data(const AppConfig& cfg) {
  if (cfg.data.source == "synth") {
    return generate_ambiguous_split(cfg.synth, cfg.data.train_size, cfg.data.test_size);
  }
  for (const auto* p : {&cfg.data.train_images, &cfg.data.train_labels, &cfg.data.test_images, &cfg.data.test_labels}) {
    if (p->empty()) throw ConfigError("data.source = idx needs data.train_images/train_labels/test_images/test_labels");
  }
  DatasetSplit s;
  s.train = detail::take_first(load_idx(cfg.data.train_images, cfg.data.train_labels), cfg.data.train_size);
  s.test = detail::take_first(load_idx(cfg.data.test_images, cfg.data.test_labels), cfg.data.test_size);
  s.train.compute_normalization();
  s.test.mean = s.train.mean;
  s.test.std = s.train.std;
  s.test.num_classes = s.train.num_classes = std::max(s.train.num_classes, s.test.num_classes);
  return s;
}

inline ConvNetSpec net_spec(const std::vector<ConvBlockSpec>& blocks, const Dataset& ds) {
  if (ds.height != ds.width) throw DataError("images must be square");
  ConvNetSpec spec{ds.channels, ds.height, blocks, ds.num_classes};
  spec.validate();
  return spec;
}

/// Per-sample global row, then one row per (scale, cell), labels from the model's own maps.
template <class T>
std::string export_logits_csv(const ConvNet<T>& net, const Dataset& ds, const std::vector<std::size_t>& scales) {
  const std::size_t K = net.spec().num_classes;
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<float>::max_digits10);
  os << "sample_id,m,n,label,argmax";
  for (std::size_t k = 0; k < K; ++k) os << ",logit_" << k;
  os << '\n';
  const auto h = net.spec().feature_size();
  const auto cells = enumerate_cells(h, h, scales);
  BatchStream<T> stream(ds, std::min<std::size_t>(128, ds.count), 0, false);
  while (auto b = stream.next()) {
    const auto map = net.forward_map(b->images);
    const auto global = global_logits(map);
    const auto pooled = pool_cells(map.values, cells);
    const std::size_t N = cells.size();
    for (std::size_t i = 0; i < b->indices.size(); ++i) {
      const auto g = global.data().subspan(i * K, K);
      os << b->indices[i] << ",0,0,global," << argmax(g);
      for (auto v : g) os << ',' << v;
      os << '\n';
      for (std::size_t n = 0; n < N; ++n) {
        const auto c = pooled.data().subspan((i * N + n) * K, K);
        os << b->indices[i] << ',' << cells[n].scale << ',' << cells[n].index << ','
           << to_string(classify_cell(c, g)) << ',' << argmax(c);
        for (auto v : c) os << ',' << v;
        os << '\n';
      }
    }
    Tape<T>::active().reset();
  }
  return os.str();
}

inline std::string steps_csv(const RunMetrics& m) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << "epoch,step,ce_loss,distill_weight,sdd_total,d_con,d_com\n";
  for (const auto& s : m.steps) {
    os << s.epoch << ',' << s.step << ',' << s.ce_loss << ',' << s.distill_weight << ',' << s.sdd_total << ','
       << s.d_con << ',' << s.d_com << '\n';
  }
  return os.str();
}

inline nlohmann::json eval_json(const EvalResult& r) {
  return {{"accuracy", r.accuracy}, {"correct", r.correct}, {"total", r.total}, {"confusion", r.confusion}};
}

inline nlohmann::json timing_json(const TimingStats& t) {
  return {{"median_ms", t.median_ms}, {"p95_ms", t.p95_ms}, {"mean_ms", t.mean_ms}, {"batches", t.batches}};
}

namespace detail {

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::string teacher_path;
  std::string checkpoint_path;
  std::string output_path;
  std::string split = "test";
  std::string scratch;
  bool self_compare = false;
};

inline AppConfig resolve_config(const Options& o) {
  AppConfig cfg;
  if (!o.config_path.empty()) {
    if (!std::filesystem::exists(o.config_path)) throw ConfigError("config file not found: " + o.config_path);
    apply_config_file(cfg, o.config_path);
  }
  for (const auto& s : o.overrides) apply_override(cfg, s);
  cfg.train.validate();
  cfg.sdd.validate();
  cfg.synth.validate();
  return cfg;
}

inline std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline nlohmann::json run_summary(const std::string& command, const AppConfig& cfg, const RunMetrics& m) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : m.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_acc", e.train_acc}, {"test_acc", e.test_acc}});
  }
  return {{"command", command},
          {"config", config_to_json(cfg)},
          {"final_test_accuracy", m.final_test_accuracy()},
          {"epochs", epochs}};
}

inline int train_teacher_cmd(const Options& o, std::ostream& out) {
  const auto cfg = resolve_config(o);
  const auto data = load_data(cfg);
  const auto spec = net_spec(cfg.teacher_blocks, data.train);
  const auto r = sdd::train_teacher<float>(spec, data.train, &data.test, cfg.train);
  const std::filesystem::path dir(o.out_dir);
  save_checkpoint(r.model, dir / "model.ckpt");
  write_file_atomic(dir / "metrics.csv", r.metrics.to_csv());
  const auto summary = run_summary("train-teacher", cfg, r.metrics);
  write_file_atomic(dir / "summary.json", dump(summary));
  out << dump(summary);
  return 0;
}

inline int distill_cmd(const Options& o, std::ostream& out, std::ostream& err) {
  const auto cfg = resolve_config(o);
  const auto data = load_data(cfg);
  const auto teacher = load_checkpoint<float>(o.teacher_path);
  const auto spec = net_spec(cfg.student_blocks, data.train);
  auto tcfg = cfg.train;
  tcfg.distill = cfg.sdd;
  for (const auto& w : cfg.sdd.warnings()) err << "warning: " << w << '\n';
  const auto r = distill_student<float>(teacher, spec, data.train, &data.test, tcfg);
  const std::filesystem::path dir(o.out_dir);
  save_checkpoint(r.model, dir / "model.ckpt");
  write_file_atomic(dir / "metrics.csv", r.metrics.to_csv());
  write_file_atomic(dir / "steps.csv", steps_csv(r.metrics));
  auto summary = run_summary("distill", cfg, r.metrics);
  summary["teacher"] = o.teacher_path;
  write_file_atomic(dir / "summary.json", dump(summary));
  out << dump(summary);
  return 0;
}

inline const Dataset& pick_split(const DatasetSplit& d, const std::string& split) {
  if (split == "train") return d.train;
  if (split == "test") return d.test;
  throw ConfigError("--split must be train or test, got '" + split + "'");
}

inline int eval_cmd(const Options& o, std::ostream& out) {
  const auto cfg = resolve_config(o);
  const auto data = load_data(cfg);
  const auto net = load_checkpoint<float>(o.checkpoint_path);
  auto j = eval_json(evaluate(net, pick_split(data, o.split)));
  j["checkpoint"] = o.checkpoint_path;
  j["split"] = o.split;
  j["config"] = config_to_json(cfg);
  out << dump(j);
  return 0;
}

inline int export_cmd(const Options& o, std::ostream& out) {
  const auto cfg = resolve_config(o);
  const auto data = load_data(cfg);
  const auto net = load_checkpoint<float>(o.checkpoint_path);
  const auto& ds = pick_split(data, o.split);
  cfg.sdd.validate_for(net.spec().feature_size());
  write_file_atomic(o.output_path, export_logits_csv(net, ds, cfg.sdd.scales));
  std::size_t cells = 0;
  for (auto m : cfg.sdd.scales) cells += m * m;
  out << dump({{"output", o.output_path}, {"samples", ds.count}, {"rows", ds.count * (1 + cells)}});
  return 0;
}

inline int bench_cmd(const Options& o, std::ostream& out) {
  const auto cfg = resolve_config(o);
  const auto data = load_data(cfg);
  const auto teacher = o.teacher_path.empty()
                           ? ConvNet<float>::init(net_spec(cfg.teacher_blocks, data.train), cfg.train.seed + 1)
                           : load_checkpoint<float>(o.teacher_path);
  const auto spec = net_spec(cfg.student_blocks, data.train);
  const auto sdd_cfg = o.self_compare ? std::nullopt : std::optional<DistillConfig>(cfg.sdd);
  auto tcfg = cfg.train;
  tcfg.distill = cfg.sdd;
  const auto r = bench_loss<float>(teacher, spec, data.train, tcfg, sdd_cfg, cfg.bench.batches,
                                   cfg.bench.warmup_batches);
  const nlohmann::json j{{"base", timing_json(r.base)},
                         {"sdd", timing_json(r.sdd)},
                         {"median_ratio", r.median_ratio},
                         {"cells_per_sample", r.cells_per_sample},
                         {"self_compare", o.self_compare},
                         {"config", config_to_json(cfg)}};
  if (!o.out_dir.empty()) write_file_atomic(std::filesystem::path(o.out_dir) / "bench.json", dump(j));
  out << dump(j);
  return 0;
}

inline int verify_cmd(const Options& o, std::ostream& out) {
  const auto scratch = o.scratch.empty() ? std::filesystem::temp_directory_path() : std::filesystem::path(o.scratch);
  std::filesystem::create_directories(scratch);
  std::size_t passed = 0;
  const auto checks = verify::all_checks(scratch);
  for (const auto& c : checks) {
    const auto r = c.run();
    passed += r.passed;
    out << verify::format(r) << '\n' << std::flush;
  }
  out << "verify: " << passed << "/" << checks.size() << " checks passed\n";
  return passed == checks.size() ? 0 : 1;
}

}  // namespace detail

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Scale-decoupled distillation: train, distill, evaluate, verify, benchmark, export"};
  app.require_subcommand(1);
  detail::Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "flat `section.key = value` file");
    sub->add_option("--set", o.overrides, "override, section.key=value (repeatable)")->take_all();
  };
  auto* train = app.add_subcommand("train-teacher", "train a teacher on labels");
  common(train);
  train->add_option("--out", o.out_dir, "output directory")->required();

  auto* distill = app.add_subcommand("distill", "train a student against a teacher checkpoint");
  common(distill);
  distill->add_option("--teacher", o.teacher_path, "teacher checkpoint")->required();
  distill->add_option("--out", o.out_dir, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "accuracy and confusion matrix of a checkpoint");
  common(eval);
  eval->add_option("--checkpoint", o.checkpoint_path, "model checkpoint")->required();
  eval->add_option("--split", o.split, "train or test");

  auto* verify = app.add_subcommand("verify", "run the property suites");
  verify->add_option("--scratch", o.scratch, "directory for round-trip files");

  auto* bench = app.add_subcommand("bench", "per-batch step time, base loss vs scale-decoupled loss");
  common(bench);
  bench->add_option("--teacher", o.teacher_path, "teacher checkpoint (default: seeded random teacher)");
  bench->add_option("--out", o.out_dir, "directory for bench.json");
  bench->add_flag("--self", o.self_compare, "time the base loss against itself");

  auto* exp = app.add_subcommand("export-logits", "per-sample global and per-cell logits as CSV");
  common(exp);
  exp->add_option("--checkpoint", o.checkpoint_path, "model checkpoint")->required();
  exp->add_option("--output", o.output_path, "CSV path")->required();
  exp->add_option("--split", o.split, "train or test");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (train->parsed()) return detail::train_teacher_cmd(o, out);
    if (distill->parsed()) return detail::distill_cmd(o, out, err);
    if (eval->parsed()) return detail::eval_cmd(o, out);
    if (verify->parsed()) return detail::verify_cmd(o, out);
    if (bench->parsed()) return detail::bench_cmd(o, out);
    if (exp->parsed()) return detail::export_cmd(o, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  err << "error: no command\n";
  return 1;
}

}  // namespace sdd::cli
