// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0

#include "mmbeam/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "mmbeam/checkpoint.hpp"
#include "mmbeam/compression.hpp"
#include "mmbeam/config.hpp"
#include "mmbeam/errors.hpp"
#include "mmbeam/generation.hpp"
#include "mmbeam/seeding.hpp"
#include "mmbeam/tensor_io.hpp"
#include "mmbeam/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace mmbeam::cli {

namespace {

struct Options {
  std::vector<std::string> config_files;
  std::vector<std::string> sets;
  std::string out, seed, data, checkpoint, generator, ratio, calib_size, phases, target, epochs, preset;
  bool overwrite = false;
  bool iterative = false;
};

// Plain-text log mirrored to stderr.
class RunLog {
 public:
  RunLog(const fs::path& dir, std::ostream& err) : err_(err) {
    if (!dir.empty()) file_.open(dir / "run.log", std::ios::app);
  }
  void operator()(const std::string& line) {
    err_ << line << "\n";
    if (file_) file_ << line << "\n" << std::flush;
  }
  std::function<void(const std::string&)> fn() {
    return [this](const std::string& s) { (*this)(s); };
  }

 private:
  std::ostream& err_;
  std::ofstream file_;
};

void write_json(const fs::path& path, const json& j) { io::write_file(path, j.dump(2) + "\n"); }

// Creates the output directory, refusing to clobber unless overwrite is set.
fs::path prepare_out(const config::RunConfig& rc, bool required) {
  const fs::path out = rc.get("run.out");
  if (out.empty()) {
    if (required) throw ConfigError("an output directory is required (--out or run.out)");
    return {};
  }
  std::error_code ec;
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!rc.get_bool("run.overwrite")) {
      throw ConfigError("output directory " + out.string() + " is not empty; pass --overwrite to replace it");
    }
    fs::remove_all(out, ec);
    if (ec) throw DataError("cannot clear " + out.string() + ": " + ec.message());
  }
  fs::create_directories(out, ec);
  if (ec) throw DataError("cannot create " + out.string() + ": " + ec.message());
  io::write_file(out / "config.txt", rc.snapshot());
  return out;
}

struct LoadedData {
  data::DatasetIndex index;
  data::PreprocessConfig pre;
  std::vector<data::MultiModalSample> samples;
  data::Split split;

  std::vector<data::MultiModalSample> part(const std::string& which) const {
    std::vector<data::MultiModalSample> out;
    if (which == "all") return samples;
    const auto& rows = which == "train" ? split.train : split.val;
    if (which != "train" && which != "val") throw ConfigError("split must be val, train or all, got '" + which + "'");
    for (auto i : rows) out.push_back(samples[i]);
    return out;
  }
};

// Split settings recorded by `train` are reused unless given explicitly, so
// later commands see the same validation rows.
void inherit_split(config::RunConfig& rc, const json& meta) {
  if (!meta.contains("split")) return;
  const auto& sp = meta.at("split");
  if (!rc.has("seed") && sp.contains("seed")) rc.set("seed", std::to_string(sp.at("seed").get<std::uint64_t>()));
  if (!rc.has("data.train_fraction") && sp.contains("train_fraction")) {
    rc.set("data.train_fraction", json(sp.at("train_fraction").get<double>()).dump());
  }
  if (!rc.has("data.stratify") && sp.contains("stratify")) {
    rc.set("data.stratify", sp.at("stratify").get<bool>() ? "true" : "false");
  }
}

json split_meta(const config::RunConfig& rc) {
  const auto s = config::split_spec(rc);
  return {{"seed", s.seed}, {"train_fraction", s.train_fraction}, {"stratify", s.stratify_by_scenario}};
}

LoadedData load_data(const config::RunConfig& rc) {
  const auto dir = rc.get("data.dir");
  if (dir.empty()) throw ConfigError("a dataset is required (--data or data.dir)");
  LoadedData d;
  d.index = data::load_index(dir);
  if (d.index.size() < 2) throw DataError("dataset " + dir + " needs at least two samples");
  d.pre = data::preprocess_from_meta(d.index, data::PreprocessConfig{});
  d.samples = data::load_all(d.index, d.pre);
  d.split = data::split_dataset(d.index, config::split_spec(rc));
  return d;
}

std::string require(const config::RunConfig& rc, const std::string& key, const char* flag) {
  const auto v = rc.get(key);
  if (v.empty()) throw ConfigError(key + " is required (" + flag + ")");
  return v;
}

void check_inputs(const model::BeamTransFuser& m, const std::string& path, const data::PreprocessConfig& pre) {
  const auto& c = m->config();
  if (c.num_beams != pre.num_beams || c.camera_size != pre.camera_size || c.lidar_size != pre.lidar_size ||
      c.radar_size != pre.radar_size) {
    throw DataError("checkpoint " + path + " was built for different input sizes or beam count than the dataset");
  }
}

std::vector<data::MultiModalSample> calibration_subset(const std::vector<data::MultiModalSample>& train, int n,
                                                       std::uint64_t seed) {
  const auto order = data::shuffled_order(train.size(), derive_seed(seed, "calib"));
  std::vector<data::MultiModalSample> out;
  for (std::size_t i = 0; i < order.size() && static_cast<int>(out.size()) < n; ++i) out.push_back(train[order[i]]);
  return out;
}

// ---------------------------------------------------------------- commands

int cmd_synth(const config::RunConfig& rc, std::ostream& out, std::ostream& err) {
  const auto sc = config::synth_config(rc);
  const auto dir = prepare_out(rc, true);
  RunLog log(dir, err);
  const auto samples = data::synth_generate(sc);
  const auto pre = sc.preprocess();
  json meta = {{"generator", "synthetic"},
               {"synth", sc.to_json()},
               {"preprocess",
                {{"camera_size", pre.camera_size},
                 {"lidar_size", pre.lidar_size},
                 {"radar_size", pre.radar_size},
                 {"num_beams", pre.num_beams}}}};
  data::write_dataset(dir, samples, meta);
  log("wrote " + std::to_string(samples.size()) + " samples to " + dir.string());
  out << dir.string() << "\n";
  return 0;
}

int cmd_train(const config::RunConfig& rc, std::ostream& out, std::ostream& err) {
  auto d = load_data(rc);
  const auto mcfg = config::model_config(rc, &d.pre);
  const auto tcfg = config::train_config(rc);
  const auto dir = prepare_out(rc, true);
  RunLog log(dir, err);
  auto tr = d.part("train");
  auto va = d.part("val");
  log("train " + std::to_string(tr.size()) + " / val " + std::to_string(va.size()) + " samples, model " +
      mcfg.hash());
  auto m = train::init_model(mcfg, tcfg.seed);
  train::TrainOutputs o;
  o.dir = dir;
  o.log = log.fn();
  o.checkpoint_meta = {{"train", tcfg.to_json()}, {"split", split_meta(rc)}};
  const auto report = train::train(m, tr, va, tcfg, o);
  out << report.summary_json().dump(2) << "\n";
  return 0;
}

int cmd_eval(config::RunConfig rc, std::ostream& out, std::ostream& err) {
  json meta;
  auto m = ckpt::load_model(require(rc, "eval.checkpoint", "--checkpoint"), &meta);
  inherit_split(rc, meta);
  auto d = load_data(rc);
  check_inputs(m, rc.get("eval.checkpoint"), d.pre);
  const auto dir = prepare_out(rc, false);
  RunLog log(dir, err);
  const auto part = d.part(rc.get("eval.split"));
  const auto ev = train::evaluate(m, part, static_cast<int>(rc.get_int("train.eval_batch_size")));
  json j = {{"split", rc.get("eval.split")}, {"checkpoint", rc.get("eval.checkpoint")}, {"metrics", ev.metrics}};
  if (!dir.empty()) write_json(dir / "metrics.json", j);
  log("top1 " + std::to_string(ev.top1()) + " dba " + std::to_string(ev.dba()));
  out << j.dump(2) << "\n";
  return 0;
}

int cmd_prune(config::RunConfig rc, std::ostream& out, std::ostream& err) {
  const auto src = require(rc, "prune.checkpoint", "--checkpoint");
  json src_meta;
  auto m = ckpt::load_model(src, &src_meta);
  inherit_split(rc, src_meta);
  auto d = load_data(rc);
  check_inputs(m, src, d.pre);
  const auto opts = config::prune_options(rc);
  const auto dir = prepare_out(rc, true);
  RunLog log(dir, err);
  const auto tr = d.part("train");
  const auto va = d.part("val");
  const auto calib = calibration_subset(tr, static_cast<int>(rc.get_int("prune.calib_size")), rc.get_uint("seed"));
  log("pruning at r=" + std::to_string(opts.ratio) + " with " + std::to_string(calib.size()) + " calibration samples");
  compress::PruneResult res;
  if (rc.get("prune.importance") == "weight_norm") {
    if (opts.iterative) throw ConfigError("prune.iterative needs prune.importance = kl");
    res = compress::prune_with_report(m, compress::weight_norm_importance(m, opts.phases), opts);
  } else {
    res = compress::prune_model(m, calib, opts);
  }
  const int bs = static_cast<int>(rc.get_int("train.eval_batch_size"));
  const auto before = train::evaluate(m, va, bs);
  const auto after = train::evaluate(res.model, va, bs);
  json summary = res.summary_json();
  summary["source_checkpoint"] = src;
  summary["val_before"] = before.metrics;
  summary["val_after"] = after.metrics;
  summary["calib_size"] = calib.size();
  summary["iterative"] = opts.iterative;
  write_json(dir / "importance.json", res.importance.to_json());
  write_json(dir / "prune_spec.json", res.spec.to_json());
  write_json(dir / "prune_summary.json", summary);
  ckpt::save_model(dir / "pruned.mmck", res.model,
                   {{"epoch", src_meta.value("epoch", json(nullptr))},
                    {"seed", rc.get_uint("seed")},
                    {"metrics", after.metrics},
                    {"prune_ratio", opts.ratio},
                    {"pruned_fraction", res.pruned_fraction()},
                    {"split", split_meta(rc)}});
  log("fusion params " + std::to_string(res.fusion_before) + " -> " + std::to_string(res.fusion_after) +
      ", val top1 " + std::to_string(before.top1()) + " -> " + std::to_string(after.top1()));
  out << summary.dump(2) << "\n";
  return 0;
}

int cmd_finetune(config::RunConfig rc, std::ostream& out, std::ostream& err) {
  json src_meta;
  const auto src = require(rc, "finetune.checkpoint", "--checkpoint");
  auto m = ckpt::load_model(src, &src_meta);
  inherit_split(rc, src_meta);
  auto d = load_data(rc);
  check_inputs(m, src, d.pre);
  const auto tcfg = config::finetune_config(rc);
  const auto dir = prepare_out(rc, true);
  RunLog log(dir, err);
  const auto tr = d.part("train");
  const auto va = d.part("val");
  const auto initial = train::evaluate(m, va, tcfg.eval_batch_size);
  train::TrainOutputs o;
  o.dir = dir;
  o.log = log.fn();
  o.checkpoint_meta = {{"prune_ratio", src_meta.value("prune_ratio", 0.0)}, {"split", split_meta(rc)}};
  const auto report = compress::finetune(m, tr, va, tcfg, o);
  const auto final_eval = train::evaluate(m, va, tcfg.eval_batch_size);
  ckpt::save_model(dir / "finetuned.mmck", m,
                   {{"epoch", report.best_epoch},
                    {"seed", tcfg.seed},
                    {"metrics", final_eval.metrics},
                    {"prune_ratio", src_meta.value("prune_ratio", 0.0)},
                    {"split", split_meta(rc)}});
  json summary = {{"prune_ratio", src_meta.value("prune_ratio", 0.0)},
                  {"source_checkpoint", src},
                  {"val_post_prune", initial.metrics},
                  {"val_post_finetune", final_eval.metrics},
                  {"train", report.summary_json()}};
  write_json(dir / "finetune_summary.json", summary);
  out << summary.dump(2) << "\n";
  return 0;
}

int cmd_gen_train(const config::RunConfig& rc, std::ostream& out, std::ostream& err) {
  auto d = load_data(rc);
  const auto gcfg = config::cvae_config(rc, d.pre);
  const auto tcfg = config::cvae_train_config(rc);
  const auto dir = prepare_out(rc, true);
  RunLog log(dir, err);
  auto g = gen::init_cvae(gcfg, tcfg.seed);
  const auto history = gen::train_cvae(g, d.part("train"), tcfg, dir, log.fn());
  json j = json::array();
  for (const auto& e : history) j.push_back(e.to_json());
  json summary = {{"config", gcfg.to_json()}, {"train", tcfg.to_json()}, {"history", j},
                  {"checkpoint", (dir / "generator.mmck").string()}};
  write_json(dir / "gen_summary.json", summary);
  out << summary.dump(2) << "\n";
  return 0;
}

int cmd_impute(config::RunConfig rc, std::ostream& out, std::ostream& err) {
  json meta;
  auto m = ckpt::load_model(require(rc, "impute.checkpoint", "--checkpoint"), &meta);
  inherit_split(rc, meta);
  auto d = load_data(rc);
  check_inputs(m, rc.get("impute.checkpoint"), d.pre);
  auto g = gen::load_cvae(require(rc, "impute.generator", "--generator"));
  const auto dir = prepare_out(rc, false);
  RunLog log(dir, err);
  const auto part = d.part(rc.get("impute.split"));
  const auto r = gen::impute_and_evaluate(m, g, part, g->config().target, rc.get_uint("seed"),
                                          static_cast<int>(rc.get_int("train.eval_batch_size")));
  if (!dir.empty()) write_json(dir / "imputation.json", r.to_json());
  log("full " + std::to_string(r.full_accuracy) + " masked " + std::to_string(r.masked_accuracy) + " generated " +
      std::to_string(r.generated_accuracy));
  out << r.to_json().dump(2) << "\n";
  return 0;
}

int cmd_bench(const config::RunConfig& rc, std::ostream& out, std::ostream& err) {
  const auto ck = rc.get("bench.checkpoint");
  model::BeamTransFuser m = ck.empty() ? train::init_model(config::model_config(rc), rc.get_uint("seed"))
                                       : ckpt::load_model(ck);
  const auto dir = prepare_out(rc, false);
  RunLog log(dir, err);
  const int batch = static_cast<int>(rc.get_int("bench.batch_size"));
  const int runs = static_cast<int>(rc.get_int("bench.runs"));
  const int warmup = static_cast<int>(rc.get_int("bench.warmup"));
  if (batch < 1) throw ConfigError("bench.batch_size must be >= 1");
  json j;
  const auto ref = rc.get("bench.reference");
  if (ref.empty()) {
    j = compress::bench_latency(m, rc.get("bench.device"), batch, runs, warmup).to_json();
  } else {
    auto r = ckpt::load_model(ref);
    auto [a, b] = compress::bench_latency_paired(m, r, rc.get("bench.device"), batch, runs, warmup);
    j = {{"model", a.to_json()}, {"reference", b.to_json()}, {"faster_than_reference", compress::faster_than(a, b)}};
  }
  j["parameters"] = model::count_parameters(*m);
  if (!dir.empty()) write_json(dir / "latency.json", j);
  log("latency written");
  out << j.dump(2) << "\n";
  return 0;
}

int cmd_census(const config::RunConfig& rc, std::ostream& out, std::ostream& err) {
  model::BeamTransFuser m(config::model_config(rc));
  const auto census = model::param_census(*m);
  const auto dir = prepare_out(rc, false);
  RunLog log(dir, err);
  if (!dir.empty()) write_json(dir / "census.json", census.to_json());
  out << census.table();
  return 0;
}

void apply_flags(const std::string& cmd, const Options& o, config::RunConfig& rc) {
  for (const auto& f : o.config_files) rc.merge_file(f);
  std::string sets;
  for (const auto& s : o.sets) sets += s + "\n";
  rc.merge_text(sets, "--set");
  auto flag = [&](const std::string& v, const std::string& key) {
    if (!v.empty()) rc.set(key, v);
  };
  flag(o.out, "run.out");
  flag(o.seed, "seed");
  flag(o.data, "data.dir");
  flag(o.preset, "model.preset");
  if (o.overwrite) rc.set("run.overwrite", "true");
  const std::string section = cmd == "gen-train" ? "gen" : cmd;
  if (!o.checkpoint.empty()) {
    if (!config::schema().count(section + ".checkpoint")) throw ConfigError("--checkpoint is not used by " + cmd);
    rc.set(section + ".checkpoint", o.checkpoint);
  }
  flag(o.generator, "impute.generator");
  flag(o.ratio, "prune.ratio");
  flag(o.calib_size, "prune.calib_size");
  flag(o.phases, "prune.phases");
  if (o.iterative) rc.set("prune.iterative", "true");
  flag(o.target, "gen.target");
  if (!o.epochs.empty()) {
    const std::string key = section == "finetune" ? "finetune.epochs" : section == "gen" ? "gen.epochs" : "train.epochs";
    rc.set(key, o.epochs);
  }
  rc.validate();
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"mmbeam: multi-modal beam prediction, compression and modality imputation"};
  app.require_subcommand(1);
  Options o;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"synth", "write a synthetic correlated-scene dataset"},
      {"train", "train a beam model"},
      {"eval", "evaluate a checkpoint"},
      {"prune", "split, score and prune the fusion backbone"},
      {"finetune", "fine-tune a pruned checkpoint"},
      {"gen-train", "train the modality generator"},
      {"impute", "evaluate masked and generator-imputed inputs"},
      {"bench", "measure inference latency"},
      {"census", "print the parameter ledger"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    if (name == "gen-train") sub->alias("gen_train");
    sub->add_option("-c,--config", o.config_files, "config file(s), merged in order");
    sub->add_option("--set", o.sets, "key=value override");
    sub->add_option("-o,--out", o.out, "output directory");
    sub->add_flag("--overwrite", o.overwrite, "replace an existing output directory");
    sub->add_option("--seed", o.seed, "global seed");
    sub->add_option("--data", o.data, "dataset directory");
    sub->add_option("--preset", o.preset, "model preset: full | toy");
    sub->add_option("--epochs", o.epochs, "epochs for this command");
    if (name == "eval" || name == "prune" || name == "finetune" || name == "impute" || name == "bench") {
      sub->add_option("--checkpoint", o.checkpoint, "input checkpoint");
    }
    if (name == "impute") sub->add_option("--generator", o.generator, "generator checkpoint");
    if (name == "prune") {
      sub->add_option("--ratio", o.ratio, "global pruning ratio");
      sub->add_option("--calib-size", o.calib_size, "calibration samples");
      sub->add_option("--phases", o.phases, "phases to run, e.g. 1,2,3");
      sub->add_flag("--iterative", o.iterative, "recompute importance between phases");
    }
    if (name == "gen-train") sub->add_option("--target", o.target, "radar | lidar");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }
  std::string cmd;
  for (auto* sub : app.get_subcommands()) cmd = sub->get_name();

  try {
    config::RunConfig rc;
    apply_flags(cmd, o, rc);
    if (cmd == "synth") return cmd_synth(rc, out, err);
    if (cmd == "train") return cmd_train(rc, out, err);
    if (cmd == "eval") return cmd_eval(rc, out, err);
    if (cmd == "prune") return cmd_prune(rc, out, err);
    if (cmd == "finetune") return cmd_finetune(rc, out, err);
    if (cmd == "gen-train") return cmd_gen_train(rc, out, err);
    if (cmd == "impute") return cmd_impute(rc, out, err);
    if (cmd == "bench") return cmd_bench(rc, out, err);
    if (cmd == "census") return cmd_census(rc, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kConfig);
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kData);
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kData);
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kNumeric);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace mmbeam::cli
