// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0

#include "mmbeam/config.hpp"

#include <charconv>
#include <sstream>

#include "mmbeam/errors.hpp"
#include "mmbeam/tensor_io.hpp"

namespace mmbeam::config {

namespace {

using VT = ValueType;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
std::optional<T> parse_num(const std::string& s) {
  T v{};
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) return std::nullopt;
  return v;
}

std::optional<bool> parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  return std::nullopt;
}

std::optional<std::vector<int>> parse_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto v = parse_num<int>(trim(item));
    if (!v) return std::nullopt;
    out.push_back(*v);
  }
  if (out.empty()) return std::nullopt;
  return out;
}

bool valid(VT t, const std::string& v) {
  switch (t) {
    case VT::kInt: return parse_num<std::int64_t>(v).has_value();
    case VT::kUint: return parse_num<std::uint64_t>(v).has_value();
    case VT::kReal: return parse_num<double>(v).has_value();
    case VT::kBool: return parse_bool(v).has_value();
    case VT::kIntList: return parse_list(v).has_value();
    case VT::kString: return true;
  }
  return false;
}

const char* type_name(VT t) {
  switch (t) {
    case VT::kInt: return "integer";
    case VT::kUint: return "unsigned integer";
    case VT::kReal: return "real";
    case VT::kBool: return "bool";
    case VT::kIntList: return "comma-separated integers";
    case VT::kString: return "string";
  }
  return "string";
}

[[noreturn]] void fail(const std::string& head, const std::vector<std::string>& problems) {
  std::string msg = head;
  for (const auto& p : problems) msg += "\n  " + p;
  throw ConfigError(msg);
}

}  // namespace

const std::map<std::string, KeySpec>& schema() {
  static const std::map<std::string, KeySpec> s = {
      {"seed", {VT::kUint, "0", "global seed; every random stream derives from it"}},
      {"run.out", {VT::kString, "", "output directory"}},
      {"run.overwrite", {VT::kBool, "false", "replace an existing output directory"}},

      {"data.dir", {VT::kString, "", "dataset directory holding index.csv"}},
      {"data.train_fraction", {VT::kReal, "0.9", "train share of the split"}},
      {"data.stratify", {VT::kBool, "true", "stratify the split by scenario"}},

      {"synth.num_samples", {VT::kInt, "2000", ""}},
      {"synth.num_beams", {VT::kInt, "8", ""}},
      {"synth.camera_size", {VT::kInt, "64", ""}},
      {"synth.lidar_size", {VT::kInt, "64", ""}},
      {"synth.radar_size", {VT::kInt, "32", ""}},
      {"synth.noise_camera", {VT::kReal, "0", ""}},
      {"synth.noise_lidar", {VT::kReal, "0", ""}},
      {"synth.noise_radar", {VT::kReal, "0", ""}},
      {"synth.noise_gps", {VT::kReal, "0", "metres"}},
      {"synth.num_scenarios", {VT::kInt, "4", ""}},
      {"synth.sector_jitter", {VT::kReal, "0.8", ""}},

      {"model.preset", {VT::kString, "full", "full | toy"}},
      {"model.stage_channels", {VT::kIntList, "", ""}},
      {"model.camera_blocks", {VT::kIntList, "", ""}},
      {"model.lidar_blocks", {VT::kIntList, "", ""}},
      {"model.radar_blocks", {VT::kIntList, "", ""}},
      {"model.embed_dims", {VT::kIntList, "", ""}},
      {"model.num_heads", {VT::kInt, "", ""}},
      {"model.ffn_ratio", {VT::kInt, "", ""}},
      {"model.num_layers", {VT::kInt, "", "encoder layers per fusion block"}},
      {"model.token_grid", {VT::kInt, "", ""}},
      {"model.position_embedding", {VT::kBool, "", ""}},
      {"model.scale_full_dim", {VT::kBool, "", ""}},
      {"model.gps_hidden", {VT::kInt, "", ""}},
      {"model.head_hidden", {VT::kIntList, "", ""}},
      {"model.num_beams", {VT::kInt, "", ""}},
      {"model.camera_size", {VT::kInt, "", ""}},
      {"model.lidar_size", {VT::kInt, "", ""}},
      {"model.radar_size", {VT::kInt, "", ""}},

      {"train.epochs", {VT::kInt, "30", ""}},
      {"train.learning_rate", {VT::kReal, "0.0001", ""}},
      {"train.batch_size", {VT::kInt, "32", ""}},
      {"train.focal_gamma", {VT::kReal, "2", ""}},
      {"train.focal_alpha", {VT::kReal, "1", ""}},
      {"train.device", {VT::kString, "cpu", ""}},
      {"train.eval_batch_size", {VT::kInt, "64", ""}},

      {"eval.checkpoint", {VT::kString, "", ""}},
      {"eval.split", {VT::kString, "val", "val | train | all"}},

      {"prune.checkpoint", {VT::kString, "", ""}},
      {"prune.ratio", {VT::kReal, "0.1", "global pruning ratio r in [0, 1)"}},
      {"prune.calib_size", {VT::kInt, "256", "calibration samples for KL importance"}},
      {"prune.phases", {VT::kIntList, "1,2,3", ""}},
      {"prune.iterative", {VT::kBool, "false", "recompute importance between phases"}},
      {"prune.importance", {VT::kString, "kl", "kl | weight_norm"}},
      {"prune.batch_size", {VT::kInt, "256", "calibration batch size"}},

      {"finetune.checkpoint", {VT::kString, "", ""}},
      {"finetune.epochs", {VT::kInt, "10", ""}},
      {"finetune.learning_rate", {VT::kReal, "", "defaults to train.learning_rate"}},

      {"gen.target", {VT::kString, "radar", "radar | lidar"}},
      {"gen.latent_dim", {VT::kInt, "128", ""}},
      {"gen.condition_dim", {VT::kInt, "256", ""}},
      {"gen.beta_recon", {VT::kReal, "1", ""}},
      {"gen.beta_kl", {VT::kReal, "1", ""}},
      {"gen.epochs", {VT::kInt, "30", ""}},
      {"gen.learning_rate", {VT::kReal, "0.001", ""}},
      {"gen.batch_size", {VT::kInt, "32", ""}},

      {"impute.checkpoint", {VT::kString, "", "beam model"}},
      {"impute.generator", {VT::kString, "", "generator checkpoint"}},
      {"impute.split", {VT::kString, "val", "val | train | all"}},

      {"bench.checkpoint", {VT::kString, "", "empty: untrained model from model.*"}},
      {"bench.reference", {VT::kString, "", "optional second checkpoint for a paired comparison"}},
      {"bench.batch_size", {VT::kInt, "1", ""}},
      {"bench.runs", {VT::kInt, "30", ""}},
      {"bench.warmup", {VT::kInt, "5", ""}},
      {"bench.device", {VT::kString, "cpu", ""}},
  };
  return s;
}

void RunConfig::merge_text(const std::string& text, const std::string& source) {
  std::vector<std::string> problems;
  std::map<std::string, std::string> parsed;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const auto where = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) {
      problems.push_back(where + ": expected 'key = value'");
      continue;
    }
    const auto key = trim(line.substr(0, eq));
    if (!schema().count(key)) {
      problems.push_back(where + ": unknown key '" + key + "'");
      continue;
    }
    parsed[key] = trim(line.substr(eq + 1));
  }
  if (!problems.empty()) fail("invalid configuration:", problems);
  for (auto& [k, v] : parsed) values_[k] = v;
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  merge_text(io::read_file(path), path.string());
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!schema().count(key)) throw ConfigError("invalid configuration:\n  unknown key '" + key + "'");
  values_[key] = value;
}

void RunConfig::validate() const {
  std::vector<std::string> problems;
  for (const auto& [k, v] : values_) {
    const auto& spec = schema().at(k);
    if (!valid(spec.type, v)) {
      problems.push_back(k + " = '" + v + "' is not a valid " + type_name(spec.type));
    }
  }
  if (!problems.empty()) fail("invalid configuration:", problems);
}

bool RunConfig::has(const std::string& key) const { return values_.count(key) > 0; }

std::string RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it != values_.end()) return it->second;
  auto s = schema().find(key);
  if (s == schema().end()) throw ConfigError("unknown key '" + key + "'");
  return s->second.default_value;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
  auto v = parse_num<std::int64_t>(get(key));
  if (!v) throw ConfigError(key + " = '" + get(key) + "' is not an integer");
  return *v;
}

std::uint64_t RunConfig::get_uint(const std::string& key) const {
  auto v = parse_num<std::uint64_t>(get(key));
  if (!v) throw ConfigError(key + " = '" + get(key) + "' is not an unsigned integer");
  return *v;
}

double RunConfig::get_real(const std::string& key) const {
  auto v = parse_num<double>(get(key));
  if (!v) throw ConfigError(key + " = '" + get(key) + "' is not a real number");
  return *v;
}

bool RunConfig::get_bool(const std::string& key) const {
  auto v = parse_bool(get(key));
  if (!v) throw ConfigError(key + " = '" + get(key) + "' is not a bool");
  return *v;
}

std::vector<int> RunConfig::get_int_list(const std::string& key) const {
  auto v = parse_list(get(key));
  if (!v) throw ConfigError(key + " = '" + get(key) + "' is not a list of integers");
  return *v;
}

std::string RunConfig::snapshot() const {
  std::ostringstream os;
  for (const auto& [k, spec] : schema()) {
    const auto v = get(k);
    if (!v.empty()) os << k << " = " << v << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------- typed views

namespace {

template <std::size_t N>
void list_into(const RunConfig& rc, const std::string& key, std::array<int, N>& out,
               std::vector<std::string>& problems) {
  if (!rc.has(key)) return;
  const auto v = rc.get_int_list(key);
  if (v.size() != N) {
    problems.push_back(key + " needs " + std::to_string(N) + " entries");
    return;
  }
  std::copy(v.begin(), v.end(), out.begin());
}

}  // namespace

model::ModelConfig model_config(const RunConfig& rc, const data::PreprocessConfig* data) {
  const auto preset = rc.get("model.preset");
  model::ModelConfig c;
  if (preset == "toy") {
    c = model::ModelConfig::toy();
  } else if (preset != "full") {
    throw ConfigError("invalid configuration:\n  model.preset = '" + preset + "' (expected full or toy)");
  }
  std::vector<std::string> problems;
  list_into(rc, "model.stage_channels", c.stage_channels, problems);
  list_into(rc, "model.camera_blocks", c.camera_blocks, problems);
  list_into(rc, "model.lidar_blocks", c.lidar_blocks, problems);
  list_into(rc, "model.radar_blocks", c.radar_blocks, problems);
  list_into(rc, "model.embed_dims", c.fusion.embed_dims, problems);
  auto int_key = [&](const char* k, int& dst) {
    if (rc.has(k)) dst = static_cast<int>(rc.get_int(k));
  };
  int_key("model.num_heads", c.fusion.num_heads);
  int_key("model.ffn_ratio", c.fusion.ffn_ratio);
  int_key("model.num_layers", c.fusion.num_layers);
  int_key("model.token_grid", c.fusion.token_grid);
  int_key("model.gps_hidden", c.gps_hidden);
  if (rc.has("model.position_embedding")) c.fusion.position_embedding = rc.get_bool("model.position_embedding");
  if (rc.has("model.scale_full_dim")) c.fusion.scale_full_dim = rc.get_bool("model.scale_full_dim");
  if (rc.has("model.head_hidden")) c.head_hidden = rc.get_int_list("model.head_hidden");
  if (data) {
    c.num_beams = data->num_beams;
    c.camera_size = data->camera_size;
    c.lidar_size = data->lidar_size;
    c.radar_size = data->radar_size;
  }
  int_key("model.num_beams", c.num_beams);
  int_key("model.camera_size", c.camera_size);
  int_key("model.lidar_size", c.lidar_size);
  int_key("model.radar_size", c.radar_size);
  if (data && (c.num_beams != data->num_beams || c.camera_size != data->camera_size ||
               c.lidar_size != data->lidar_size || c.radar_size != data->radar_size)) {
    problems.push_back("model input sizes / num_beams disagree with the dataset preprocessing");
  }
  if (!problems.empty()) fail("invalid configuration:", problems);
  c.validate();
  return c;
}

data::SyntheticSceneConfig synth_config(const RunConfig& rc) {
  data::SyntheticSceneConfig s;
  s.num_samples = static_cast<int>(rc.get_int("synth.num_samples"));
  s.num_beams = static_cast<int>(rc.get_int("synth.num_beams"));
  s.camera_size = static_cast<int>(rc.get_int("synth.camera_size"));
  s.lidar_size = static_cast<int>(rc.get_int("synth.lidar_size"));
  s.radar_size = static_cast<int>(rc.get_int("synth.radar_size"));
  s.noise_camera = rc.get_real("synth.noise_camera");
  s.noise_lidar = rc.get_real("synth.noise_lidar");
  s.noise_radar = rc.get_real("synth.noise_radar");
  s.noise_gps = rc.get_real("synth.noise_gps");
  s.num_scenarios = static_cast<int>(rc.get_int("synth.num_scenarios"));
  s.sector_jitter = rc.get_real("synth.sector_jitter");
  s.seed = rc.get_uint("seed");
  std::vector<std::string> problems;
  if (s.num_samples < 1) problems.push_back("synth.num_samples must be >= 1");
  if (s.num_beams < 2) problems.push_back("synth.num_beams must be >= 2");
  if (s.camera_size < 8 || s.lidar_size < 8 || s.radar_size < 8) problems.push_back("synth sizes must be >= 8");
  if (s.num_scenarios < 1) problems.push_back("synth.num_scenarios must be >= 1");
  if (s.noise_camera < 0 || s.noise_lidar < 0 || s.noise_radar < 0 || s.noise_gps < 0) {
    problems.push_back("synth noise levels must be >= 0");
  }
  if (s.sector_jitter < 0 || s.sector_jitter > 1) problems.push_back("synth.sector_jitter must be in [0, 1]");
  if (!problems.empty()) fail("invalid configuration:", problems);
  return s;
}

train::TrainConfig train_config(const RunConfig& rc) {
  train::TrainConfig t;
  t.epochs = static_cast<int>(rc.get_int("train.epochs"));
  t.learning_rate = rc.get_real("train.learning_rate");
  t.batch_size = static_cast<int>(rc.get_int("train.batch_size"));
  t.focal_gamma = rc.get_real("train.focal_gamma");
  t.focal_alpha = rc.get_real("train.focal_alpha");
  t.device = rc.get("train.device");
  t.eval_batch_size = static_cast<int>(rc.get_int("train.eval_batch_size"));
  t.seed = rc.get_uint("seed");
  if (t.epochs < 1) throw ConfigError("invalid configuration:\n  train.epochs must be >= 1");
  if (!(t.learning_rate > 0)) throw ConfigError("invalid configuration:\n  train.learning_rate must be > 0");
  t.validate();
  return t;
}

train::TrainConfig finetune_config(const RunConfig& rc) {
  auto t = train_config(rc);
  t.epochs = static_cast<int>(rc.get_int("finetune.epochs"));
  if (rc.has("finetune.learning_rate")) t.learning_rate = rc.get_real("finetune.learning_rate");
  t.validate();
  return t;
}

compress::PruneOptions prune_options(const RunConfig& rc) {
  compress::PruneOptions o;
  o.ratio = rc.get_real("prune.ratio");
  const auto phases = rc.get_int_list("prune.phases");
  o.phases = std::set<int>(phases.begin(), phases.end());
  o.iterative = rc.get_bool("prune.iterative");
  o.batch_size = static_cast<int>(rc.get_int("prune.batch_size"));
  std::vector<std::string> problems;
  if (!(o.ratio >= 0 && o.ratio < 1)) problems.push_back("prune.ratio must be in [0, 1)");
  for (int p : o.phases) {
    if (p < 1 || p > 3) problems.push_back("prune.phases entries must be 1, 2 or 3");
  }
  if (rc.get_int("prune.calib_size") < 1) problems.push_back("prune.calib_size must be >= 1");
  if (o.batch_size < 1) problems.push_back("prune.batch_size must be >= 1");
  const auto imp = rc.get("prune.importance");
  if (imp != "kl" && imp != "weight_norm") problems.push_back("prune.importance must be kl or weight_norm");
  if (!problems.empty()) fail("invalid configuration:", problems);
  return o;
}

gen::CvaeConfig cvae_config(const RunConfig& rc, const data::PreprocessConfig& shapes) {
  gen::CvaeConfig c;
  const auto target = rc.get("gen.target");
  if (target == "camera") {
    throw ConfigError("gen.target = camera: camera generation is not supported; choose radar or lidar");
  }
  if (target != "radar" && target != "lidar") {
    throw ConfigError("invalid configuration:\n  gen.target = '" + target + "' (expected radar or lidar)");
  }
  c.target = data::parse_modality(target);
  c.latent_dim = static_cast<int>(rc.get_int("gen.latent_dim"));
  c.condition_dim = static_cast<int>(rc.get_int("gen.condition_dim"));
  c.beta_recon = rc.get_real("gen.beta_recon");
  c.beta_kl = rc.get_real("gen.beta_kl");
  c.shapes = shapes;
  c.validate();
  return c;
}

gen::CvaeTrainConfig cvae_train_config(const RunConfig& rc) {
  gen::CvaeTrainConfig t;
  t.epochs = static_cast<int>(rc.get_int("gen.epochs"));
  t.learning_rate = rc.get_real("gen.learning_rate");
  t.batch_size = static_cast<int>(rc.get_int("gen.batch_size"));
  t.seed = rc.get_uint("seed");
  t.validate();
  return t;
}

data::SplitSpec split_spec(const RunConfig& rc) {
  data::SplitSpec s;
  s.train_fraction = rc.get_real("data.train_fraction");
  s.stratify_by_scenario = rc.get_bool("data.stratify");
  s.seed = rc.get_uint("seed");
  if (!(s.train_fraction > 0 && s.train_fraction < 1)) {
    throw ConfigError("invalid configuration:\n  data.train_fraction must be in (0, 1)");
  }
  return s;
}

}  // namespace mmbeam::config
