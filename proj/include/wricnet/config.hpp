#pragma once

// Run configuration: an INI-style file with [model], [training], [data] and
// [eval] sections. Every key has a default; unknown sections or keys are errors.
// Command-line overrides use the same "section.key=value" names.

#include "wricnet/evaluation.hpp"
#include "wricnet/training.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace wricnet {

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  // [model]
  ModelConfig model;
  std::uint64_t seed = 0;
  // [training]
  std::size_t epochs = 200;
  std::size_t batch_size = 1;
  LossWeights loss_weights;
  AdamOptions adam;
  ClassWeightMode class_weights = ClassWeightMode::per_tile;
  bool augment = true;
  // [data]
  std::string source = "synth"; // "synth" or a directory with A/, B/, label/
  std::size_t synth_pairs = 4;
  std::size_t synth_size = 1024;
  std::size_t tile_size = 256;
  std::vector<Tier> tiers{Tier::HR, Tier::MR, Tier::LR};
  std::string prepared_dir = "prepared";
  std::string train_list;  // optional file of source ids, one per line
  std::string test_list;
  // [eval]
  std::vector<double> fractions{0.05, 0.10};
  std::string checkpoint = "checkpoints/best";
  bool write_masks = false;

  void set(const std::string& section, const std::string& key, const std::string& value);
  std::vector<std::pair<std::string, std::string>> entries() const;
  void validate() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class N> N parse_number(const std::string& key, const std::string& v) {
  N out{};
  std::istringstream is(v);
  if constexpr (std::is_unsigned_v<N>) {
    if (!v.empty() && v[0] == '-') throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  if (!(is >> out) || !is.eof()) throw ConfigError(key + ": cannot parse '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline const char* class_weight_mode_name(ClassWeightMode m) {
  switch (m) {
  case ClassWeightMode::per_tile: return "per_tile";
  case ClassWeightMode::dataset: return "dataset";
  case ClassWeightMode::none: return "none";
  }
  return "?";
}

inline std::string join_numbers(const std::vector<double>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

template <class N> std::string num(N v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

} // namespace detail

inline void RunConfig::set(const std::string& section, const std::string& key, const std::string& value) {
  using namespace detail;
  const std::string full = section + "." + key;
  const std::string& v = value;
  if (section == "model") {
    if (key == "variant") model.variant = parse_variant(v);
    else if (key == "width_scale") model.width_scale = parse_number<double>(full, v);
    else if (key == "s" || key == "rich_scale_groups") model.rich_scale_groups = parse_number<std::size_t>(full, v);
    else if (key == "B" || key == "wri_branches") model.wri_branches = parse_number<std::size_t>(full, v);
    else if (key == "wri_width") model.wri_width = parse_number<std::size_t>(full, v);
    else if (key == "metric_depth") model.metric_depth = parse_number<std::size_t>(full, v);
    else if (key == "metric_growth") model.metric_growth = parse_number<std::size_t>(full, v);
    else if (key == "input_size") model.input_h = model.input_w = parse_number<std::size_t>(full, v);
    else if (key == "seed") seed = parse_number<std::uint64_t>(full, v);
    else throw ConfigError("unknown key " + full);
  } else if (section == "training") {
    if (key == "epochs") epochs = parse_number<std::size_t>(full, v);
    else if (key == "batch_size") batch_size = parse_number<std::size_t>(full, v);
    else if (key.size() == 7 && key.starts_with("lambda") && key[6] >= '1' && key[6] <= '5')
      loss_weights.lambda[static_cast<std::size_t>(key[6] - '1')] = parse_number<double>(full, v);
    else if (key == "lr") adam.lr = parse_number<double>(full, v);
    else if (key == "beta1") adam.beta1 = parse_number<double>(full, v);
    else if (key == "beta2") adam.beta2 = parse_number<double>(full, v);
    else if (key == "eps") adam.eps = parse_number<double>(full, v);
    else if (key == "class_weights") {
      if (v == "per_tile") class_weights = ClassWeightMode::per_tile;
      else if (v == "dataset") class_weights = ClassWeightMode::dataset;
      else if (v == "none") class_weights = ClassWeightMode::none;
      else throw ConfigError(full + ": expected per_tile, dataset or none");
    } else if (key == "augment") augment = parse_bool(full, v);
    else throw ConfigError("unknown key " + full);
  } else if (section == "data") {
    if (key == "source") source = v;
    else if (key == "synth_pairs") synth_pairs = parse_number<std::size_t>(full, v);
    else if (key == "synth_size") synth_size = parse_number<std::size_t>(full, v);
    else if (key == "tile_size") tile_size = parse_number<std::size_t>(full, v);
    else if (key == "tiers") {
      tiers.clear();
      for (const auto& t : split_list(v)) tiers.push_back(parse_tier(t));
    } else if (key == "prepared_dir") prepared_dir = v;
    else if (key == "train_list") train_list = v;
    else if (key == "test_list") test_list = v;
    else throw ConfigError("unknown key " + full);
  } else if (section == "eval") {
    if (key == "fractions") {
      fractions.clear();
      for (const auto& f : split_list(v)) fractions.push_back(parse_number<double>(full, f));
    } else if (key == "checkpoint") checkpoint = v;
    else if (key == "write_masks") write_masks = parse_bool(full, v);
    else throw ConfigError("unknown key " + full);
  } else {
    throw ConfigError("unknown section [" + section + "]");
  }
}

/// All settings in file order; parse(serialize(c)) reproduces c.
inline std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
  using namespace detail;
  std::string tier_list;
  for (std::size_t i = 0; i < tiers.size(); ++i) tier_list += (i ? "," : "") + std::string(tier_name(tiers[i]));
  std::vector<std::pair<std::string, std::string>> e{
      {"model.variant", std::string(variant_name(model.variant))},
      {"model.width_scale", num(model.width_scale)},
      {"model.s", num(model.rich_scale_groups)},
      {"model.B", num(model.wri_branches)},
      {"model.wri_width", num(model.wri_width)},
      {"model.metric_depth", num(model.metric_depth)},
      {"model.metric_growth", num(model.metric_growth)},
      {"model.input_size", num(model.input_h)},
      {"model.seed", num(seed)},
      {"training.epochs", num(epochs)},
      {"training.batch_size", num(batch_size)},
  };
  for (std::size_t k = 0; k < 5; ++k)
    e.emplace_back("training.lambda" + std::to_string(k + 1), num(loss_weights.lambda[k]));
  e.insert(e.end(), {
      {"training.lr", num(adam.lr)},
      {"training.beta1", num(adam.beta1)},
      {"training.beta2", num(adam.beta2)},
      {"training.eps", num(adam.eps)},
      {"training.class_weights", class_weight_mode_name(class_weights)},
      {"training.augment", augment ? "true" : "false"},
      {"data.source", source},
      {"data.synth_pairs", num(synth_pairs)},
      {"data.synth_size", num(synth_size)},
      {"data.tile_size", num(tile_size)},
      {"data.tiers", tier_list},
      {"data.prepared_dir", prepared_dir},
      {"data.train_list", train_list},
      {"data.test_list", test_list},
      {"eval.fractions", join_numbers(fractions)},
      {"eval.checkpoint", checkpoint},
      {"eval.write_masks", write_masks ? "true" : "false"},
  });
  return e;
}

inline void RunConfig::validate() const {
  model.validate();
  loss_weights.validate();
  if (batch_size != 1) throw ConfigError("training.batch_size: only batch size 1 is supported");
  if (!(adam.lr > 0) || !(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1))
    throw ConfigError("training: invalid Adam settings");
  if (tile_size == 0 || tile_size % 16 != 0) throw ConfigError("data.tile_size must be a positive multiple of 16");
  if (model.input_h != tile_size) throw ConfigError("model.input_size must equal data.tile_size");
  if (tiers.empty()) throw ConfigError("data.tiers is empty");
  for (double f : fractions)
    if (!(f > 0 && f <= 1)) throw ConfigError("eval.fractions must lie in (0, 1]");
}

inline void serialize(std::ostream& os, const RunConfig& cfg) {
  std::string section;
  for (const auto& [name, value] : cfg.entries()) {
    const auto dot = name.find('.');
    const std::string sec = name.substr(0, dot);
    if (sec != section) {
      os << (section.empty() ? "" : "\n") << '[' << sec << "]\n";
      section = sec;
    }
    os << name.substr(dot + 1) << " = " << value << '\n';
  }
}

/// Applies "section.key=value".
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw ConfigError("override must look like section.key=value, got '" + assignment + "'");
  cfg.set(detail::trim(assignment.substr(0, dot)), detail::trim(assignment.substr(dot + 1, eq - dot - 1)),
          detail::trim(assignment.substr(eq + 1)));
}

inline RunConfig parse_config(std::istream& is, const std::string& origin = "<config>") {
  RunConfig cfg;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section != "model" && section != "training" && section != "data" && section != "eval")
        throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside of any section");
    try {
      cfg.set(section, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse_config(in, path.string());
}

} // namespace wricnet
