#include "incseg/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstdlib>
#include <functional>
#include <set>
#include <sstream>

namespace incseg {

std::string to_string(CheckpointSelect s) { return s == CheckpointSelect::final ? "final" : "best"; }

CheckpointSelect parse_checkpoint_select(const std::string& s) {
  if (s == "final") return CheckpointSelect::final;
  if (s == "best") return CheckpointSelect::best;
  throw Error(ErrorKind::config, "checkpoint selection must be 'final' or 'best', got '" + s + "'");
}

fs::path ExperimentConfig::case_dir() const { return output / ("case" + std::to_string(case_id)); }
fs::path ExperimentConfig::data_dir() const { return data.empty() ? case_dir() / "data" : data; }

TrainConfig ExperimentConfig::stage_config(std::optional<Method> method) const {
  TrainConfig t = train;
  t.seed = seed;
  t.threads = threads;
  if (method) {
    t.method = *method;
  } else if (init_epochs >= 0) {
    t.epochs = init_epochs;
  }
  return t;
}

void ExperimentConfig::validate() const {
  if (case_id < 1 || case_id > 3) throw Error(ErrorKind::config, "experiment.case must be 1, 2 or 3");
  if (methods.empty()) throw Error(ErrorKind::config, "experiment.methods must not be empty");
  if (threads < 1 || parallel_methods < 1) throw Error(ErrorKind::config, "thread counts must be >= 1");
  if (output.empty()) throw Error(ErrorKind::config, "experiment.output must not be empty");
  synth.validate();
  train.validate();
  if (train.network.input_height != synth.height || train.network.input_width != synth.width) {
    throw Error(ErrorKind::config, "network input shape must match the synthetic slice shape");
  }
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(12);
  os << v;
  return os.str();
}

template <class T>
T parse_number(const std::string& key, const std::string& s) {
  std::istringstream is(s);
  T v{};
  is >> v;
  if (is.fail() || !is.eof()) throw Error(ErrorKind::config, "invalid value for " + key + ": '" + s + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw Error(ErrorKind::config, "invalid boolean for " + key + ": '" + s + "'");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::string pair_str(const std::pair<double, double>& p) { return fmt(p.first) + "," + fmt(p.second); }
std::pair<double, double> parse_pair(const std::string& key, const std::string& s) {
  const auto f = split_list(s);
  if (f.size() != 2) throw Error(ErrorKind::config, key + " expects two comma-separated numbers");
  return {parse_number<double>(key, f[0]), parse_number<double>(key, f[1])};
}

struct Key {
  std::string section;
  std::string name;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::string full() const { return section + "." + name; }
};

#define INCSEG_NUM(sec, key, field, T)                                                      \
  Key {                                                                                     \
    sec, key, [](const ExperimentConfig& c) { return fmt(static_cast<double>(c.field)); }, \
        [](ExperimentConfig& c, const std::string& v) { c.field = parse_number<T>(sec "." key, v); } \
  }
#define INCSEG_PAIR(key, field)                                                             \
  Key {                                                                                     \
    "synth", key, [](const ExperimentConfig& c) { return pair_str(c.synth.field); },        \
        [](ExperimentConfig& c, const std::string& v) { c.synth.field = parse_pair("synth." key, v); } \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> k = {
      Key{"experiment", "profile", [](const ExperimentConfig& c) { return c.profile; },
          [](ExperimentConfig&, const std::string&) {}},
      INCSEG_NUM("experiment", "case", case_id, int),
      Key{"experiment", "output", [](const ExperimentConfig& c) { return c.output.string(); },
          [](ExperimentConfig& c, const std::string& v) { c.output = v; }},
      Key{"experiment", "data", [](const ExperimentConfig& c) { return c.data.string(); },
          [](ExperimentConfig& c, const std::string& v) { c.data = v; }},
      Key{"experiment", "seed", [](const ExperimentConfig& c) { return std::to_string(c.seed); },
          [](ExperimentConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("experiment.seed", v); }},
      Key{"experiment", "methods",
          [](const ExperimentConfig& c) {
            std::string s;
            for (auto m : c.methods) s += (s.empty() ? "" : ",") + to_string(m);
            return s;
          },
          [](ExperimentConfig& c, const std::string& v) {
            c.methods.clear();
            for (const auto& m : split_list(v)) c.methods.push_back(parse_method(m));
          }},
      INCSEG_NUM("experiment", "init_epochs", init_epochs, int),
      INCSEG_NUM("experiment", "threads", threads, int),
      INCSEG_NUM("experiment", "parallel_methods", parallel_methods, int),
      Key{"experiment", "evaluate_checkpoint", [](const ExperimentConfig& c) { return to_string(c.evaluate_checkpoint); },
          [](ExperimentConfig& c, const std::string& v) { c.evaluate_checkpoint = parse_checkpoint_select(v); }},

      INCSEG_NUM("synth", "height", synth.height, int),
      INCSEG_NUM("synth", "width", synth.width, int),
      INCSEG_NUM("synth", "depth", synth.depth, int),
      Key{"synth", "spacing",
          [](const ExperimentConfig& c) {
            return fmt(c.synth.spacing[0]) + "," + fmt(c.synth.spacing[1]) + "," + fmt(c.synth.spacing[2]);
          },
          [](ExperimentConfig& c, const std::string& v) {
            const auto f = split_list(v);
            if (f.size() != 3) throw Error(ErrorKind::config, "synth.spacing expects three numbers");
            for (int i = 0; i < 3; ++i) c.synth.spacing[i] = parse_number<double>("synth.spacing", f[i]);
          }},
      INCSEG_PAIR("a_radius_inplane", a_radius_inplane),
      INCSEG_PAIR("a_radius_depth", a_radius_depth),
      INCSEG_PAIR("a_fraction", a_fraction),
      INCSEG_PAIR("b_extent", b_extent),
      INCSEG_PAIR("b_depth_extent", b_depth_extent),
      INCSEG_PAIR("b_thickness", b_thickness),
      INCSEG_NUM("synth", "b_curvature", synth.b_curvature, double),
      INCSEG_PAIR("b_fraction", b_fraction),
      INCSEG_NUM("synth", "noise", synth.noise, double),
      INCSEG_NUM("synth", "texture", synth.texture, double),
      INCSEG_NUM("synth", "smoothness", synth.smoothness, double),
      INCSEG_NUM("synth", "bias", synth.bias, double),
      INCSEG_NUM("synth", "max_retries", synth.max_retries, int),

      INCSEG_NUM("train", "alpha", train.alpha, double),
      INCSEG_NUM("train", "batch_size", train.batch_size, int),
      INCSEG_NUM("train", "epochs", train.epochs, int),
      INCSEG_NUM("train", "k_c", train.k_c, int),
      INCSEG_NUM("train", "k_r", train.k_r, int),
      INCSEG_NUM("train", "t_mc", train.t_mc, int),
      Key{"train", "optimizer", [](const ExperimentConfig& c) { return to_string(c.train.optimizer.kind); },
          [](ExperimentConfig& c, const std::string& v) { c.train.optimizer.kind = parse_optimizer(v); }},
      INCSEG_NUM("train", "learning_rate", train.optimizer.learning_rate, double),
      INCSEG_NUM("train", "temperature", train.temperature, double),
      Key{"train", "classification_loss", [](const ExperimentConfig& c) { return to_string(c.train.classification); },
          [](ExperimentConfig& c, const std::string& v) { c.train.classification = parse_classification_loss(v); }},
      Key{"train", "freeze_bn", [](const ExperimentConfig& c) { return std::string(c.train.freeze_bn ? "true" : "false"); },
          [](ExperimentConfig& c, const std::string& v) { c.train.freeze_bn = parse_bool("train.freeze_bn", v); }},
      Key{"train", "mixed_batches", [](const ExperimentConfig& c) { return std::string(c.train.mixed_batches ? "true" : "false"); },
          [](ExperimentConfig& c, const std::string& v) { c.train.mixed_batches = parse_bool("train.mixed_batches", v); }},
      Key{"train", "uncertainty", [](const ExperimentConfig& c) { return to_string(c.train.uncertainty); },
          [](ExperimentConfig& c, const std::string& v) { c.train.uncertainty = parse_uncertainty_functional(v); }},
      Key{"train", "aggregation", [](const ExperimentConfig& c) { return to_string(c.train.aggregation); },
          [](ExperimentConfig& c, const std::string& v) { c.train.aggregation = parse_uncertainty_aggregation(v); }},
      Key{"train", "coverage", [](const ExperimentConfig& c) { return to_string(c.train.coverage); },
          [](ExperimentConfig& c, const std::string& v) { c.train.coverage = parse_coverage_mode(v); }},
      INCSEG_NUM("train", "coverage_threshold", train.coverage_threshold, double),
      Key{"train", "content_network", [](const ExperimentConfig& c) { return to_string(c.train.content); },
          [](ExperimentConfig& c, const std::string& v) { c.train.content = parse_content_kind(v); }},
      INCSEG_NUM("train", "content_seed", train.content_seed, std::uint64_t),
      INCSEG_NUM("train", "validate_every", train.validate_every, int),

      INCSEG_NUM("network", "levels", train.network.levels, int),
      INCSEG_NUM("network", "base_filters", train.network.base_filters, int),
      INCSEG_NUM("network", "convs_per_level", train.network.convs_per_level, int),
      INCSEG_NUM("network", "dropout_rate", train.network.dropout_rate, double),
      INCSEG_NUM("network", "bn_momentum", train.network.bn_momentum, double),
  };
  return k;
}

#undef INCSEG_NUM
#undef INCSEG_PAIR

ExperimentConfig defaults_for(const std::string& profile) {
  ExperimentConfig c;
  c.profile = profile;
  if (profile == "desk") return c;
  if (profile == "full") {
    c.train = TrainConfig{};
    c.train.network.levels = 4;
    c.train.network.base_filters = 64;
    return c;
  }
  throw Error(ErrorKind::config, "experiment.profile must be 'desk' or 'full', got '" + profile + "'");
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& ini_text, const ConfigOverrides& overrides) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream is(ini_text);
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw Error(ErrorKind::config, std::string("config parse error: ") + e.what());
  }
  std::set<std::string> known;
  for (const auto& k : keys()) known.insert(k.full());
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw Error(ErrorKind::config, "key '" + section + "' outside any section");
    for (const auto& [name, _] : body) {
      if (!known.count(section + "." + name)) throw Error(ErrorKind::config, "unknown config key " + section + "." + name);
    }
  }
  for (const auto& [key, _] : overrides) {
    if (!known.count(key)) throw Error(ErrorKind::config, "unknown config key " + key);
  }
  std::string profile = tree.get<std::string>("experiment.profile", "desk");
  for (const auto& [key, value] : overrides) {
    if (key == "experiment.profile") profile = value;
  }
  ExperimentConfig cfg = defaults_for(profile);
  for (const auto& k : keys()) {
    if (auto v = tree.get_optional<std::string>(pt::ptree::path_type(k.full(), '.'))) k.set(cfg, *v);
  }
  if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0') cfg.output = root;
  for (const auto& [key, value] : overrides) {
    for (const auto& k : keys()) {
      if (k.full() == key) k.set(cfg, value);
    }
  }
  cfg.synth.seed = cfg.seed;
  cfg.train.network.input_height = cfg.synth.height;
  cfg.train.network.input_width = cfg.synth.width;
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const fs::path& path, const ConfigOverrides& overrides) {
  if (!fs::exists(path)) throw Error(ErrorKind::config, "config file " + path.string() + " not found");
  return parse_experiment_config(read_text_file(path), overrides);
}

std::string render_experiment_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  std::string section;
  for (const auto& k : keys()) {
    if (k.section != section) {
      os << (section.empty() ? "" : "\n") << '[' << k.section << "]\n";
      section = k.section;
    }
    os << k.name << " = " << k.get(cfg) << '\n';
  }
  return os.str();
}

json ExperimentConfig::to_json() const {
  json methods_json = json::array();
  for (auto m : methods) methods_json.push_back(to_string(m));
  return {{"case", case_id},
          {"output", output.string()},
          {"data", data_dir().string()},
          {"seed", seed},
          {"methods", methods_json},
          {"init_epochs", init_epochs},
          {"evaluate_checkpoint", to_string(evaluate_checkpoint)},
          {"profile", profile},
          {"synth", synth.to_json()},
          {"train", train.to_json()}};
}

}  // namespace incseg
