#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "grdd/data.hpp"
#include "grdd/encoders.hpp"
#include "grdd/errors.hpp"
#include "grdd/eval.hpp"
#include "grdd/global_stage.hpp"
#include "grdd/meta_stage.hpp"
#include "grdd/pipeline.hpp"
#include "grdd/rng.hpp"

// Run configuration: flat dotted keys, one `key = value` per line, `#`
// starts a comment. Every key has a default; unknown keys are rejected.

namespace grdd {

struct ConfigKey {
  const char* key;
  const char* default_value;
  const char* help;
};

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      {"run.seed", "0", "root seed; every subsystem seed is derived from it"},
      {"run.output_dir", "runs/default", "run directory (config, metrics, checkpoints, manifest)"},

      {"data.source", "synthetic", "synthetic | class_folders | packed_binary"},
      {"data.path", "", "dataset location; relative paths resolve against $GRDD_DATA_ROOT when set"},
      {"data.synthetic.categories", "18", "synthetic category count"},
      {"data.synthetic.per_category", "60", "synthetic images per category"},
      {"data.synthetic.image_size", "16", "synthetic image side length"},
      {"data.synthetic.noise_sigma", "0.05", "synthetic pixel noise standard deviation"},
      {"data.split.train", "8", "number of train (base) categories"},
      {"data.split.val", "5", "number of validation categories"},
      {"data.split.test", "5", "number of test (novel) categories"},

      {"model.architecture", "tiny", "tiny | convnet4 | resnet12"},
      {"model.pooling", "global_average", "global_average | flatten"},
      {"model.student_architecture", "same", "same | tiny | convnet4 | resnet12"},

      {"stage1.batch_size", "64", "images per batch before rotation"},
      {"stage1.epochs", "90", "stage-1 epochs"},
      {"stage1.lr_init", "0.05", "initial stage-1 learning rate (0.1 is the other common preset)"},
      {"stage1.poly_power", "0.9", "poly schedule exponent"},
      {"stage1.weight_decay", "0.0005", "L2 weight decay"},
      {"stage1.momentum", "0.9", "SGD momentum"},

      {"stage2.lr2", "0.001", "stage-2 learning rate"},
      {"stage2.epochs", "15", "stage-2 epochs"},
      {"stage2.episodes_per_epoch", "100", "training episodes per epoch"},
      {"stage2.gamma", "0.2", "weight of the relatedness regularizer"},
      {"stage2.temperature", "4", "distillation temperature"},
      {"stage2.lr_decay_factor", "0.1", "learning-rate factor for the late epochs"},
      {"stage2.decay_start_epoch", "10", "first epoch (0-based) using the decayed rate"},
      {"stage2.ablation", "full", "full | no_rdd | no_rt | episodic_labels_only"},
      {"stage2.student_init", "from_stage1", "from_stage1 | random"},
      {"stage2.student_bn", "train", "train | eval batch-norm mode of the student's forward pass"},
      {"stage2.weight_decay", "0.0005", "L2 weight decay"},
      {"stage2.momentum", "0.9", "SGD momentum"},
      {"stage2.way", "5", "classes per training episode"},
      {"stage2.shot", "1", "supports per class in training episodes"},
      {"stage2.queries_per_class", "15", "queries per class in training episodes"},
      {"stage2.val_episodes", "100", "validation episodes per epoch (0 disables validation)"},

      {"eval.split", "test", "train | val | test"},
      {"eval.way", "5", "classes per evaluation episode"},
      {"eval.shot", "1", "supports per class in evaluation episodes"},
      {"eval.queries_per_class", "15", "queries per class in evaluation episodes"},
      {"eval.episodes", "600", "evaluation episodes"},
      {"eval.n_samples", "500", "rows written by export-embeddings"},

      {"ablate.modes", "cl,episodic_labels_only,full,no_rdd,no_rt", "comma-separated ablation rows"},
  };
  return keys;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_keys()) values_[k.key] = k.default_value;
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file '" + path.string() + "'");
    RunConfig c;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
      }
      c.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    return c;
  }

  void set(const std::string& key, const std::string& value) {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second = value;
  }

  // "key=value", as given to --set.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
    set(detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
  }

  const std::string& get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  long long get_int(const std::string& key) const {
    const std::string& v = get(key);
    try {
      std::size_t used = 0;
      const long long x = std::stoll(v, &used);
      if (used == v.size()) return x;
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
  }

  std::uint64_t get_u64(const std::string& key) const {
    const std::string& v = get(key);
    try {
      std::size_t used = 0;
      if (!v.empty() && v[0] != '-') {
        const unsigned long long x = std::stoull(v, &used);
        if (used == v.size()) return x;
      }
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }

  double get_double(const std::string& key) const {
    const std::string& v = get(key);
    try {
      std::size_t used = 0;
      const double x = std::stod(v, &used);
      if (used == v.size()) return x;
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
  }

  // Sorted `key = value` lines covering every key.
  std::string resolved_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
    return os.str();
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  std::uint64_t root_seed() const { return get_u64("run.seed"); }
  std::uint64_t seed_for(std::string_view subsystem) const { return derive_seed(root_seed(), subsystem); }

  std::filesystem::path output_dir() const { return get("run.output_dir"); }

  StageOneConfig stage_one() const {
    StageOneConfig c;
    c.batch_size = static_cast<int>(get_int("stage1.batch_size"));
    c.epochs = static_cast<int>(get_int("stage1.epochs"));
    c.lr_init = get_double("stage1.lr_init");
    c.poly_power = get_double("stage1.poly_power");
    c.weight_decay = get_double("stage1.weight_decay");
    c.momentum = get_double("stage1.momentum");
    c.seed = seed_for("stage1");
    c.validate();
    return c;
  }

  StageTwoConfig stage_two() const {
    StageTwoConfig c;
    c.lr2 = get_double("stage2.lr2");
    c.epochs = static_cast<int>(get_int("stage2.epochs"));
    c.episodes_per_epoch = static_cast<int>(get_int("stage2.episodes_per_epoch"));
    c.gamma = get_double("stage2.gamma");
    c.temperature = get_double("stage2.temperature");
    c.lr_decay_factor = get_double("stage2.lr_decay_factor");
    c.decay_start_epoch = static_cast<int>(get_int("stage2.decay_start_epoch"));
    c.ablation = parse_ablation(get("stage2.ablation"));
    c.student_init = parse_student_init(get("stage2.student_init"));
    const std::string& bn = get("stage2.student_bn");
    if (bn != "train" && bn != "eval") throw ConfigError("stage2.student_bn must be train or eval, got '" + bn + "'");
    c.student_mode = bn == "train" ? nn::Mode::train : nn::Mode::eval;
    c.weight_decay = get_double("stage2.weight_decay");
    c.momentum = get_double("stage2.momentum");
    c.episode = {static_cast<int>(get_int("stage2.way")), static_cast<int>(get_int("stage2.shot")),
                 static_cast<int>(get_int("stage2.queries_per_class"))};
    c.val_episode = {c.episode.way, static_cast<int>(get_int("eval.shot")),
                     static_cast<int>(get_int("eval.queries_per_class"))};
    c.val_episodes = static_cast<int>(get_int("stage2.val_episodes"));
    c.seed = seed_for("stage2");
    c.validate();
    return c;
  }

  EvalSpec eval_spec() const {
    EvalSpec s;
    s.split = parse_split(get("eval.split"));
    s.episode = {static_cast<int>(get_int("eval.way")), static_cast<int>(get_int("eval.shot")),
                 static_cast<int>(get_int("eval.queries_per_class"))};
    const long long n = get_int("eval.episodes");
    if (n < 1) throw ConfigError("eval.episodes must be >= 1");
    s.n_episodes = static_cast<std::size_t>(n);
    s.seed = seed_for("eval");
    if (s.episode.way < 1 || s.episode.shot < 1 || s.episode.queries_per_class < 1) {
      throw ConfigError("eval.way, eval.shot and eval.queries_per_class must be >= 1");
    }
    return s;
  }

  Architecture architecture() const { return parse_architecture(get("model.architecture")); }
  Pooling pooling() const { return parse_pooling(get("model.pooling")); }

  Architecture student_architecture() const {
    const std::string& s = get("model.student_architecture");
    return s == "same" ? architecture() : parse_architecture(s);
  }

  std::vector<std::string> ablation_rows() const {
    std::vector<std::string> out;
    std::stringstream ss(get("ablate.modes"));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = detail::trim(item);
      if (item.empty()) continue;
      ablation_label(item);
      out.push_back(item);
    }
    if (out.empty()) throw ConfigError("ablate.modes is empty");
    return out;
  }

  // Smallest per-category image count every configured episode needs.
  std::size_t min_per_category() const {
    const long long train = get_int("stage2.shot") + get_int("stage2.queries_per_class");
    const long long eval = get_int("eval.shot") + get_int("eval.queries_per_class");
    return static_cast<std::size_t>(std::max<long long>(1, std::max(train, eval)));
  }

  std::filesystem::path data_path() const {
    std::filesystem::path p = get("data.path");
    if (p.empty()) throw ConfigError("data.path is required when data.source is " + get("data.source"));
    if (p.is_relative()) {
      if (const char* root = std::getenv("GRDD_DATA_ROOT"); root && *root) p = std::filesystem::path(root) / p;
    }
    return p;
  }

  // Every typed accessor once, so a bad value fails before any work starts.
  void validate() const {
    stage_one();
    stage_two();
    eval_spec();
    architecture();
    pooling();
    student_architecture();
    ablation_rows();
    const std::string& src = get("data.source");
    if (src != "synthetic") parse_dataset_format(src);
    for (const char* k : {"data.synthetic.categories", "data.synthetic.per_category", "data.synthetic.image_size",
                          "data.split.train", "data.split.val", "data.split.test", "eval.n_samples"}) {
      if (get_int(k) < 0) throw ConfigError(std::string(k) + " must be >= 0");
    }
    if (get_double("data.synthetic.noise_sigma") < 0.0) throw ConfigError("data.synthetic.noise_sigma must be >= 0");
    const long long n_train = get_int("data.split.train"), n_val = get_int("data.split.val"),
                    n_test = get_int("data.split.test");
    if (src == "synthetic" && n_train + n_val + n_test != get_int("data.synthetic.categories")) {
      throw ConfigError("data.split.train + data.split.val + data.split.test must equal data.synthetic.categories");
    }
    if (get_int("stage2.way") > n_train) throw ConfigError("stage2.way exceeds data.split.train");
    const EvalSpec e = eval_spec();
    const long long n_eval = e.split == Split::train ? n_train : e.split == Split::val ? n_val : n_test;
    if (e.episode.way > n_eval) {
      throw ConfigError("eval.way exceeds the number of " + std::string(to_string(e.split)) + " categories");
    }
  }

 private:
  std::map<std::string, std::string> values_;
};

// Builds the dataset the config describes, with its category split applied.
inline Dataset load_configured_dataset(const RunConfig& c) {
  const std::string& src = c.get("data.source");
  const auto n_train = static_cast<std::size_t>(c.get_int("data.split.train"));
  const auto n_val = static_cast<std::size_t>(c.get_int("data.split.val"));
  const auto n_test = static_cast<std::size_t>(c.get_int("data.split.test"));
  Dataset ds = src == "synthetic"
                   ? make_synthetic(static_cast<int>(c.get_int("data.synthetic.categories")),
                                    static_cast<int>(c.get_int("data.synthetic.per_category")),
                                    static_cast<int>(c.get_int("data.synthetic.image_size")),
                                    c.get_double("data.synthetic.noise_sigma"), c.seed_for("data"))
                   : load_dataset(c.data_path(), parse_dataset_format(src), LoadOptions{c.min_per_category()});
  for (std::size_t cat = 0; cat < ds.category_count(); ++cat) {
    if (ds.indices_of(static_cast<int>(cat)).size() < c.min_per_category()) {
      throw DataError("category '" + ds.category_names()[cat] + "' has fewer than " +
                      std::to_string(c.min_per_category()) + " images");
    }
  }
  return split_categories(std::move(ds), n_train, n_val, n_test, c.seed_for("split"));
}

}  // namespace grdd
