#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ngvi/estimators.hpp"
#include "ngvi/io.hpp"
#include "ngvi/models.hpp"
#include "ngvi/optimizers.hpp"

namespace ngvi::harness {

using Json = nlohmann::ordered_json;

/// Invalid configuration. what() reads "<file>:<line>: <message>".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& file, int line, const std::string& msg)
      : std::runtime_error(file + ":" + std::to_string(line) + ": " + msg), line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

namespace detail {

inline bool next_is_colon(std::string_view text, std::size_t pos) {
  while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
  return pos < text.size() && text[pos] == ':';
}

/**
 * Line of every object key and every array element that opens a container,
 * keyed by JSON-pointer-like path ("/optimizer/beta", "/bench/problems/0").
 * Assumes the text already parsed as JSON.
 */
inline std::map<std::string, int> key_lines(std::string_view text) {
  struct Frame {
    bool object;
    std::string path;
    std::size_t index = 0;
  };
  std::map<std::string, int> out;
  std::vector<Frame> stack;
  std::string pending;
  int line = 1;
  const auto value_path = [&]() -> std::string {
    if (stack.empty()) return "";
    if (stack.back().object) return pending;
    return stack.back().path + "/" + std::to_string(stack.back().index);
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (ch == '\n') {
      ++line;
    } else if (ch == '"') {
      std::size_t j = i + 1;
      std::string s;
      while (j < text.size() && text[j] != '"') {
        if (text[j] == '\\' && j + 1 < text.size()) s += text[j++];
        s += text[j++];
      }
      if (!stack.empty() && stack.back().object && next_is_colon(text, j + 1)) {
        pending = stack.back().path + "/" + s;
        out[pending] = line;
      }
      i = j;
    } else if (ch == '{' || ch == '[') {
      const std::string p = value_path();
      if (!stack.empty() && !stack.back().object) out[p] = line;
      stack.push_back({ch == '{', p});
    } else if (ch == '}' || ch == ']') {
      if (!stack.empty()) stack.pop_back();
    } else if (ch == ',') {
      if (!stack.empty() && !stack.back().object) ++stack.back().index;
    }
  }
  return out;
}

inline std::string dotted(const std::string& path) {
  std::string out = path.empty() ? path : path.substr(1);
  for (auto& c : out) {
    if (c == '/') c = '.';
  }
  return out.empty() ? "<root>" : out;
}

}  // namespace detail

/// Parsed JSON text plus the source positions needed for error messages.
class ConfigDocument {
 public:
  ConfigDocument(std::string text, std::string file) : file_(std::move(file)) {
    try {
      root_ = Json::parse(text);
    } catch (const Json::parse_error& e) {
      int line = 1;
      const std::size_t end = std::min<std::size_t>(e.byte, text.size());
      for (std::size_t i = 0; i + 1 < end; ++i) {
        if (text[i] == '\n') ++line;
      }
      std::string msg = e.what();
      if (const auto p = msg.find("parse error"); p != std::string::npos) msg = msg.substr(p);
      throw ConfigError(file_, line, "invalid JSON: " + msg);
    }
    lines_ = detail::key_lines(text);
    if (!root_.is_object()) throw ConfigError(file_, 1, "top level must be an object");
  }

  static ConfigDocument load(const std::filesystem::path& path) {
    std::string text;
    try {
      text = read_file(path);
    } catch (const std::exception&) {
      throw ConfigError(path.string(), 0, "cannot read config file");
    }
    return ConfigDocument(std::move(text), path.string());
  }

  const Json& root() const noexcept { return root_; }
  const std::string& file() const noexcept { return file_; }

  // Line of the deepest recorded ancestor of path.
  int line_of(std::string path) const {
    for (;;) {
      if (auto it = lines_.find(path); it != lines_.end()) return it->second;
      const auto slash = path.rfind('/');
      if (slash == std::string::npos || path.empty()) return 1;
      path.resize(slash);
    }
  }

  [[noreturn]] void fail(const std::string& path, const std::string& msg) const {
    throw ConfigError(file_, line_of(path), detail::dotted(path) + ": " + msg);
  }

 private:
  Json root_;
  std::string file_;
  std::map<std::string, int> lines_;
};

/// Typed, position-aware view of one JSON object. Unknown keys are errors.
class Section {
 public:
  Section(const ConfigDocument& doc, const Json& obj, std::string path)
      : doc_(&doc), obj_(&obj), path_(std::move(path)) {
    if (!obj.is_object()) doc.fail(path_, "expected an object");
  }

  const std::string& path() const noexcept { return path_; }
  std::string child(const std::string& key) const { return path_ + "/" + key; }
  bool has(const std::string& key) const { return obj_->contains(key); }
  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    doc_->fail(child(key), msg);
  }

  void allow_only(std::initializer_list<std::string_view> keys) const {
    const std::set<std::string_view> ok(keys);
    for (const auto& [k, _] : obj_->items()) {
      if (!ok.contains(k)) doc_->fail(child(k), "unknown key");
    }
  }

  Section section(const std::string& key) const {
    if (!has(key)) doc_->fail(path_, "missing section '" + key + "'");
    return {*doc_, obj_->at(key), child(key)};
  }

  const Json& raw(const std::string& key) const { return obj_->at(key); }

  double number(const std::string& key, std::optional<double> def = {}) const {
    if (!has(key)) return required(key, def);
    const auto& v = obj_->at(key);
    if (!v.is_number()) fail(key, "expected a number");
    return v.get<double>();
  }

  std::uint64_t count(const std::string& key, std::optional<std::uint64_t> def = {}) const {
    if (!has(key)) return required(key, def);
    const auto& v = obj_->at(key);
    if (!v.is_number_unsigned()) fail(key, "expected a non-negative integer");
    return v.get<std::uint64_t>();
  }

  bool flag(const std::string& key, std::optional<bool> def = {}) const {
    if (!has(key)) return required(key, def);
    const auto& v = obj_->at(key);
    if (!v.is_boolean()) fail(key, "expected true or false");
    return v.get<bool>();
  }

  std::string text(const std::string& key, std::optional<std::string> def = {}) const {
    if (!has(key)) return required(key, def);
    const auto& v = obj_->at(key);
    if (!v.is_string()) fail(key, "expected a string");
    return v.get<std::string>();
  }

  std::vector<double> numbers(const std::string& key) const {
    if (!has(key)) fail(key, "missing required key");
    return numbers_at(obj_->at(key), child(key));
  }

  // Rows of numbers; a flat list means one number per row.
  std::vector<std::vector<double>> rows(const std::string& key) const {
    if (!has(key)) fail(key, "missing required key");
    const auto& v = obj_->at(key);
    if (!v.is_array() || v.empty()) fail(key, "expected a non-empty array");
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const auto p = child(key) + "/" + std::to_string(i);
      if (v[i].is_number()) {
        out.push_back({v[i].get<double>()});
      } else {
        out.push_back(numbers_at(v[i], p));
      }
      if (out.back().size() != out.front().size()) doc_->fail(p, "ragged rows");
    }
    return out;
  }

  std::filesystem::path existing_file(const std::string& key) const {
    std::filesystem::path p = text(key);
    if (p.is_relative()) p = std::filesystem::path(doc_->file()).parent_path() / p;
    if (!std::filesystem::is_regular_file(p)) fail(key, "file not found: " + p.string());
    return p;
  }

 private:
  template <class T>
  T required(const std::string& key, const std::optional<T>& def) const {
    if (!def) fail(key, "missing required key");
    return *def;
  }

  std::vector<double> numbers_at(const Json& v, const std::string& p) const {
    if (!v.is_array() || v.empty()) doc_->fail(p, "expected a non-empty array of numbers");
    std::vector<double> out;
    for (const auto& x : v) {
      if (!x.is_number()) doc_->fail(p, "expected a non-empty array of numbers");
      out.push_back(x.get<double>());
    }
    return out;
  }

  const ConfigDocument* doc_;
  const Json* obj_;
  std::string path_;
};

// ---------------------------------------------------------------------------

enum class DataSource { synthetic, csv, idx };

struct ModelSpec {
  std::string kind = "logistic";  // logistic | bimodal | conjugate
  double lambda = 1.0;

  // logistic
  DataSource source = DataSource::synthetic;
  Layout layout = Layout::two_gaussians;
  std::uint64_t n = 200;
  std::uint64_t test_n = 1000;
  std::uint64_t data_seed = 0;
  bool quadratic = false;
  bool bias = true;
  std::filesystem::path path, test_path;
  std::filesystem::path images, labels, test_images, test_labels;
  std::uint64_t subset = 0;

  // bimodal and conjugate
  std::vector<std::vector<double>> observations;
  std::vector<double> noise_variance;
  double weight = 0.5;
};

struct PosteriorSpec {
  std::string family = "gaussian";  // gaussian | mog
  std::uint64_t k = 1;
  double init_mean_variance = 0.1;
};

struct OutputSpec {
  std::filesystem::path dir;
  std::uint64_t grid = 200;
  std::uint64_t predictive_samples = 100;
  double padding = 1.0;
};

struct ExperimentConfig {
  std::string source;  // config file the values came from
  ModelSpec model;
  PosteriorSpec posterior;
  OptimizerKind optimizer = OptimizerKind::mog_parallel;
  OptimizerConfig opt;
  OutputSpec output;
};

/// Command-line values that take precedence over the file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::optional<std::string> optimizer;
  std::optional<std::uint64_t> k;
};

inline std::string to_string(DataSource s) {
  switch (s) {
    case DataSource::synthetic: return "synthetic";
    case DataSource::csv: return "csv";
    case DataSource::idx: return "idx";
  }
  return "?";
}

inline ModelSpec parse_model(const Section& s) {
  s.allow_only({"kind", "lambda", "source", "layout", "n", "test_n", "data_seed", "quadratic",
                "bias", "path", "test_path", "images", "labels", "test_images", "test_labels",
                "subset", "observations", "noise_variance", "weight"});
  ModelSpec m;
  m.kind = s.text("kind");
  m.lambda = s.number("lambda", 1.0);
  if (!(m.lambda > 0.0)) s.fail("lambda", "must be > 0");
  const auto reject = [&](std::initializer_list<const char*> keys) {
    for (const char* k : keys) {
      if (s.has(k)) s.fail(k, "not used by model kind '" + m.kind + "'");
    }
  };

  if (m.kind == "logistic") {
    reject({"observations", "noise_variance", "weight"});
    const std::string src = s.text("source", "synthetic");
    m.bias = s.flag("bias", true);
    m.quadratic = s.flag("quadratic", false);
    if (src == "synthetic") {
      m.source = DataSource::synthetic;
      reject({"path", "test_path", "images", "labels", "test_images", "test_labels", "subset"});
      try {
        m.layout = parse_layout(s.text("layout", "two-gaussians"));
      } catch (const std::invalid_argument& e) {
        s.fail("layout", e.what());
      }
      m.n = s.count("n", 200);
      m.test_n = s.count("test_n", 1000);
      m.data_seed = s.count("data_seed", 0);
      if (m.n < 2) s.fail("n", "must be >= 2");
      if (m.test_n == 1) s.fail("test_n", "must be 0 or >= 2");
    } else if (src == "csv") {
      m.source = DataSource::csv;
      reject({"layout", "n", "test_n", "data_seed", "images", "labels", "test_images",
              "test_labels", "subset"});
      m.path = s.existing_file("path");
      if (s.has("test_path")) m.test_path = s.existing_file("test_path");
    } else if (src == "idx") {
      m.source = DataSource::idx;
      reject({"layout", "n", "test_n", "path", "test_path"});
      m.images = s.existing_file("images");
      m.labels = s.existing_file("labels");
      if (s.has("test_images") != s.has("test_labels")) {
        s.fail(s.has("test_images") ? "test_images" : "test_labels",
               "test_images and test_labels go together");
      }
      if (s.has("test_images")) {
        m.test_images = s.existing_file("test_images");
        m.test_labels = s.existing_file("test_labels");
      }
      m.subset = s.count("subset", 0);
      m.data_seed = s.count("data_seed", 0);
    } else {
      s.fail("source", "expected synthetic, csv or idx");
    }
  } else if (m.kind == "bimodal" || m.kind == "conjugate") {
    reject({"source", "layout", "n", "test_n", "data_seed", "quadratic", "bias", "path",
            "test_path", "images", "labels", "test_images", "test_labels", "subset"});
    m.observations = s.rows("observations");
    const std::size_t d = m.observations.front().size();
    if (m.kind == "bimodal") {
      m.noise_variance = {s.number("noise_variance", 0.25)};
      if (!(m.noise_variance[0] > 0.0)) s.fail("noise_variance", "must be > 0");
      m.weight = s.number("weight", 0.5);
      if (!(m.weight > 0.0 && m.weight < 1.0)) s.fail("weight", "must be in (0, 1)");
    } else {
      if (s.has("weight")) s.fail("weight", "not used by model kind 'conjugate'");
      if (!s.has("noise_variance")) {
        m.noise_variance.assign(d, 1.0);
      } else if (s.raw("noise_variance").is_number()) {
        m.noise_variance.assign(d, s.number("noise_variance"));
      } else {
        m.noise_variance = s.numbers("noise_variance");
      }
      if (m.noise_variance.size() != d) s.fail("noise_variance", "needs one value per dimension");
      for (double v : m.noise_variance) {
        if (!(v > 0.0)) s.fail("noise_variance", "must be > 0");
      }
    }
  } else {
    s.fail("kind", "expected logistic, bimodal or conjugate");
  }
  return m;
}

inline Json model_to_json(const ModelSpec& m) {
  Json j;
  j["kind"] = m.kind;
  j["lambda"] = m.lambda;
  if (m.kind == "logistic") {
    j["source"] = to_string(m.source);
    switch (m.source) {
      case DataSource::synthetic:
        j["layout"] = to_string(m.layout);
        j["n"] = m.n;
        j["test_n"] = m.test_n;
        j["data_seed"] = m.data_seed;
        break;
      case DataSource::csv:
        j["path"] = m.path.string();
        if (!m.test_path.empty()) j["test_path"] = m.test_path.string();
        break;
      case DataSource::idx:
        j["images"] = m.images.string();
        j["labels"] = m.labels.string();
        if (!m.test_images.empty()) {
          j["test_images"] = m.test_images.string();
          j["test_labels"] = m.test_labels.string();
        }
        j["subset"] = m.subset;
        j["data_seed"] = m.data_seed;
        break;
    }
    j["quadratic"] = m.quadratic;
    j["bias"] = m.bias;
  } else {
    j["observations"] = m.observations;
    if (m.kind == "bimodal") {
      j["noise_variance"] = m.noise_variance.front();
      j["weight"] = m.weight;
    } else {
      j["noise_variance"] = m.noise_variance;
    }
  }
  return j;
}

inline PosteriorSpec parse_posterior(const Section& s) {
  s.allow_only({"family", "k", "init_mean_variance"});
  PosteriorSpec p;
  p.family = s.text("family", "gaussian");
  if (p.family != "gaussian" && p.family != "mog") s.fail("family", "expected gaussian or mog");
  p.k = s.count("k", 1);
  if (p.k < 1) s.fail("k", "must be >= 1");
  if (p.family == "gaussian" && p.k != 1) s.fail("k", "a gaussian posterior has k = 1");
  p.init_mean_variance = s.number("init_mean_variance", 0.1);
  if (!(p.init_mean_variance >= 0.0)) s.fail("init_mean_variance", "must be >= 0");
  return p;
}

inline void parse_optimizer_section(const Section& s, ExperimentConfig& cfg) {
  s.allow_only({"name", "beta", "epochs", "mc_samples", "minibatch", "seed", "variance_floor",
                "threads", "paper_literal_pi", "log_every", "elbo_samples", "elbo_estimator",
                "early_stop", "record_wall_time"});
  try {
    cfg.optimizer = parse_optimizer(s.text("name"));
  } catch (const std::invalid_argument& e) {
    s.fail("name", e.what());
  }
  OptimizerConfig& o = cfg.opt;
  const OptimizerConfig def;
  o.beta = s.number("beta", def.beta);
  if (!(o.beta > 0.0)) s.fail("beta", "must be > 0");
  o.epochs = s.count("epochs", def.epochs);
  o.mc_samples = s.count("mc_samples", def.mc_samples);
  if (o.mc_samples < 1) s.fail("mc_samples", "must be >= 1");
  o.minibatch = s.count("minibatch", def.minibatch);
  o.seed = s.count("seed", def.seed);
  o.variance_floor = s.number("variance_floor", def.variance_floor);
  if (!(o.variance_floor > 0.0)) s.fail("variance_floor", "must be > 0");
  o.threads = s.count("threads", def.threads);
  if (o.threads < 1) s.fail("threads", "must be >= 1");
  o.paper_literal_pi = s.flag("paper_literal_pi", def.paper_literal_pi);
  o.log_every = s.count("log_every", def.log_every);
  if (o.log_every < 1) s.fail("log_every", "must be >= 1");
  o.elbo_samples = s.count("elbo_samples", def.elbo_samples);
  if (o.elbo_samples < 1) s.fail("elbo_samples", "must be >= 1");
  try {
    o.elbo_estimator = parse_elbo_estimator(s.text("elbo_estimator", to_string(def.elbo_estimator)));
  } catch (const std::invalid_argument& e) {
    s.fail("elbo_estimator", e.what());
  }
  o.early_stop = s.flag("early_stop", def.early_stop);
  o.record_wall_time = s.flag("record_wall_time", def.record_wall_time);
}

// Input files resolve against the config's directory; output.dir against the
// working directory.
inline OutputSpec parse_output(const Section& s) {
  s.allow_only({"dir", "grid", "predictive_samples", "padding"});
  OutputSpec o;
  if (s.has("dir")) o.dir = s.text("dir");
  o.grid = s.count("grid", 200);
  if (o.grid < 2) s.fail("grid", "must be >= 2");
  o.predictive_samples = s.count("predictive_samples", 100);
  if (o.predictive_samples < 1) s.fail("predictive_samples", "must be >= 1");
  o.padding = s.number("padding", 1.0);
  if (!(o.padding >= 0.0)) s.fail("padding", "must be >= 0");
  return o;
}

inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["model"] = model_to_json(c.model);
  j["posterior"] = {{"family", c.posterior.family},
                    {"k", c.posterior.k},
                    {"init_mean_variance", c.posterior.init_mean_variance}};
  const auto& o = c.opt;
  j["optimizer"] = {{"name", to_string(c.optimizer)},
                    {"beta", o.beta},
                    {"epochs", o.epochs},
                    {"mc_samples", o.mc_samples},
                    {"minibatch", o.minibatch},
                    {"seed", o.seed},
                    {"variance_floor", o.variance_floor},
                    {"threads", o.threads},
                    {"paper_literal_pi", o.paper_literal_pi},
                    {"log_every", o.log_every},
                    {"elbo_samples", o.elbo_samples},
                    {"elbo_estimator", to_string(o.elbo_estimator)},
                    {"early_stop", o.early_stop},
                    {"record_wall_time", o.record_wall_time}};
  j["output"] = {{"dir", c.output.dir.string()},
                 {"grid", c.output.grid},
                 {"predictive_samples", c.output.predictive_samples},
                 {"padding", c.output.padding}};
  return j;
}

/// Parses, applies overrides, then checks cross-field constraints.
inline ExperimentConfig parse_experiment(const ConfigDocument& doc, const Overrides& ov = {}) {
  const Section root(doc, doc.root(), "");
  root.allow_only({"model", "posterior", "optimizer", "output"});
  ExperimentConfig cfg;
  cfg.source = doc.file();
  cfg.model = parse_model(root.section("model"));
  if (root.has("posterior")) cfg.posterior = parse_posterior(root.section("posterior"));
  parse_optimizer_section(root.section("optimizer"), cfg);
  if (root.has("output")) cfg.output = parse_output(root.section("output"));

  if (ov.seed) cfg.opt.seed = *ov.seed;
  if (ov.out) cfg.output.dir = *ov.out;
  if (ov.optimizer) {
    try {
      cfg.optimizer = parse_optimizer(*ov.optimizer);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(doc.file(), 0, std::string("--optimizer: ") + e.what());
    }
  }
  if (ov.k) {
    if (*ov.k < 1) throw ConfigError(doc.file(), 0, "--k: must be >= 1");
    cfg.posterior.k = *ov.k;
  }

  const int opt_line = doc.line_of("/optimizer/name");
  const int post_line = doc.line_of("/posterior");
  if (cfg.output.dir.empty()) {
    throw ConfigError(doc.file(), doc.line_of("/output"), "output.dir: missing (or pass --out)");
  }
  if (cfg.posterior.family == "gaussian" && cfg.posterior.k != 1) {
    throw ConfigError(doc.file(), post_line, "posterior.k: a gaussian posterior has k = 1");
  }
  if (is_mixture_optimizer(cfg.optimizer) && cfg.posterior.family != "mog") {
    throw ConfigError(doc.file(), opt_line,
                      "optimizer.name: " + to_string(cfg.optimizer) + " needs a mog posterior");
  }
  if (!is_mixture_optimizer(cfg.optimizer) && cfg.posterior.family != "gaussian") {
    throw ConfigError(doc.file(), opt_line,
                      "optimizer.name: " + to_string(cfg.optimizer) +
                          " needs a gaussian posterior");
  }
  if (cfg.optimizer == OptimizerKind::bbvi && cfg.opt.minibatch != 0) {
    throw ConfigError(doc.file(), doc.line_of("/optimizer/minibatch"),
                      "optimizer.minibatch: bbvi runs full batch");
  }
  return cfg;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path,
                                        const Overrides& ov = {}) {
  return parse_experiment(ConfigDocument::load(path), ov);
}

}  // namespace ngvi::harness
