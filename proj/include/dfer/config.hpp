#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dfer/data.hpp"
#include "dfer/encoder_config.hpp"
#include "dfer/errors.hpp"

namespace dfer {

// Flat `key = value` text: blank lines and #-comment lines ignored, one
// binding per line, duplicates rejected. Order is preserved so consumers can
// report the first offending key.
struct KvFile {
  std::vector<std::pair<std::string, std::string>> items;

  static KvFile parse_text(const std::string& text) {
    KvFile kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const std::size_t eq = t.find('=');
      if (eq == std::string::npos) throw ParseError(lineno, "expected key = value, got: " + t);
      const std::string key = trim(t.substr(0, eq));
      const std::string val = trim(t.substr(eq + 1));
      if (key.empty()) throw ParseError(lineno, "empty key");
      for (const auto& [k, v] : kv.items)
        if (k == key) throw ParseError(lineno, "duplicate key: " + key);
      kv.items.emplace_back(key, val);
    }
    return kv;
  }

  static KvFile from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_text(buf.str());
  }

  const std::string* find(const std::string& key) const {
    for (const auto& [k, v] : items)
      if (k == key) return &v;
    return nullptr;
  }

 private:
  static std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }
};

namespace detail {

inline std::int64_t parse_i64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long r = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return r;
  } catch (const std::exception&) {
    throw ConfigError("key `" + key + "`: expected an integer, got `" + v + "`");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("");
    const unsigned long long r = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return r;
  } catch (const std::exception&) {
    throw ConfigError("key `" + key + "`: expected a non-negative integer, got `" + v + "`");
  }
}

inline double parse_f64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double r = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return r;
  } catch (const std::exception&) {
    throw ConfigError("key `" + key + "`: expected a real number, got `" + v + "`");
  }
}

inline std::string fmt_f64(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// One tower-growth event: add `layers` zero-residual layers at the start of
// (1-based) `epoch`.
struct GrowthEvent {
  std::int64_t epoch = 0;
  std::int64_t layers = 0;
};

// "10:2,14:1" -> {{10,2},{14,1}}; empty string means no growth.
inline std::vector<GrowthEvent> parse_growth(const std::string& key, const std::string& s) {
  std::vector<GrowthEvent> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  while (start <= s.size()) {
    std::size_t comma = s.find(',', start);
    if (comma == std::string::npos) comma = s.size();
    const std::string item = s.substr(start, comma - start);
    const std::size_t colon = item.find(':');
    if (colon == std::string::npos)
      throw ConfigError("key `" + key + "`: expected epoch:layers, got `" + item + "`");
    GrowthEvent e;
    e.epoch = detail::parse_i64(key, item.substr(0, colon));
    e.layers = detail::parse_i64(key, item.substr(colon + 1));
    if (e.epoch < 1 || e.layers < 1)
      throw ConfigError("key `" + key + "`: epoch and layers must be positive in `" + item + "`");
    if (!out.empty() && e.epoch <= out.back().epoch)
      throw ConfigError("key `" + key + "`: growth epochs must strictly increase");
    out.push_back(e);
    start = comma + 1;
  }
  return out;
}

inline std::string growth_str(const std::vector<GrowthEvent>& g) {
  std::string s;
  for (std::size_t i = 0; i < g.size(); ++i)
    s += (i ? "," : "") + std::to_string(g[i].epoch) + ":" + std::to_string(g[i].layers);
  return s;
}

enum class Paradigm { bap, all_at_once };

// Every tunable in one flat record. Unknown keys are rejected at parse time;
// the whole record is validated before any run starts. echo() serializes
// canonically so a config can round-trip through a checkpoint.
struct RunConfig {
  std::uint64_t seed = 0;

  // data source
  std::string data = "synthetic";  // synthetic | manifest
  std::int64_t classes = 4;
  std::int64_t samples_per_class = 75;
  std::int64_t frames = 16;
  std::int64_t image_edge = 32;
  double noise = 0.03;
  std::string train_manifest;
  std::string test_manifest;

  // frozen encoders
  std::int64_t embd = 32;
  std::int64_t enc_layers = 2;
  std::int64_t heads = 4;
  std::int64_t tkn_max = 74;
  std::int64_t image_patch = 8;

  // label token bank
  std::int64_t snt = 16;
  std::int64_t tkn = 64;

  // objective and schedule
  double tau = 0.07;
  std::int64_t batch = 64;
  std::int64_t epochs1 = 40, epochs2 = 30, epochs3 = 30;
  double lr1 = 0.01, lr2 = 0.01, lr3 = 0.002;
  double momentum = 0.9;

  // towers
  std::int64_t text_layers = 2;
  std::int64_t video_layers = 2;
  std::int64_t joint_depth = 4;
  std::vector<GrowthEvent> growth1 = {{20, 2}};  // text tower, during stage 1
  std::vector<GrowthEvent> growth2 = {{15, 2}};  // video tower, during stage 2

  Paradigm paradigm = Paradigm::bap;

  static RunConfig from_kv(const KvFile& kv) {
    RunConfig c;
    for (const auto& [key, val] : kv.items) {
      if (key == "seed") c.seed = detail::parse_u64(key, val);
      else if (key == "data") c.data = val;
      else if (key == "classes") c.classes = detail::parse_i64(key, val);
      else if (key == "samples_per_class") c.samples_per_class = detail::parse_i64(key, val);
      else if (key == "frames") c.frames = detail::parse_i64(key, val);
      else if (key == "image_edge") c.image_edge = detail::parse_i64(key, val);
      else if (key == "noise") c.noise = detail::parse_f64(key, val);
      else if (key == "train_manifest") c.train_manifest = val;
      else if (key == "test_manifest") c.test_manifest = val;
      else if (key == "embd") c.embd = detail::parse_i64(key, val);
      else if (key == "enc_layers") c.enc_layers = detail::parse_i64(key, val);
      else if (key == "heads") c.heads = detail::parse_i64(key, val);
      else if (key == "tkn_max") c.tkn_max = detail::parse_i64(key, val);
      else if (key == "image_patch") c.image_patch = detail::parse_i64(key, val);
      else if (key == "snt") c.snt = detail::parse_i64(key, val);
      else if (key == "tkn") c.tkn = detail::parse_i64(key, val);
      else if (key == "tau") c.tau = detail::parse_f64(key, val);
      else if (key == "batch") c.batch = detail::parse_i64(key, val);
      else if (key == "epochs1") c.epochs1 = detail::parse_i64(key, val);
      else if (key == "epochs2") c.epochs2 = detail::parse_i64(key, val);
      else if (key == "epochs3") c.epochs3 = detail::parse_i64(key, val);
      else if (key == "lr1") c.lr1 = detail::parse_f64(key, val);
      else if (key == "lr2") c.lr2 = detail::parse_f64(key, val);
      else if (key == "lr3") c.lr3 = detail::parse_f64(key, val);
      else if (key == "momentum") c.momentum = detail::parse_f64(key, val);
      else if (key == "text_layers") c.text_layers = detail::parse_i64(key, val);
      else if (key == "video_layers") c.video_layers = detail::parse_i64(key, val);
      else if (key == "joint_depth") c.joint_depth = detail::parse_i64(key, val);
      else if (key == "growth1") c.growth1 = parse_growth(key, val);
      else if (key == "growth2") c.growth2 = parse_growth(key, val);
      else if (key == "paradigm") {
        if (val == "bap") c.paradigm = Paradigm::bap;
        else if (val == "all_at_once") c.paradigm = Paradigm::all_at_once;
        else throw ConfigError("key `paradigm`: expected bap or all_at_once, got `" + val + "`");
      } else {
        throw ConfigError("unknown config key: " + key);
      }
    }
    c.validate();
    return c;
  }

  static RunConfig from_file(const std::string& path) { return from_kv(KvFile::from_file(path)); }
  static RunConfig from_text(const std::string& text) {
    return from_kv(KvFile::parse_text(text));
  }

  void validate() const {
    if (data != "synthetic" && data != "manifest")
      throw ConfigError("data must be synthetic or manifest, got `" + data + "`");
    if (data == "manifest" && (train_manifest.empty() || test_manifest.empty()))
      throw ConfigError("manifest mode needs train_manifest and test_manifest");
    if (data == "synthetic") dataset_spec().validate();
    if (classes < 2) throw ConfigError("classes must be at least 2");
    encoder_config().validate();
    if (snt < 1 || tkn < 1) throw ConfigError("snt and tkn must be positive");
    if (tkn > tkn_max)
      throw ConfigError("tkn " + std::to_string(tkn) + " exceeds tkn_max " +
                        std::to_string(tkn_max));
    if (tau <= 0.0) throw ConfigError("tau must be positive");
    if (batch < 1) throw ConfigError("batch must be positive");
    if (epochs1 < 1 || epochs2 < 1 || epochs3 < 1) throw ConfigError("epochs must be positive");
    if (lr1 <= 0.0 || lr2 <= 0.0 || lr3 <= 0.0) throw ConfigError("learning rates must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0,1)");
    if (text_layers < 1 || video_layers < 1 || joint_depth < 1)
      throw ConfigError("tower depths must be positive");
    for (const GrowthEvent& e : growth1)
      if (e.epoch > epochs1)
        throw ConfigError("growth1 epoch " + std::to_string(e.epoch) + " beyond epochs1");
    for (const GrowthEvent& e : growth2)
      if (e.epoch > epochs2)
        throw ConfigError("growth2 epoch " + std::to_string(e.epoch) + " beyond epochs2");
    if (image_edge % image_patch != 0)
      throw ConfigError("image_edge must be divisible by image_patch");
  }

  EncoderConfig encoder_config() const {
    EncoderConfig e;
    e.embd = embd;
    e.layers = enc_layers;
    e.heads = heads;
    e.tkn_max = tkn_max;
    e.image_size = image_edge;
    e.image_patch = image_patch;
    e.channels = 1;
    return e;
  }

  DatasetSpec dataset_spec() const {
    DatasetSpec s;
    s.classes = classes;
    s.samples_per_class = samples_per_class;
    s.frames = frames;
    s.image_edge = image_edge;
    s.noise = noise;
    s.seed = seed;
    return s;
  }

  std::string echo() const {
    std::string s;
    s += "seed = " + std::to_string(seed) + "\n";
    s += "data = " + data + "\n";
    s += "classes = " + std::to_string(classes) + "\n";
    s += "samples_per_class = " + std::to_string(samples_per_class) + "\n";
    s += "frames = " + std::to_string(frames) + "\n";
    s += "image_edge = " + std::to_string(image_edge) + "\n";
    s += "noise = " + detail::fmt_f64(noise) + "\n";
    if (!train_manifest.empty()) s += "train_manifest = " + train_manifest + "\n";
    if (!test_manifest.empty()) s += "test_manifest = " + test_manifest + "\n";
    s += "embd = " + std::to_string(embd) + "\n";
    s += "enc_layers = " + std::to_string(enc_layers) + "\n";
    s += "heads = " + std::to_string(heads) + "\n";
    s += "tkn_max = " + std::to_string(tkn_max) + "\n";
    s += "image_patch = " + std::to_string(image_patch) + "\n";
    s += "snt = " + std::to_string(snt) + "\n";
    s += "tkn = " + std::to_string(tkn) + "\n";
    s += "tau = " + detail::fmt_f64(tau) + "\n";
    s += "batch = " + std::to_string(batch) + "\n";
    s += "epochs1 = " + std::to_string(epochs1) + "\n";
    s += "epochs2 = " + std::to_string(epochs2) + "\n";
    s += "epochs3 = " + std::to_string(epochs3) + "\n";
    s += "lr1 = " + detail::fmt_f64(lr1) + "\n";
    s += "lr2 = " + detail::fmt_f64(lr2) + "\n";
    s += "lr3 = " + detail::fmt_f64(lr3) + "\n";
    s += "momentum = " + detail::fmt_f64(momentum) + "\n";
    s += "text_layers = " + std::to_string(text_layers) + "\n";
    s += "video_layers = " + std::to_string(video_layers) + "\n";
    s += "joint_depth = " + std::to_string(joint_depth) + "\n";
    s += "growth1 = " + growth_str(growth1) + "\n";
    s += "growth2 = " + growth_str(growth2) + "\n";
    s += std::string("paradigm = ") + (paradigm == Paradigm::bap ? "bap" : "all_at_once") + "\n";
    return s;
  }
};

// Standalone dataset recipe file for data generation.
inline DatasetSpec parse_dataset_spec(const KvFile& kv) {
  DatasetSpec s;
  for (const auto& [key, val] : kv.items) {
    if (key == "classes") s.classes = detail::parse_i64(key, val);
    else if (key == "samples_per_class") s.samples_per_class = detail::parse_i64(key, val);
    else if (key == "frames") s.frames = detail::parse_i64(key, val);
    else if (key == "image_edge") s.image_edge = detail::parse_i64(key, val);
    else if (key == "noise") s.noise = detail::parse_f64(key, val);
    else if (key == "seed") s.seed = detail::parse_u64(key, val);
    else throw ConfigError("unknown dataset spec key: " + key);
  }
  s.validate();
  return s;
}

}  // namespace dfer
