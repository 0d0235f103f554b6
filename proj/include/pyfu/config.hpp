#pragma once
// Run configuration in TOML syntax (a flat subset: [sections], key = value
// with booleans, integers, floats, quoted strings and numeric arrays).
// Every key is matched against the schema; unknown keys are an error so that
// typos cannot silently fall back to defaults.

#include <fstream>
#include <map>
#include <set>

#include "pyfu/network.hpp"
#include "pyfu/postprocess.hpp"
#include "pyfu/traineval.hpp"

namespace pyfu {

struct TomlValue {
  enum class Kind { boolean, integer, floating, text, array };
  Kind kind = Kind::integer;
  bool b = false;
  int64_t i = 0;
  double f = 0.0;
  std::string s;
  std::vector<double> array;
  int line = 0;
};

inline std::map<std::string, TomlValue> parse_toml(const std::string& text) {
  std::map<std::string, TomlValue> out;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  auto bad = [&](const std::string& msg) -> void {
    throw ConfigError("config line " + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    // strip comments outside quotes
    bool quoted = false;
    std::string stripped;
    for (char c : line) {
      if (c == '"') quoted = !quoted;
      if (c == '#' && !quoted) break;
      stripped.push_back(c);
    }
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      const auto b = s.find_last_not_of(" \t\r");
      return s.substr(a, b - a + 1);
    };
    const std::string t = trim(stripped);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') bad("unterminated section header");
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty()) bad("empty section name");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) bad("expected key = value");
    const std::string key = trim(t.substr(0, eq));
    const std::string val = trim(t.substr(eq + 1));
    if (key.empty() || val.empty()) bad("expected key = value");

    TomlValue v;
    v.line = lineno;
    try {
      if (val == "true" || val == "false") {
        v.kind = TomlValue::Kind::boolean;
        v.b = val == "true";
      } else if (val.front() == '"') {
        if (val.size() < 2 || val.back() != '"') bad("unterminated string");
        v.kind = TomlValue::Kind::text;
        v.s = val.substr(1, val.size() - 2);
      } else if (val.front() == '[') {
        if (val.back() != ']') bad("unterminated array");
        v.kind = TomlValue::Kind::array;
        std::string body = val.substr(1, val.size() - 2);
        std::replace(body.begin(), body.end(), ',', ' ');
        std::istringstream items(body);
        double d;
        while (items >> d) v.array.push_back(d);
      } else if (val.find('.') != std::string::npos || val.find('e') != std::string::npos ||
                 val.find('E') != std::string::npos) {
        v.kind = TomlValue::Kind::floating;
        size_t used = 0;
        v.f = std::stod(val, &used);
        if (used != val.size()) bad("malformed number: " + val);
      } else {
        v.kind = TomlValue::Kind::integer;
        size_t used = 0;
        v.i = std::stoll(val, &used);
        if (used != val.size()) bad("malformed number: " + val);
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      bad("malformed value: " + val);
    }
    const std::string full = section.empty() ? key : section + "." + key;
    if (out.count(full)) bad("duplicate key " + full);
    out[full] = v;
  }
  return out;
}

// Typed accessors that mark keys as consumed; leftovers are reported.
class ConfigReader {
 public:
  explicit ConfigReader(std::map<std::string, TomlValue> values) : values_(std::move(values)) {}

  void get(const std::string& key, bool& out) {
    if (auto* v = take(key)) {
      require(v, v->kind == TomlValue::Kind::boolean, key, "a boolean");
      out = v->b;
    }
  }
  void get(const std::string& key, int& out) {
    if (auto* v = take(key)) {
      require(v, v->kind == TomlValue::Kind::integer, key, "an integer");
      out = int(v->i);
    }
  }
  void get(const std::string& key, uint32_t& out) {
    if (auto* v = take(key)) {
      require(v, v->kind == TomlValue::Kind::integer && v->i >= 0, key, "a non-negative integer");
      out = uint32_t(v->i);
    }
  }
  void get(const std::string& key, double& out) {
    if (auto* v = take(key)) {
      require(v, v->kind == TomlValue::Kind::floating || v->kind == TomlValue::Kind::integer, key,
              "a number");
      out = v->kind == TomlValue::Kind::floating ? v->f : double(v->i);
    }
  }
  void get(const std::string& key, float& out) {
    double d = double(out);
    get(key, d);
    out = float(d);
  }
  void get(const std::string& key, std::string& out) {
    if (auto* v = take(key)) {
      require(v, v->kind == TomlValue::Kind::text, key, "a string");
      out = v->s;
    }
  }
  void get(const std::string& key, std::array<int, 6>& out) {
    if (auto* v = take(key)) {
      require(v, v->kind == TomlValue::Kind::array && v->array.size() == 6, key,
              "an array of 6 integers");
      for (int j = 0; j < 6; ++j) out[size_t(j)] = int(v->array[size_t(j)]);
    }
  }

  void finish() const {
    std::vector<std::string> unknown;
    for (const auto& [key, value] : values_)
      if (!consumed_.count(key)) unknown.push_back(key + " (line " + std::to_string(value.line) + ")");
    if (!unknown.empty()) {
      std::string msg = "unknown configuration key(s):";
      for (const auto& k : unknown) msg += " " + k;
      throw ConfigError(msg);
    }
  }

  const TomlValue* peek(const std::string& key) const {
    auto it = values_.find(key);
    return it == values_.end() ? nullptr : &it->second;
  }

  TomlValue* take(const std::string& key) {
    auto it = values_.find(key);
    if (it == values_.end()) return nullptr;
    consumed_.insert(key);
    return &it->second;
  }

 private:
  static void require(const TomlValue* v, bool ok, const std::string& key, const std::string& what) {
    if (!ok)
      throw ConfigError("config line " + std::to_string(v->line) + ": " + key + " must be " + what);
  }

  std::map<std::string, TomlValue> values_;
  std::set<std::string> consumed_;
};

struct DataConfig {
  std::string root;
  int train_begin = 0, train_end = 0;
  int val_begin = 0, val_end = 0;
};

struct RunConfig {
  PyFuConfig model;
  TrainConfig train;
  KnnConfig knn;
  DataConfig data;
  SyntheticSceneSpec synth;
};

inline RunConfig run_config_from_text(const std::string& text) {
  ConfigReader r(parse_toml(text));
  RunConfig cfg;

  r.get("sensor.height", cfg.model.sensor.height);
  r.get("sensor.width", cfg.model.sensor.width);
  r.get("sensor.fov_up", cfg.model.sensor.fov_up_deg);
  r.get("sensor.fov_down", cfg.model.sensor.fov_down_deg);

  r.get("camera.height", cfg.model.cam_height);
  r.get("camera.width", cfg.model.cam_width);

  r.get("model.classes", cfg.model.classes);
  r.get("model.fusion_channels", cfg.model.fusion_channels);
  r.get("model.lidar_widths", cfg.model.lidar_widths);
  r.get("model.cam_widths", cfg.model.cam_widths);
  if (auto* v = r.take("model.strategy")) {
    if (v->kind != TomlValue::Kind::text)
      throw ConfigError("config line " + std::to_string(v->line) + ": model.strategy must be a string");
    cfg.model.strategy = strategy_from_name(v->s);
  }
  r.get("model.late_fusion", cfg.model.late_fusion);
  r.get("model.pfb", cfg.model.pfb);
  r.get("model.pfh", cfg.model.pfh);
  r.get("model.pyramid_top_down", cfg.model.pyramid_top_down);
  r.get("model.pyramid_bottom_up", cfg.model.pyramid_bottom_up);
  r.get("model.pyramid_concat_combine", cfg.model.pyramid_concat_combine);
  r.get("model.fusion_target_finer", cfg.model.fusion_target_finer);
  r.get("model.camera_first_late_fusion", cfg.model.camera_first_late_fusion);
  r.get("model.camera_classifier", cfg.model.camera_classifier);
  r.get("model.freeze_lidar", cfg.model.freeze_lidar);
  r.get("model.freeze_camera", cfg.model.freeze_camera);
  r.get("model.irb_expansion", cfg.model.irb_expansion);
  r.get("model.brb_ratio", cfg.model.brb_ratio);
  r.get("model.leaky_slope", cfg.model.leaky_slope);

  r.get("train.base_lr", cfg.train.base_lr);
  r.get("train.max_steps", cfg.train.max_steps);
  r.get("train.lr_power", cfg.train.lr_power);
  r.get("train.weight_decay", cfg.train.weight_decay);
  r.get("train.momentum", cfg.train.momentum);
  r.get("train.batch_size", cfg.train.batch_size);
  r.get("train.hflip", cfg.train.hflip);
  r.get("train.hflip_p", cfg.train.hflip_p);
  r.get("train.random_crop", cfg.train.random_crop);
  r.get("train.crop_h", cfg.train.crop_h);
  r.get("train.crop_w", cfg.train.crop_w);
  r.get("train.seed", cfg.train.seed);
  r.get("train.eval_every", cfg.train.eval_every);
  r.get("train.log_every", cfg.train.log_every);
  r.get("train.freeze_stats_after", cfg.train.freeze_stats_after);
  r.get("train.grad_clip", cfg.train.grad_clip);

  r.get("postprocess.window", cfg.knn.window);
  r.get("postprocess.k", cfg.knn.k);
  r.get("postprocess.cutoff", cfg.knn.cutoff);
  r.get("postprocess.sigma", cfg.knn.sigma);

  r.get("data.root", cfg.data.root);
  r.get("data.train_begin", cfg.data.train_begin);
  r.get("data.train_end", cfg.data.train_end);
  r.get("data.val_begin", cfg.data.val_begin);
  r.get("data.val_end", cfg.data.val_end);

  r.get("synth.frames", cfg.synth.frames);
  r.get("synth.seed", cfg.synth.seed);
  r.get("synth.poles", cfg.synth.poles);
  r.get("synth.crates", cfg.synth.crates);
  r.get("synth.bins", cfg.synth.bins);
  r.get("synth.slabs", cfg.synth.slabs);
  r.get("synth.count_spread", cfg.synth.count_spread);
  r.get("synth.walls", cfg.synth.walls);
  r.get("synth.cam_hfov", cfg.synth.cam_hfov_deg);

  r.finish();

  // the generator mirrors the model geometry
  cfg.synth.sensor = cfg.model.sensor;
  cfg.synth.cam_width = cfg.model.cam_width;
  cfg.synth.cam_height = cfg.model.cam_height;

  validate_sensor(cfg.model.sensor);
  if (cfg.model.classes < 2) throw ConfigError("model.classes must be at least 2");
  if (cfg.train.base_lr < 0) throw ConfigError("train.base_lr must be >= 0");
  if (cfg.train.max_steps < 1) throw ConfigError("train.max_steps must be >= 1");
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return run_config_from_text(text.str());
}

}  // namespace pyfu
