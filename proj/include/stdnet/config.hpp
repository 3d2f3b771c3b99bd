#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <type_traits>
#include <string>
#include <vector>

#include "stdnet/data.hpp"
#include "stdnet/losses.hpp"
#include "stdnet/metrics.hpp"
#include "stdnet/model.hpp"

namespace stdnet {

enum class Task { Vessel, DiscCup };

inline Task parse_task(const std::string& s) {
  if (s == "vessel") return Task::Vessel;
  if (s == "disc_cup") return Task::DiscCup;
  throw Error("unknown task '" + s + "' (expected vessel or disc_cup)");
}

inline const char* to_string(Task t) { return t == Task::Vessel ? "vessel" : "disc_cup"; }

/// Every knob of a run. Serialized as flat `key = value` lines.
struct TrainConfig {
  Task task = Task::Vessel;
  Variant variant = Variant::STD;

  // data
  std::string data_root;  // empty: synthetic data
  int input_size = 512;   // vessel resize
  int crop_size = 256;    // disc crop resize
  int crop_margin = 50;
  std::optional<bool> polar;  // unset: on for disc_cup, off for vessel
  MaskConvention mask_convention = MaskConvention::Standard;
  bool augment = true;
  int synth_train = 200;
  int synth_test = 50;
  SynthConfig synth;

  // model
  int extractor_width = 64;
  int extractor_layers = 10;
  int block_width = 32;
  std::vector<int> backbone_channels = {32, 64, 128, 256};

  // optimization
  double lr = 1e-3;
  int batch_size = 2;
  long steps = 0;  // 0: derive from epochs
  long epochs = 300;
  double lambda_s = 1.0;
  double mu = 0.001;
  Reduction loss_reduction = Reduction::Sum;
  std::uint64_t seed = 1;

  // bookkeeping
  std::string out_dir = "runs/default";
  long checkpoint_every = 0;
  long log_every = 1;
  double target_train_iou = 0;  // > 0: stop once reached
  long check_every = 50;

  // evaluation
  double threshold = 0.5;
  Aggregation aggregation = Aggregation::PerImage;

  // ablation
  std::vector<Variant> variants = {kAllVariants.begin(), kAllVariants.end()};
  std::vector<std::uint64_t> seeds = {1, 2, 3};

  ModelConfig model_config() const {
    ModelConfig m;
    m.variant = variant;
    m.classes = task == Task::Vessel ? 1 : 2;
    m.extractor_width = extractor_width;
    m.extractor_layers = extractor_layers;
    m.block_width = block_width;
    m.backbone_channels = backbone_channels;
    return m;
  }

  SynthConfig synth_config() const {
    SynthConfig s = synth;
    s.kind = task == Task::Vessel ? SynthKind::Vessel : SynthKind::DiscCup;
    return s;
  }

  bool use_polar() const { return polar.value_or(task == Task::DiscCup); }

  /// Network input side length for this task.
  int network_size() const {
    if (task == Task::DiscCup) return crop_size;
    return data_root.empty() ? synth.size : input_size;
  }

  void validate() const {
    if (task == Task::Vessel && polar.value_or(false)) throw Error("config: polar transform requested for the vessel task");
    if (lr <= 0) throw Error("config: lr must be > 0");
    if (batch_size < 1) throw Error("config: batch_size must be >= 1");
    if (steps < 0 || epochs < 0 || (steps == 0 && epochs == 0)) throw Error("config: need steps > 0 or epochs > 0");
    LossWeights{lambda_s, mu}.validate();
    if (crop_margin < 0) throw Error("config: crop_margin must be >= 0");
    if (backbone_channels.size() < 2) throw Error("config: backbone_channels needs at least 2 levels");
    const int div = 1 << (backbone_channels.size() - 1);
    if (network_size() % div != 0)
      throw Error("config: network input " + std::to_string(network_size()) + " is not divisible by " +
                  std::to_string(div));
    if (threshold <= 0 || threshold >= 1) throw Error("config: threshold must be in (0, 1)");
    if (variants.empty() || seeds.empty()) throw Error("config: variants and seeds must be non-empty");
    if (data_root.empty()) synth_config().validate();
  }

  /// Sets a key from its text form; unknown keys are errors.
  void set(const std::string& key, const std::string& value) {
    auto& table = fields();
    auto it = table.find(key);
    if (it == table.end()) throw Error("config: unknown key '" + key + "'");
    try {
      it->second.set(*this, value);
    } catch (const Error& e) {
      throw Error("config: " + key + ": " + e.what());
    }
  }

  std::map<std::string, std::string> to_map() const {
    std::map<std::string, std::string> out;
    for (const auto& [k, f] : fields()) out[k] = f.get(*this);
    return out;
  }

  static TrainConfig from_map(const std::map<std::string, std::string>& kv) {
    TrainConfig c;
    for (const auto& [k, v] : kv) c.set(k, v);
    return c;
  }

  static TrainConfig parse(std::istream& in, const std::string& origin = "<config>") {
    TrainConfig c;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return std::string();
        return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw Error(origin + ":" + std::to_string(lineno) + ": expected key = value");
      try {
        c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      } catch (const Error& e) {
        throw Error(origin + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    return c;
  }

  static TrainConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("missing config file: " + path.string());
    return parse(in, path.string());
  }

  std::string dump() const {
    std::ostringstream os;
    for (const auto& [k, v] : to_map()) os << k << " = " << v << '\n';
    return os.str();
  }

private:
  struct Field {
    std::function<void(TrainConfig&, const std::string&)> set;
    std::function<std::string(const TrainConfig&)> get;
  };

  static long parse_long(const std::string& s) {
    long v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw Error("expected an integer, got '" + s + "'");
    return v;
  }
  static std::uint64_t parse_u64(const std::string& s) {
    std::uint64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
      throw Error("expected a non-negative integer, got '" + s + "'");
    return v;
  }
  static double parse_double(const std::string& s) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || s.empty()) throw Error("expected a number, got '" + s + "'");
    return v;
  }
  static bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw Error("expected true or false, got '" + s + "'");
  }
  static std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string tok; std::getline(ss, tok, ',');) {
      const auto a = tok.find_first_not_of(' ');
      if (a == std::string::npos) throw Error("empty list element in '" + s + "'");
      out.push_back(tok.substr(a, tok.find_last_not_of(' ') - a + 1));
    }
    return out;
  }
  // Shortest text that parses back to the same double.
  static std::string fmt(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  }
  template <typename T>
  static std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + f(xs[i]);
    return s;
  }

  static const std::map<std::string, Field>& fields() {
    using C = TrainConfig;
    static const std::map<std::string, Field> table = [] {
      std::map<std::string, Field> t;
      auto integer = [&](const char* k, auto member) {
        t[k] = {[member](C& c, const std::string& v) { c.*member = static_cast<std::remove_reference_t<decltype(c.*member)>>(parse_long(v)); },
                [member](const C& c) { return std::to_string(c.*member); }};
      };
      auto real = [&](const char* k, auto member) {
        t[k] = {[member](C& c, const std::string& v) { c.*member = parse_double(v); },
                [member](const C& c) { return fmt(c.*member); }};
      };
      auto boolean = [&](const char* k, auto member) {
        t[k] = {[member](C& c, const std::string& v) { c.*member = parse_bool(v); },
                [member](const C& c) { return std::string(c.*member ? "true" : "false"); }};
      };
      auto synth_int = [&](const char* k, int SynthConfig::*member) {
        t[k] = {[member](C& c, const std::string& v) { c.synth.*member = static_cast<int>(parse_long(v)); },
                [member](const C& c) { return std::to_string(c.synth.*member); }};
      };
      auto synth_real = [&](const char* k, double SynthConfig::*member) {
        t[k] = {[member](C& c, const std::string& v) { c.synth.*member = parse_double(v); },
                [member](const C& c) { return fmt(c.synth.*member); }};
      };

      t["task"] = {[](C& c, const std::string& v) { c.task = parse_task(v); },
                   [](const C& c) { return std::string(to_string(c.task)); }};
      t["variant"] = {[](C& c, const std::string& v) { c.variant = parse_variant(v); },
                      [](const C& c) { return to_string(c.variant); }};
      t["data_root"] = {[](C& c, const std::string& v) { c.data_root = v; }, [](const C& c) { return c.data_root; }};
      integer("input_size", &C::input_size);
      integer("crop_size", &C::crop_size);
      integer("crop_margin", &C::crop_margin);
      t["polar"] = {[](C& c, const std::string& v) {
                      if (v == "auto")
                        c.polar.reset();
                      else
                        c.polar = parse_bool(v);
                    },
                    [](const C& c) { return std::string(!c.polar ? "auto" : *c.polar ? "true" : "false"); }};
      t["mask_convention"] = {
          [](C& c, const std::string& v) { c.mask_convention = parse_mask_convention(v); },
          [](const C& c) { return std::string(c.mask_convention == MaskConvention::Standard ? "standard" : "refuge"); }};
      boolean("augment", &C::augment);
      integer("synth_train", &C::synth_train);
      integer("synth_test", &C::synth_test);
      synth_int("synth_size", &SynthConfig::size);
      synth_int("synth_curves_min", &SynthConfig::curves_min);
      synth_int("synth_curves_max", &SynthConfig::curves_max);
      synth_real("synth_width_min", &SynthConfig::width_min);
      synth_real("synth_width_max", &SynthConfig::width_max);
      synth_real("synth_vessel_contrast", &SynthConfig::vessel_contrast);
      synth_real("synth_noise_amplitude", &SynthConfig::noise_amplitude);
      synth_real("synth_noise_freq_min", &SynthConfig::noise_freq_min);
      synth_real("synth_noise_freq_max", &SynthConfig::noise_freq_max);
      synth_int("synth_noise_components", &SynthConfig::noise_components);
      synth_real("synth_disc_radius_min", &SynthConfig::disc_radius_min);
      synth_real("synth_disc_radius_max", &SynthConfig::disc_radius_max);
      synth_real("synth_cup_radius_min", &SynthConfig::cup_radius_min);
      synth_real("synth_cup_radius_max", &SynthConfig::cup_radius_max);
      t["synth_seed"] = {[](C& c, const std::string& v) { c.synth.seed = parse_u64(v); },
                         [](const C& c) { return std::to_string(c.synth.seed); }};
      integer("extractor_width", &C::extractor_width);
      integer("extractor_layers", &C::extractor_layers);
      integer("block_width", &C::block_width);
      t["backbone_channels"] = {[](C& c, const std::string& v) {
                                  c.backbone_channels.clear();
                                  for (const auto& s : split_list(v)) c.backbone_channels.push_back(static_cast<int>(parse_long(s)));
                                },
                                [](const C& c) {
                                  return join<int>(c.backbone_channels, [](const int& x) { return std::to_string(x); });
                                }};
      real("lr", &C::lr);
      integer("batch_size", &C::batch_size);
      integer("steps", &C::steps);
      integer("epochs", &C::epochs);
      real("lambda_s", &C::lambda_s);
      real("mu", &C::mu);
      t["loss_reduction"] = {[](C& c, const std::string& v) { c.loss_reduction = parse_reduction(v); },
                             [](const C& c) { return std::string(to_string(c.loss_reduction)); }};
      t["seed"] = {[](C& c, const std::string& v) { c.seed = parse_u64(v); },
                   [](const C& c) { return std::to_string(c.seed); }};
      t["out_dir"] = {[](C& c, const std::string& v) { c.out_dir = v; }, [](const C& c) { return c.out_dir; }};
      integer("checkpoint_every", &C::checkpoint_every);
      integer("log_every", &C::log_every);
      real("target_train_iou", &C::target_train_iou);
      integer("check_every", &C::check_every);
      real("threshold", &C::threshold);
      t["aggregation"] = {[](C& c, const std::string& v) { c.aggregation = parse_aggregation(v); },
                          [](const C& c) { return std::string(to_string(c.aggregation)); }};
      t["variants"] = {[](C& c, const std::string& v) {
                         c.variants.clear();
                         for (const auto& s : split_list(v)) c.variants.push_back(parse_variant(s));
                       },
                       [](const C& c) {
                         return join<Variant>(c.variants, [](const Variant& x) { return to_string(x); });
                       }};
      t["seeds"] = {[](C& c, const std::string& v) {
                      c.seeds.clear();
                      for (const auto& s : split_list(v)) c.seeds.push_back(parse_u64(s));
                    },
                    [](const C& c) {
                      return join<std::uint64_t>(c.seeds, [](const std::uint64_t& x) { return std::to_string(x); });
                    }};
      return t;
    }();
    return table;
  }
};

}  // namespace stdnet
