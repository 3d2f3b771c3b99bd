#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stdnet/tensor.hpp"

namespace stdnet {

struct ConfusionCounts {
  long tp = 0;
  long fp = 0;
  long tn = 0;
  long fn = 0;

  long total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

namespace detail {

inline void require_binary(std::span<const std::uint8_t> m, const char* what) {
  for (auto v : m)
    if (v > 1) throw Error(std::string(what) + ": mask is not binary");
}

inline void require_sizes(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw Error(std::string(what) + ": size mismatch");
}

}  // namespace detail

/// Counts over pixels where fov == 1 (every pixel when fov is empty).
inline ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                                 std::span<const std::uint8_t> fov = {}) {
  detail::require_sizes(pred.size(), gt.size(), "confusion");
  if (!fov.empty()) detail::require_sizes(pred.size(), fov.size(), "confusion");
  detail::require_binary(pred, "confusion");
  detail::require_binary(gt, "confusion");
  detail::require_binary(fov, "confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!fov.empty() && !fov[i]) continue;
    if (pred[i])
      (gt[i] ? c.tp : c.fp)++;
    else
      (gt[i] ? c.fn : c.tn)++;
  }
  return c;
}

/// Rate metrics. A metric whose denominator is zero is left empty.
struct Rates {
  std::optional<double> acc;
  std::optional<double> sen;
  std::optional<double> spe;
  std::optional<double> iou;
};

inline std::optional<double> ratio(long num, long den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

inline Rates rates(const ConfusionCounts& c) {
  if (c.total() == 0) throw Error("rates: empty evaluation region");
  return {ratio(c.tp + c.tn, c.total()), ratio(c.tp, c.tp + c.fn), ratio(c.tn, c.tn + c.fp),
          ratio(c.tp, c.tp + c.fp + c.fn)};
}

/// Area under the ROC curve via the Mann-Whitney rank statistic (ties count
/// one half). Empty when either class is absent.
inline std::optional<double> auc(std::span<const float> scores, std::span<const std::uint8_t> gt,
                                 std::span<const std::uint8_t> fov = {}) {
  detail::require_sizes(scores.size(), gt.size(), "auc");
  if (!fov.empty()) detail::require_sizes(scores.size(), fov.size(), "auc");
  detail::require_binary(gt, "auc");
  std::vector<std::pair<float, std::uint8_t>> items;
  items.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (fov.empty() || fov[i]) items.emplace_back(scores[i], gt[i]);
  std::sort(items.begin(), items.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  long pos = 0, neg = 0;
  // Twice the positive rank sum keeps tied (half-integer) ranks exact.
  long double twice_rank_sum = 0;
  for (std::size_t i = 0; i < items.size();) {
    std::size_t j = i;
    long tied_pos = 0;
    while (j < items.size() && items[j].first == items[i].first) tied_pos += items[j++].second;
    // ranks i+1 .. j, average (i + 1 + j) / 2
    twice_rank_sum += static_cast<long double>(tied_pos) * static_cast<long double>(i + 1 + j);
    pos += tied_pos;
    neg += static_cast<long>(j - i) - tied_pos;
    i = j;
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  const long double u = twice_rank_sum / 2 - static_cast<long double>(pos) * (pos + 1) / 2;
  return static_cast<double>(u / (static_cast<long double>(pos) * neg));
}

/// 1 - |A ∩ B| / |A ∪ B|; empty when both regions are empty.
inline std::optional<double> overlap_error(std::span<const std::uint8_t> pred,
                                           std::span<const std::uint8_t> gt) {
  detail::require_sizes(pred.size(), gt.size(), "overlap_error");
  detail::require_binary(pred, "overlap_error");
  detail::require_binary(gt, "overlap_error");
  long inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] & gt[i];
    uni += pred[i] | gt[i];
  }
  if (uni == 0) return std::nullopt;
  return 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
}

enum class Aggregation { PerImage, Pooled };

inline Aggregation parse_aggregation(const std::string& s) {
  if (s == "per_image") return Aggregation::PerImage;
  if (s == "pooled") return Aggregation::Pooled;
  throw Error("unknown aggregation '" + s + "' (expected per_image or pooled)");
}

inline const char* to_string(Aggregation a) {
  return a == Aggregation::PerImage ? "per_image" : "pooled";
}

using MetricValues = std::vector<std::pair<std::string, std::optional<double>>>;

/// Named scalar metrics plus provenance. Empty values serialize as null.
struct MetricsReport {
  std::string task;
  std::string method;
  std::string dataset;
  std::string checkpoint;
  double threshold = 0.5;
  Aggregation aggregation = Aggregation::PerImage;
  long images = 0;
  MetricValues metrics;
  std::vector<std::pair<std::string, MetricValues>> per_image;

  std::optional<double> get(const std::string& name) const {
    for (const auto& [k, v] : metrics)
      if (k == name) return v;
    throw Error("metric '" + name + "' not in report");
  }

  nlohmann::ordered_json to_json() const {
    auto values = [](const MetricValues& m) {
      nlohmann::ordered_json j = nlohmann::ordered_json::object();
      for (const auto& [k, v] : m) j[k] = v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
      return j;
    };
    nlohmann::ordered_json j;
    j["task"] = task;
    j["method"] = method;
    j["dataset"] = dataset;
    j["checkpoint"] = checkpoint;
    j["threshold"] = threshold;
    j["aggregation"] = to_string(aggregation);
    j["images"] = images;
    j["metrics"] = values(metrics);
    auto rows = nlohmann::ordered_json::array();
    for (const auto& [id, m] : per_image) {
      nlohmann::ordered_json r;
      r["id"] = id;
      r["metrics"] = values(m);
      rows.push_back(r);
    }
    j["per_image"] = rows;
    return j;
  }

  static MetricsReport from_json(const nlohmann::ordered_json& j) {
    auto values = [](const nlohmann::ordered_json& o) {
      MetricValues m;
      for (const auto& [k, v] : o.items())
        m.emplace_back(k, v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
      return m;
    };
    MetricsReport r;
    r.task = j.at("task");
    r.method = j.at("method");
    r.dataset = j.at("dataset");
    r.checkpoint = j.at("checkpoint");
    r.threshold = j.at("threshold");
    r.aggregation = parse_aggregation(j.at("aggregation"));
    r.images = j.at("images");
    r.metrics = values(j.at("metrics"));
    for (const auto& row : j.at("per_image")) r.per_image.emplace_back(row.at("id"), values(row.at("metrics")));
    return r;
  }
};

inline std::string format_metric(const std::optional<double>& v, int precision = 6) {
  if (!v) return "null";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << *v;
  return os.str();
}

/// Aligned-column CSV: one header row and one row per report.
inline std::string metrics_table_csv(std::span<const MetricsReport> rows) {
  if (rows.empty()) return "";
  std::vector<std::string> header{"Method"};
  for (const auto& [k, v] : rows.front().metrics) header.push_back(k);
  std::vector<std::vector<std::string>> cells{header};
  for (const auto& r : rows) {
    std::vector<std::string> line{r.method};
    for (std::size_t k = 1; k < header.size(); ++k) line.push_back(format_metric(r.get(header[k])));
    cells.push_back(line);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells)
    for (std::size_t k = 0; k < line.size(); ++k) width[k] = std::max(width[k], line[k].size());
  std::ostringstream os;
  for (const auto& line : cells) {
    for (std::size_t k = 0; k < line.size(); ++k) {
      if (k) os << ", ";
      os << std::left << std::setw(static_cast<int>(k + 1 == line.size() ? 0 : width[k])) << line[k];
    }
    os << '\n';
  }
  return os.str();
}

inline void write_report(const MetricsReport& r, const std::string& json_path,
                         const std::string& csv_path) {
  std::ofstream j(json_path);
  if (!j) throw Error("cannot write " + json_path);
  j << r.to_json().dump(2) << '\n';
  std::ofstream c(csv_path);
  if (!c) throw Error("cannot write " + csv_path);
  c << metrics_table_csv(std::span<const MetricsReport>(&r, 1));
}

inline std::optional<double> mean_defined(const std::vector<std::optional<double>>& xs) {
  double s = 0;
  long n = 0;
  for (const auto& x : xs)
    if (x) {
      s += *x;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

/// Accumulates Acc/AUC/Sen/Spe/IOU over a dataset, either averaging
/// per-image values or pooling every evaluated pixel.
class VesselEvaluator {
public:
  explicit VesselEvaluator(Aggregation agg = Aggregation::PerImage, double threshold = 0.5)
      : agg_(agg), threshold_(threshold) {}

  MetricValues add(const std::string& id, std::span<const float> probs,
                   std::span<const std::uint8_t> gt, std::span<const std::uint8_t> fov = {}) {
    std::vector<std::uint8_t> pred(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) pred[i] = probs[i] >= threshold_ ? 1 : 0;
    const auto counts = confusion(pred, gt, fov);
    const auto r = rates(counts);
    const auto a = auc(probs, gt, fov);
    MetricValues m{{"Acc", r.acc}, {"AUC", a}, {"Sen", r.sen}, {"Spe", r.spe}, {"IOU", r.iou}};
    per_image_.emplace_back(id, m);
    pooled_ += counts;
    if (agg_ == Aggregation::Pooled)
      for (std::size_t i = 0; i < probs.size(); ++i)
        if (fov.empty() || fov[i]) {
          scores_.push_back(probs[i]);
          labels_.push_back(gt[i]);
        }
    return m;
  }

  MetricsReport report() const {
    if (per_image_.empty()) throw Error("VesselEvaluator: no images evaluated");
    MetricsReport r;
    r.task = "vessel";
    r.threshold = threshold_;
    r.aggregation = agg_;
    r.images = static_cast<long>(per_image_.size());
    r.per_image = per_image_;
    if (agg_ == Aggregation::Pooled) {
      const auto rt = rates(pooled_);
      r.metrics = {{"Acc", rt.acc}, {"AUC", auc(scores_, labels_)}, {"Sen", rt.sen},
                   {"Spe", rt.spe}, {"IOU", rt.iou}};
    } else {
      for (const char* name : {"Acc", "AUC", "Sen", "Spe", "IOU"}) {
        std::vector<std::optional<double>> xs;
        for (const auto& [id, m] : per_image_)
          for (const auto& [k, v] : m)
            if (k == name) xs.push_back(v);
        r.metrics.emplace_back(name, mean_defined(xs));
      }
    }
    return r;
  }

  const ConfusionCounts& pooled_counts() const { return pooled_; }

private:
  Aggregation agg_;
  double threshold_;
  ConfusionCounts pooled_;
  std::vector<float> scores_;
  std::vector<std::uint8_t> labels_;
  std::vector<std::pair<std::string, MetricValues>> per_image_;
};

/// OE_disc, OE_cup and OE_total = OE_disc + OE_cup.
class DiscCupEvaluator {
public:
  explicit DiscCupEvaluator(Aggregation agg = Aggregation::PerImage) : agg_(agg) {}

  MetricValues add(const std::string& id, std::span<const std::uint8_t> pred_disc,
                   std::span<const std::uint8_t> pred_cup, std::span<const std::uint8_t> gt_disc,
                   std::span<const std::uint8_t> gt_cup) {
    const auto od = overlap_error(pred_disc, gt_disc);
    const auto oc = overlap_error(pred_cup, gt_cup);
    MetricValues m{{"OE_disc", od}, {"OE_cup", oc}, {"OE_total", sum(od, oc)}};
    per_image_.emplace_back(id, m);
    for (std::size_t i = 0; i < pred_disc.size(); ++i) {
      disc_.first += pred_disc[i] & gt_disc[i];
      disc_.second += pred_disc[i] | gt_disc[i];
      cup_.first += pred_cup[i] & gt_cup[i];
      cup_.second += pred_cup[i] | gt_cup[i];
    }
    return m;
  }

  MetricsReport report() const {
    if (per_image_.empty()) throw Error("DiscCupEvaluator: no images evaluated");
    MetricsReport r;
    r.task = "disc_cup";
    r.aggregation = agg_;
    r.images = static_cast<long>(per_image_.size());
    r.per_image = per_image_;
    if (agg_ == Aggregation::Pooled) {
      auto oe = [](const std::pair<long, long>& p) -> std::optional<double> {
        if (p.second == 0) return std::nullopt;
        return 1.0 - static_cast<double>(p.first) / static_cast<double>(p.second);
      };
      r.metrics = {{"OE_disc", oe(disc_)}, {"OE_cup", oe(cup_)}, {"OE_total", sum(oe(disc_), oe(cup_))}};
    } else {
      for (const char* name : {"OE_disc", "OE_cup", "OE_total"}) {
        std::vector<std::optional<double>> xs;
        for (const auto& [id, m] : per_image_)
          for (const auto& [k, v] : m)
            if (k == name) xs.push_back(v);
        r.metrics.emplace_back(name, mean_defined(xs));
      }
    }
    return r;
  }

private:
  static std::optional<double> sum(std::optional<double> a, std::optional<double> b) {
    if (!a || !b) return std::nullopt;
    return *a + *b;
  }

  Aggregation agg_;
  std::pair<long, long> disc_{0, 0};
  std::pair<long, long> cup_{0, 0};
  std::vector<std::pair<std::string, MetricValues>> per_image_;
};

}  // namespace stdnet
