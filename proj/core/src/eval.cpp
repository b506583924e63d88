#include "hsnn/eval.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>

#include "hsnn/datagen.hpp"
#include "hsnn/monn.hpp"
#include "json_detail.hpp"

namespace hsnn {

double normalized_entropy(std::span<const double> probs, std::span<const std::uint8_t> labels) {
  if (probs.size() != labels.size()) {
    throw DimensionError("normalized_entropy: " + std::to_string(probs.size()) + " predictions, " +
                         std::to_string(labels.size()) + " labels");
  }
  double pos = 0.0;
  for (auto y : labels) pos += y;
  if (pos == 0.0 || pos == double(labels.size())) {
    throw NumericError("normalized_entropy: labels are all " +
                       std::string(pos == 0.0 ? "0" : "1") + ", base-rate log loss is degenerate");
  }
  const double p = pos / double(labels.size());
  double ll = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) ll += clamped_bce(probs[i], labels[i]);
  ll /= double(labels.size());
  const double base = -(p * std::log(p) + (1.0 - p) * std::log(1.0 - p));
  return ll / base;
}

double recall_at_k(std::span<const std::uint64_t> retrieved,
                   std::span<const std::uint64_t> relevant) {
  if (relevant.empty()) return 0.0;
  std::vector<std::uint64_t> a(retrieved.begin(), retrieved.end());
  std::vector<std::uint64_t> b(relevant.begin(), relevant.end());
  std::sort(a.begin(), a.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
  std::sort(b.begin(), b.end());
  b.erase(std::unique(b.begin(), b.end()), b.end());
  std::vector<std::uint64_t> both;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
  return double(both.size()) / double(b.size());
}

double adjusted_rand_index(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
  if (a.size() != b.size()) {
    throw DimensionError("adjusted_rand_index: label vectors of length " +
                         std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  const double n = double(a.size());
  if (a.size() < 2) return 1.0;
  std::map<std::pair<std::uint32_t, std::uint32_t>, double> joint;
  std::map<std::uint32_t, double> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1.0;
    ra[a[i]] += 1.0;
    rb[b[i]] += 1.0;
  }
  const auto c2 = [](double x) { return x * (x - 1.0) / 2.0; };
  double index = 0.0, sa = 0.0, sb = 0.0;
  for (const auto& [k, v] : joint) index += c2(v);
  for (const auto& [k, v] : ra) sa += c2(v);
  for (const auto& [k, v] : rb) sb += c2(v);
  const double expected = sa * sb / c2(n);
  const double max_index = 0.5 * (sa + sb);
  if (max_index == expected) return 1.0;  // both partitions trivial
  return (index - expected) / (max_index - expected);
}

double MetricsReport::mean_ne() const {
  if (ne.empty()) return 0.0;
  double s = 0.0;
  for (double x : ne) s += x;
  return s / double(ne.size());
}

std::string MetricsReport::to_json() const {
  detail::Json j;
  j["run_id"] = run_id;
  j["mode"] = mode;
  j["toggles"] = toggles;
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  j["dataset_hash"] = dataset_hash;
  j["ne"] = ne;
  j["mean_ne"] = mean_ne();
  j["layer_ne"] = layer_ne;
  detail::Json rec = detail::Json::object();
  for (const auto& [k, v] : recall) rec[std::to_string(k)] = v;
  j["recall"] = rec;
  j["occupancy"] = occupancy;
  j["occupancy_ratio"] = occupancy_ratio;
  j["macs_total"] = macs_total;
  j["brute_force_macs"] = brute_force_macs;
  j["items_scored"] = items_scored;
  j["train_steps"] = train_steps;
  return j.dump(2) + "\n";
}

std::uint64_t MetricsReport::hash() const { return fnv1a(to_json()); }

std::string csv_header(const std::vector<std::size_t>& ks, std::size_t tasks) {
  std::string h = "run_id,mode,toggles,seed";
  for (std::size_t t = 0; t < tasks; ++t) h += ",ne_task_" + std::to_string(t);
  for (std::size_t k : ks) h += ",recall_at_" + std::to_string(k);
  h += ",occupancy_ratio,macs_total,config_hash";
  for (std::size_t t = 0; t < tasks; ++t) h += ",delta_ne_task_" + std::to_string(t);
  h += ",delta_occupancy_ratio";
  return h + "\n";
}

std::string csv_row(const MetricsReport& r, const MetricsReport& baseline) {
  char buf[64];
  const auto num = [&](double x) {
    std::snprintf(buf, sizeof buf, "%.6f", x);
    return std::string(buf);
  };
  std::string row = r.run_id + "," + r.mode + "," + r.toggles + "," + std::to_string(r.seed);
  for (double x : r.ne) row += "," + num(x);
  for (const auto& [k, v] : r.recall) row += "," + num(v);
  row += "," + num(r.occupancy_ratio) + "," + std::to_string(r.macs_total);
  std::snprintf(buf, sizeof buf, "%016" PRIx64, r.config_hash);
  row += std::string(",") + buf;
  for (std::size_t t = 0; t < r.ne.size(); ++t) {
    row += "," + num(r.ne[t] - (t < baseline.ne.size() ? baseline.ne[t] : 0.0));
  }
  row += "," + num(r.occupancy_ratio - baseline.occupancy_ratio);
  return row + "\n";
}

}  // namespace hsnn
