#include "purview/evalstat.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <sstream>

#include "purview/errors.hpp"
#include "purview/probe.hpp"

namespace purview {

std::string_view to_string(Orientation o) {
  return o == Orientation::higher_is_anomalous ? "higher_is_anomalous" : "lower_is_anomalous";
}

void ScoreSet::validate() const {
  if (in_scores.empty() || out_scores.empty()) throw ConfigError("score set needs both normal and anomalous scores");
  for (const auto* side : {&in_scores, &out_scores})
    for (double v : *side)
      if (!std::isfinite(v)) throw ConfigError("score set contains a non-finite score");
}

namespace {

/// Sorted copies with the orientation applied (higher = more anomalous).
std::pair<std::vector<double>, std::vector<double>> oriented(const ScoreSet& s) {
  s.validate();
  auto in = s.in_scores;
  auto out = s.out_scores;
  if (s.orientation == Orientation::lower_is_anomalous) {
    for (auto& v : in) v = -v;
    for (auto& v : out) v = -v;
  }
  std::sort(in.begin(), in.end());
  std::sort(out.begin(), out.end());
  return {std::move(in), std::move(out)};
}

double balanced_at(const std::vector<double>& in, const std::vector<double>& out, double t) {
  const auto in_le = std::upper_bound(in.begin(), in.end(), t) - in.begin();
  const auto out_le = std::upper_bound(out.begin(), out.end(), t) - out.begin();
  return 0.5 * static_cast<double>(in_le) / static_cast<double>(in.size()) +
         0.5 * static_cast<double>(out.size() - static_cast<std::size_t>(out_le)) / static_cast<double>(out.size());
}

}  // namespace

double detection_accuracy_max(const ScoreSet& s) {
  const auto [in, out] = oriented(s);
  // Thresholding at a score value u is the same split as the midpoint just
  // above it; -inf and +inf both give 0.5.
  double best = 0.5;
  for (const auto* side : {&in, &out})
    for (double u : *side) best = std::max(best, balanced_at(in, out, u));
  return best;
}

double detection_accuracy_at(const ScoreSet& s, double delta) {
  const auto [in, out] = oriented(s);
  const double t = s.orientation == Orientation::lower_is_anomalous ? -delta : delta;
  return balanced_at(in, out, t);
}

double auroc(const ScoreSet& s) {
  const auto [in, out] = oriented(s);
  double wins = 0.0;
  for (double v : out) {
    const auto lo = std::lower_bound(in.begin(), in.end(), v);
    const auto hi = std::upper_bound(lo, in.end(), v);
    wins += static_cast<double>(lo - in.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(in.size()) * static_cast<double>(out.size()));
}

double aupr(const ScoreSet& s) {
  const auto [in, out] = oriented(s);
  std::vector<std::pair<double, bool>> all;
  all.reserve(in.size() + out.size());
  for (double v : in) all.emplace_back(v, false);
  for (double v : out) all.emplace_back(v, true);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

  const double positives = static_cast<double>(out.size());
  double tp = 0.0, fp = 0.0, ap = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    double group_tp = 0.0;
    for (; j < all.size() && all[j].first == all[i].first; ++j) {
      if (all[j].second) group_tp += 1.0;
      else fp += 1.0;
    }
    tp += group_tp;
    if (group_tp > 0.0) ap += group_tp * (tp / (tp + fp));
    i = j;
  }
  return ap / positives;
}

namespace {

constexpr std::array<double, 6> kLevels{0.2, 0.1, 0.05, 0.02, 0.01, 0.001};

constexpr double kTable[30][6] = {
    {3.0777, 6.3138, 12.7062, 31.8205, 63.6567, 636.6192}, {1.8856, 2.9200, 4.3027, 6.9646, 9.9248, 31.5991},
    {1.6377, 2.3534, 3.1824, 4.5407, 5.8409, 12.9240},     {1.5332, 2.1318, 2.7764, 3.7469, 4.6041, 8.6103},
    {1.4759, 2.0150, 2.5706, 3.3649, 4.0321, 6.8688},      {1.4398, 1.9432, 2.4469, 3.1427, 3.7074, 5.9588},
    {1.4149, 1.8946, 2.3646, 2.9980, 3.4995, 5.4079},      {1.3968, 1.8595, 2.3060, 2.8965, 3.3554, 5.0413},
    {1.3830, 1.8331, 2.2622, 2.8214, 3.2498, 4.7809},      {1.3722, 1.8125, 2.2281, 2.7638, 3.1693, 4.5869},
    {1.3634, 1.7959, 2.2010, 2.7181, 3.1058, 4.4370},      {1.3562, 1.7823, 2.1788, 2.6810, 3.0545, 4.3178},
    {1.3502, 1.7709, 2.1604, 2.6503, 3.0123, 4.2208},      {1.3450, 1.7613, 2.1448, 2.6245, 2.9768, 4.1405},
    {1.3406, 1.7531, 2.1314, 2.6025, 2.9467, 4.0728},      {1.3368, 1.7459, 2.1199, 2.5835, 2.9208, 4.0150},
    {1.3334, 1.7396, 2.1098, 2.5669, 2.8982, 3.9651},      {1.3304, 1.7341, 2.1009, 2.5524, 2.8784, 3.9216},
    {1.3277, 1.7291, 2.0930, 2.5395, 2.8609, 3.8834},      {1.3253, 1.7247, 2.0860, 2.5280, 2.8453, 3.8495},
    {1.3232, 1.7207, 2.0796, 2.5176, 2.8314, 3.8193},      {1.3212, 1.7171, 2.0739, 2.5083, 2.8188, 3.7921},
    {1.3195, 1.7139, 2.0687, 2.4999, 2.8073, 3.7676},      {1.3178, 1.7109, 2.0639, 2.4922, 2.7969, 3.7454},
    {1.3163, 1.7081, 2.0595, 2.4851, 2.7874, 3.7251},      {1.3150, 1.7056, 2.0555, 2.4786, 2.7787, 3.7066},
    {1.3137, 1.7033, 2.0518, 2.4727, 2.7707, 3.6896},      {1.3125, 1.7011, 2.0484, 2.4671, 2.7633, 3.6739},
    {1.3114, 1.6991, 2.0452, 2.4620, 2.7564, 3.6594},      {1.3104, 1.6973, 2.0423, 2.4573, 2.7500, 3.6460},
};

constexpr std::array<double, 6> kNormal{1.2816, 1.6449, 1.9600, 2.3263, 2.5758, 3.2905};

}  // namespace

double t_critical(int df, double p, std::string* note) {
  if (df < 1) throw ConfigError("t-test needs at least one degree of freedom");
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("significance level must be in (0, 1)");
  std::size_t level = 0;
  for (std::size_t i = 1; i < kLevels.size(); ++i)
    if (std::abs(std::log(kLevels[i] / p)) < std::abs(std::log(kLevels[level] / p))) level = i;
  std::ostringstream msg;
  if (kLevels[level] != p) msg << "p=" << p << " not tabulated, used p=" << kLevels[level];
  double value = 0.0;
  if (df <= 30) {
    value = kTable[df - 1][level];
  } else {
    value = kNormal[level];
    msg << (msg.tellp() > 0 ? "; " : "") << "df=" << df << " uses the normal quantile";
  }
  if (note != nullptr) *note = msg.str();
  return value;
}

nlohmann::json TTestResult::to_json() const {
  nlohmann::json j{{"m", m},   {"sigma2", sigma2},   {"k", k},           {"r", r},
                   {"n1", n1}, {"n2", n2},           {"p", p},           {"critical", critical},
                   {"df", k * r - 1}, {"significant", significant}, {"degenerate", degenerate}};
  // JSON has no infinity; a degenerate t is recorded by its sign.
  j["t"] = std::isfinite(t) ? nlohmann::json(t) : nlohmann::json(t > 0 ? "+inf" : "-inf");
  if (!note.empty()) j["note"] = note;
  return j;
}

TTestResult corrected_ttest(const std::vector<double>& a, const std::vector<double>& b, std::size_t k, std::size_t r,
                            double n1, double n2, double p) {
  if (k * r < 2) throw ConfigError("t-test needs k * r >= 2");
  if (a.size() != k * r || b.size() != k * r)
    throw DimensionError("t-test expects " + std::to_string(k * r) + " values per side");
  if (!(n1 > 0.0) || !(n2 > 0.0)) throw ConfigError("t-test needs positive training and testing sizes");

  TTestResult res;
  res.k = k;
  res.r = r;
  res.n1 = n1;
  res.n2 = n2;
  res.p = p;
  const double kr = static_cast<double>(k * r);
  std::vector<double> x(k * r);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = a[i] - b[i];
  double total = 0.0;
  for (double v : x) total += v;
  res.m = total / kr;
  double ss = 0.0;
  for (double v : x) ss += (v - res.m) * (v - res.m);
  res.sigma2 = ss / (kr - 1.0);
  res.critical = t_critical(static_cast<int>(k * r - 1), p, &res.note);

  if (res.m == 0.0) {
    res.t = 0.0;
  } else if (res.sigma2 == 0.0) {
    res.t = std::copysign(std::numeric_limits<double>::infinity(), res.m);
    res.degenerate = true;
  } else {
    res.t = res.m / std::sqrt((1.0 / kr + n2 / n1) * res.sigma2);
  }
  res.significant = std::abs(res.t) > res.critical;
  return res;
}

nlohmann::json Metrics::to_json() const {
  return {{"acc_max", acc_max}, {"acc_fixed", acc_fixed}, {"auroc", auroc}, {"aupr", aupr}};
}

Metrics evaluate(const ScoreSet& s, double delta) {
  return {detection_accuracy_max(s), detection_accuracy_at(s, delta), auroc(s), aupr(s)};
}

nlohmann::json EvalRow::to_json() const {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& m : rounds) per.push_back(m.to_json());
  nlohmann::json j{{"pairing", pairing}, {"method", method}, {"mean", mean.to_json()}, {"rounds", per}};
  if (ttest) j["ttest"] = ttest->to_json();
  return j;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json rs = nlohmann::json::array();
  for (const auto& r : rows) rs.push_back(r.to_json());
  return {{"format", "purview.eval"}, {"version", 1}, {"config", config}, {"rows", rs}};
}

std::string EvalReport::to_csv() const {
  std::string out = "pairing,method,acc_max,acc_fixed,auroc,aupr,t,significant\n";
  for (const auto& r : rows) {
    out += r.pairing + "," + r.method + "," + format_double(r.mean.acc_max) + "," + format_double(r.mean.acc_fixed) +
           "," + format_double(r.mean.auroc) + "," + format_double(r.mean.aupr) + ",";
    if (r.ttest) out += format_double(r.ttest->t) + "," + (r.ttest->significant ? "1" : "0");
    else out += ",";
    out += "\n";
  }
  return out;
}

}  // namespace purview
