#include "purview/probe.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "purview/checkpoint.hpp"
#include "purview/errors.hpp"

namespace purview {

std::string_view to_string(LabelDesign d) {
  switch (d) {
    case LabelDesign::all_hot: return "all_hot";
    case LabelDesign::top_k: return "top_k";
    case LabelDesign::class_subset: return "class_subset";
    case LabelDesign::taxonomy: return "taxonomy";
    case LabelDesign::empty: return "empty";
    case LabelDesign::fr_target: return "fr_target";
    case LabelDesign::fr_subset: return "fr_subset";
  }
  return "unknown";
}

std::string_view to_string(Provenance p) { return p == Provenance::nr ? "NR" : "FR"; }
std::string_view to_string(Objective o) { return o == Objective::bce ? "bce" : "max_logit"; }

LabelDesign label_design_from_string(std::string_view name) {
  for (auto d : {LabelDesign::all_hot, LabelDesign::top_k, LabelDesign::class_subset, LabelDesign::taxonomy,
                 LabelDesign::empty, LabelDesign::fr_target, LabelDesign::fr_subset})
    if (to_string(d) == name) return d;
  throw ConfigError("unknown label design '" + std::string(name) + "'");
}

Objective objective_from_string(std::string_view name) {
  if (name == "bce") return Objective::bce;
  if (name == "max_logit") return Objective::max_logit;
  throw ConfigError("unknown probe objective '" + std::string(name) + "'");
}

LabelRequest LabelRequest::top_k_of(std::size_t k) {
  LabelRequest r;
  r.design = LabelDesign::top_k;
  r.k = k;
  return r;
}

LabelRequest LabelRequest::of(LabelDesign design, std::vector<int> indices, bool allow_singleton) {
  LabelRequest r;
  r.design = design;
  r.indices = std::move(indices);
  r.allow_singleton = allow_singleton;
  return r;
}

LabelRequest LabelRequest::taxonomy_of(std::vector<std::vector<int>> groups) {
  LabelRequest r;
  r.design = LabelDesign::taxonomy;
  r.groups = std::move(groups);
  return r;
}

Provenance LabelRequest::provenance() const {
  return design == LabelDesign::fr_target || design == LabelDesign::fr_subset ? Provenance::fr : Provenance::nr;
}

nlohmann::json LabelRequest::to_json() const {
  nlohmann::json j{{"design", to_string(design)}};
  if (design == LabelDesign::top_k) j["k"] = k;
  if (!indices.empty()) j["indices"] = indices;
  if (!groups.empty()) j["groups"] = groups;
  if (allow_singleton) j["allow_singleton"] = true;
  return j;
}

LabelRequest LabelRequest::from_json(const nlohmann::json& j) {
  LabelRequest r;
  try {
    r.design = label_design_from_string(j.at("design").get<std::string>());
    r.k = j.value("k", r.k);
    r.indices = j.value("indices", r.indices);
    r.groups = j.value("groups", r.groups);
    r.allow_singleton = j.value("allow_singleton", false);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid label request: ") + e.what());
  }
  return r;
}

std::size_t ConfoundingLabel::positives() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1.0f));
}

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ";" : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> checked_members(const std::vector<int>& indices, std::size_t classes) {
  std::set<int> seen;
  for (int i : indices) {
    if (i < 0 || static_cast<std::size_t>(i) >= classes)
      throw LabelError("class index " + std::to_string(i) + " outside [0, " + std::to_string(classes) + ")");
    if (!seen.insert(i).second) throw LabelError("class index " + std::to_string(i) + " listed twice");
  }
  return {seen.begin(), seen.end()};
}

}  // namespace

ConfoundingLabel make_label(const LabelRequest& request, std::size_t classes, std::span<const float> logits) {
  if (classes < 2) throw LabelError("confounding labels need at least 2 classes");
  const Provenance prov = request.provenance();
  if (request.allow_singleton && prov != Provenance::fr)
    throw LabelError("allow_singleton is only accepted for full-reference designs");
  if (request.needs_logits() && logits.size() != classes)
    throw LabelError(std::string(to_string(request.design)) + " needs " + std::to_string(classes) + " logits, got " +
                     std::to_string(logits.size()));

  ConfoundingLabel label;
  label.bits_.assign(classes, 0.0f);
  label.design_ = request.design;
  label.provenance_ = prov;
  std::vector<int> members;

  switch (request.design) {
    case LabelDesign::all_hot:
      members.resize(classes);
      std::iota(members.begin(), members.end(), 0);
      label.text_ = "all_hot";
      break;
    case LabelDesign::empty:
      label.text_ = "empty";
      break;
    case LabelDesign::top_k: {
      if (request.k < 2 || request.k > classes)
        throw LabelError("top_k needs 2 <= k <= " + std::to_string(classes) + ", got k = " + std::to_string(request.k));
      std::vector<int> order(classes);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits[a] > logits[b]; });
      members.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(request.k));
      label.text_ = "top_k(" + std::to_string(request.k) + ")";
      break;
    }
    case LabelDesign::taxonomy: {
      if (request.groups.empty()) throw LabelError("taxonomy design needs class groups");
      std::set<int> all;
      for (const auto& g : request.groups)
        for (int c : checked_members(g, classes))
          if (!all.insert(c).second) throw LabelError("taxonomy groups overlap at class " + std::to_string(c));
      const int top = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
      std::size_t which = request.groups.size();
      for (std::size_t g = 0; g < request.groups.size(); ++g)
        if (std::find(request.groups[g].begin(), request.groups[g].end(), top) != request.groups[g].end()) which = g;
      if (which == request.groups.size())
        throw LabelError("predicted class " + std::to_string(top) + " is not in any taxonomy group");
      members = checked_members(request.groups[which], classes);
      label.text_ = "taxonomy(" + join_ints(members) + ")";
      break;
    }
    case LabelDesign::class_subset:
    case LabelDesign::fr_target:
    case LabelDesign::fr_subset:
      members = checked_members(request.indices, classes);
      label.text_ = std::string(to_string(request.design)) + "(" + join_ints(members) + ")";
      break;
  }

  for (int m : members) label.bits_[static_cast<std::size_t>(m)] = 1.0f;
  if (label.positives() == 1 && !(prov == Provenance::fr && request.allow_singleton))
    throw LabelError(label.text_ + " has exactly one positive class; confounding labels need 0 or at least 2");
  return label;
}

// --- probing ----------------------------------------------------------------

namespace {

Tensor as_batch_of_one(const Model& model, const Tensor& image) {
  const Shape& want = model.arch().input_shape;
  Tensor x = image;
  if (x.rank() == want.size()) {
    Shape s{1};
    s.insert(s.end(), want.begin(), want.end());
    x.reshape(s);
  }
  if (x.rank() != want.size() + 1 || x.dim(0) != 1 || !std::equal(want.begin(), want.end(), x.shape().begin() + 1))
    throw DimensionError("probe expects one image of shape " + shape_to_string(want) + ", got " +
                         shape_to_string(image.shape()));
  return x;
}

ProbeRecord probe_impl(Model& model, const Tensor& image, const ConfoundingLabel* fixed, const LabelRequest* request,
                       Objective objective, std::size_t sample_id) {
  const Tensor x = as_batch_of_one(model, image);
  const std::size_t n = model.arch().classes;
  ProbeRecord rec;
  rec.sample_id = sample_id;
  rec.objective = objective;
  model.drop_grad();
  try {
    Graph<float> g;
    const auto out = model.forward(g, g.input(x));
    const auto logits = g.value(out.logits);
    rec.logits.assign(logits.begin(), logits.end());
    std::optional<ConfoundingLabel> resolved;
    if (!fixed) resolved = make_label(*request, n, logits);
    const ConfoundingLabel& label = fixed ? *fixed : *resolved;
    if (label.classes() != n)
      throw LabelError("label has " + std::to_string(label.classes()) + " bits but the model has " +
                       std::to_string(n) + " classes");
    rec.label_design = label.describe();

    const Var loss = objective == Objective::bce ? ops::bce_with_logits<float>(g, out.logits, label.bits())
                                                 : ops::max_logit<float>(g, out.logits);
    rec.loss = g.scalar(loss);
    g.backward(loss);

    for (const Var a : out.activations) {
      double acc = 0.0;
      for (float v : g.value(a)) acc += static_cast<double>(v) * v;
      rec.activ_norms.push_back(acc);
    }
    for (const auto& p : model.params()) {
      double acc = 0.0;
      if (p.tensor.has_grad())
        for (float v : p.tensor.grad()) acc += static_cast<double>(v) * v;
      if (!std::isfinite(acc)) throw NumericError("non-finite gradient norm for " + p.name);
      rec.grad_norms.push_back(acc);
    }
  } catch (const NumericError& e) {
    model.drop_grad();
    throw NumericError("sample " + std::to_string(sample_id) + ": " + e.what());
  }
  model.drop_grad();
  return rec;
}

}  // namespace

ProbeRecord probe_sample(Model& model, const Tensor& image, const ConfoundingLabel& label, Objective objective,
                         std::size_t sample_id) {
  return probe_impl(model, image, &label, nullptr, objective, sample_id);
}

ProbeRecord probe_sample(Model& model, const Tensor& image, const LabelRequest& request, Objective objective,
                         std::size_t sample_id) {
  return probe_impl(model, image, nullptr, &request, objective, sample_id);
}

ProbeMatrix probe_batch(Model& model, const Dataset& ds, const LabelRequest& request, Objective objective,
                        std::size_t first_id) {
  ProbeMatrix m{model.param_names(), model.activation_names(), {}, {}};
  // a fixed label is checked once up front so design errors are not reported per sample
  std::optional<ConfoundingLabel> fixed;
  if (!request.needs_logits()) fixed = make_label(request, model.arch().classes);
  const Shape shape = ds.sample_shape();
  m.records.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Tensor x = make_batch(shape, ds.images.data(), i, 1);
    try {
      m.records.push_back(fixed ? probe_sample(model, x, *fixed, objective, first_id + i)
                                : probe_sample(model, x, request, objective, first_id + i));
    } catch (const NumericError& e) {
      m.failures.push_back({first_id + i, e.what()});
    } catch (const LabelError& e) {
      m.failures.push_back({first_id + i, e.what()});
    }
  }
  return m;
}

std::vector<std::vector<double>> ProbeMatrix::grad_rows() const {
  std::vector<std::vector<double>> out;
  for (const auto& r : records) out.push_back(r.grad_norms);
  return out;
}

std::vector<std::vector<double>> ProbeMatrix::activ_rows() const {
  std::vector<std::vector<double>> out;
  for (const auto& r : records) out.push_back(r.activ_norms);
  return out;
}

std::vector<double> ProbeMatrix::losses() const {
  std::vector<double> out;
  for (const auto& r : records) out.push_back(r.loss);
  return out;
}

double baseline_msp(std::span<const float> logits) {
  if (logits.empty()) throw DimensionError("softmax of an empty row");
  const double top = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (float z : logits) denom += std::exp(static_cast<double>(z) - top);
  return 1.0 / denom;
}

std::vector<double> baseline_msp(Model& model, const Tensor& images) {
  const Shape& want = model.arch().input_shape;
  if (images.rank() != want.size() + 1 || !std::equal(want.begin(), want.end(), images.shape().begin() + 1))
    throw DimensionError("baseline_msp expects [B, " + shape_to_string(want) + "], got " +
                         shape_to_string(images.shape()));
  const std::size_t b = images.dim(0), n = model.arch().classes;
  std::vector<double> out(b);
  constexpr std::size_t chunk = 256;
  for (std::size_t first = 0; first < b; first += chunk) {
    const std::size_t count = std::min(chunk, b - first);
    Graph<float> g;
    const auto res = model.forward(g, g.input(make_batch(want, images.data(), first, count)));
    const auto logits = g.value(res.logits);
    for (std::size_t i = 0; i < count; ++i) out[first + i] = baseline_msp(logits.subspan(i * n, n));
  }
  return out;
}

// --- feature files ----------------------------------------------------------

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

double parse_double(std::string_view s, std::size_t line) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw FormatError("feature CSV line " + std::to_string(line) + ": bad number '" + std::string(s) + "'");
  return v;
}

std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i)
    if (i == line.size() || line[i] == ',') {
      out.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  return out;
}

}  // namespace

void write_features(const std::filesystem::path& path, const ProbeMatrix& m, const nlohmann::json& extra) {
  const std::size_t L = m.param_names.size(), A = m.activation_names.size();
  std::string csv = "sample_id,label_design,objective,loss";
  for (std::size_t i = 0; i < L; ++i) csv += ",g" + std::to_string(i);
  for (std::size_t i = 0; i < A; ++i) csv += ",a" + std::to_string(i);
  csv += '\n';
  for (const auto& r : m.records) {
    if (r.grad_norms.size() != L || r.activ_norms.size() != A)
      throw DimensionError("probe record " + std::to_string(r.sample_id) + " does not match the column layout");
    csv += std::to_string(r.sample_id) + ',' + r.label_design + ',' + std::string(to_string(r.objective)) + ',' +
           format_double(r.loss);
    for (double v : r.grad_norms) csv += ',' + format_double(v);
    for (double v : r.activ_norms) csv += ',' + format_double(v);
    csv += '\n';
  }
  write_file(path, csv);

  nlohmann::json side;
  side["format"] = "purview.features";
  side["version"] = 1;
  nlohmann::json columns = nlohmann::json::object();
  for (std::size_t i = 0; i < L; ++i) columns["g" + std::to_string(i)] = m.param_names[i];
  for (std::size_t i = 0; i < A; ++i) columns["a" + std::to_string(i)] = m.activation_names[i];
  side["columns"] = columns;
  side["param_names"] = m.param_names;
  side["activation_names"] = m.activation_names;
  side["rows"] = m.records.size();
  side["failures"] = nlohmann::json::array();
  for (const auto& f : m.failures) side["failures"].push_back({{"sample_id", f.sample_id}, {"message", f.message}});
  if (!extra.is_null()) side["extra"] = extra;
  write_file(path.string() + ".json", side.dump(2) + "\n");
}

ProbeMatrix read_features(const std::filesystem::path& path) {
  ProbeMatrix m;
  const auto side_path = std::filesystem::path(path.string() + ".json");
  if (std::filesystem::exists(side_path)) {
    const auto side = nlohmann::json::parse(read_file(side_path));
    m.param_names = side.at("param_names").get<std::vector<std::string>>();
    m.activation_names = side.at("activation_names").get<std::vector<std::string>>();
    for (const auto& f : side.value("failures", nlohmann::json::array()))
      m.failures.push_back({f.at("sample_id").get<std::size_t>(), f.at("message").get<std::string>()});
  }
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty feature file");
  const auto header = split(line);
  if (header.size() < 4 || header[0] != "sample_id" || header[3] != "loss")
    throw FormatError(path.string() + ": not a feature CSV");
  std::size_t L = 0, A = 0;
  for (std::size_t i = 4; i < header.size(); ++i) (header[i][0] == 'g' ? L : A) += 1;
  if (m.param_names.empty())
    for (std::size_t i = 0; i < L; ++i) m.param_names.push_back("g" + std::to_string(i));
  if (m.activation_names.empty())
    for (std::size_t i = 0; i < A; ++i) m.activation_names.push_back("a" + std::to_string(i));
  if (m.param_names.size() != L || m.activation_names.size() != A)
    throw FormatError(path.string() + ": sidecar column names disagree with the CSV header");

  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size())
      throw FormatError(path.string() + " line " + std::to_string(lineno) + ": expected " +
                        std::to_string(header.size()) + " cells, got " + std::to_string(cells.size()));
    ProbeRecord r;
    r.sample_id = static_cast<std::size_t>(parse_double(cells[0], lineno));
    r.label_design = std::string(cells[1]);
    r.objective = objective_from_string(cells[2]);
    r.loss = parse_double(cells[3], lineno);
    for (std::size_t i = 0; i < L; ++i) r.grad_norms.push_back(parse_double(cells[4 + i], lineno));
    for (std::size_t i = 0; i < A; ++i) r.activ_norms.push_back(parse_double(cells[4 + L + i], lineno));
    m.records.push_back(std::move(r));
  }
  return m;
}

}  // namespace purview
