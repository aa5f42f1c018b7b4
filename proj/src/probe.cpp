#include "semprobe/probe.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <unordered_map>

#include "semprobe/error.hpp"
#include "semprobe/text.hpp"

namespace semprobe {

std::string_view to_string(ProbeTarget t) { return t == ProbeTarget::SE ? "se" : "accuracy"; }

ProbeTarget parse_probe_target(std::string_view text) {
  const auto t = to_lower(text);
  if (t == "se") return ProbeTarget::SE;
  if (t == "acc" || t == "accuracy") return ProbeTarget::ACCURACY;
  throw Error(ErrorCode::ParseError, "unknown probe target '" + std::string(text) + "'");
}

void FeatureSpec::validate(std::uint32_t n_layers) const {
  if (layers.empty()) throw Error(ErrorCode::BadConfig, "feature spec needs at least one layer");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] < 0 || static_cast<std::uint32_t>(layers[i]) >= n_layers)
      throw Error(ErrorCode::BadConfig, "layer " + std::to_string(layers[i]) + " outside [0, " +
                                            std::to_string(n_layers) + ")");
    if (i > 0 && layers[i] <= layers[i - 1])
      throw Error(ErrorCode::BadConfig, "layers must be strictly increasing");
  }
}

std::vector<int> parse_layer_list(std::string_view text) {
  auto to_int = [&](std::string_view s) {
    int v = 0;
    const auto t = trim(s);
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc{} || ptr != t.data() + t.size())
      throw Error(ErrorCode::ParseError, "bad layer list '" + std::string(text) + "'");
    return v;
  };
  std::vector<int> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto item = text.substr(start, comma == std::string_view::npos ? text.npos : comma - start);
    if (const auto dots = item.find(".."); dots != std::string_view::npos) {
      const int lo = to_int(item.substr(0, dots));
      const int hi = to_int(item.substr(dots + 2));
      if (hi < lo) throw Error(ErrorCode::ParseError, "descending layer range in '" + std::string(text) + "'");
      for (int l = lo; l <= hi; ++l) out.push_back(l);
    } else {
      out.push_back(to_int(item));
    }
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

// ---- standardization -------------------------------------------------------

Standardizer Standardizer::fit(const FeatureMatrix& x) {
  Standardizer s;
  s.mean.assign(x.cols, 0.0);
  s.stddev.assign(x.cols, 0.0);
  if (x.rows == 0) return s;
  const double n = static_cast<double>(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) s.mean[j] += x(i, j);
  for (auto& m : s.mean) m /= n;
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) {
      const double d = x(i, j) - s.mean[j];
      s.stddev[j] += d * d;
    }
  for (auto& sd : s.stddev) {
    sd = std::sqrt(sd / n);
    if (!(sd > 0.0)) sd = 1.0;
  }
  return s;
}

void Standardizer::apply(std::span<const double> in, std::span<double> out) const {
  if (is_identity()) {
    std::copy(in.begin(), in.end(), out.begin());
    return;
  }
  for (std::size_t j = 0; j < in.size(); ++j) out[j] = (in[j] - mean[j]) / stddev[j];
}

FeatureMatrix Standardizer::apply(const FeatureMatrix& x) const {
  FeatureMatrix out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) apply(x.row(i), out.row(i));
  return out;
}

// ---- training set ----------------------------------------------------------

void TrainingSet::validate() const {
  if (features.rows != labels.size() || labels.size() != ids.size())
    throw Error(ErrorCode::LengthMismatch, "training set rows/labels/ids disagree");
  if (labels.size() < 2) throw Error(ErrorCode::SingleClassTraining, "need at least 2 training rows");
  const auto positives = std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; });
  if (positives == 0 || static_cast<std::size_t>(positives) == labels.size())
    throw Error(ErrorCode::SingleClassTraining, "training labels contain a single class");
  for (double v : features.data)
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteFeature, "training features must be finite");
}

FeatureMatrix assemble_features(std::span<const HiddenStateRecord> records, const FeatureSpec& spec,
                                std::span<const std::string> ids) {
  if (spec.layers.empty()) throw Error(ErrorCode::BadConfig, "feature spec needs at least one layer");
  const std::size_t d = spec.hidden_dim;
  std::unordered_map<std::string, const HiddenStateRecord*> index;
  for (const auto& r : records) {
    if (r.position != spec.position || r.stream != spec.stream) continue;
    index[r.id + '\x1f' + std::to_string(r.layer)] = &r;
  }
  FeatureMatrix out(ids.size(), spec.concat_dim());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto row = out.row(i);
    for (std::size_t k = 0; k < spec.layers.size(); ++k) {
      const auto it = index.find(ids[i] + '\x1f' + std::to_string(spec.layers[k]));
      if (it == index.end())
        throw Error(ErrorCode::MissingRecord, "no " + std::string(to_string(spec.position)) + "/" +
                                                  std::string(to_string(spec.stream)) + " state for id '" +
                                                  ids[i] + "' at layer " + std::to_string(spec.layers[k]));
      const auto& vec = it->second->vector;
      if (vec.size() != d)
        throw Error(ErrorCode::DimMismatch, "state for '" + ids[i] + "' has " + std::to_string(vec.size()) +
                                                " components, expected " + std::to_string(d));
      std::copy(vec.begin(), vec.end(), row.begin() + static_cast<std::ptrdiff_t>(k * d));
    }
  }
  return out;
}

// ---- L-BFGS ----------------------------------------------------------------

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double inf_norm(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

struct Objective {
  const FeatureMatrix& x;
  std::span<const std::uint8_t> labels;
  double c;

  // theta = [w; b]
  double operator()(std::span<const double> theta, std::span<double> grad) const {
    return kernels::logistic_objective(x, labels, theta.first(x.cols), theta[x.cols], c, grad);
  }
};

struct LbfgsResult {
  std::vector<double> theta;
  int iterations = 0;
  bool converged = false;
  double gradient_norm = 0.0;
};

LbfgsResult minimize_lbfgs(const Objective& f, std::size_t dim, const FitOptions& opt) {
  constexpr double c1 = 1e-4, c2 = 0.9;
  LbfgsResult res;
  std::vector<double> theta(dim, 0.0), grad(dim), next(dim), next_grad(dim), dir(dim), alpha_hist;
  std::deque<std::pair<std::vector<double>, std::vector<double>>> pairs;  // (s, y)
  std::deque<double> rho;

  double fx = f(theta, grad);
  for (int iter = 0;; ++iter) {
    res.gradient_norm = inf_norm(grad);
    res.iterations = iter;
    if (res.gradient_norm <= opt.gradient_tolerance) {
      res.converged = true;
      break;
    }
    if (iter >= opt.max_iterations) break;

    // Two-loop recursion: dir = −H g.
    for (std::size_t i = 0; i < dim; ++i) dir[i] = -grad[i];
    alpha_hist.assign(pairs.size(), 0.0);
    for (std::size_t k = pairs.size(); k-- > 0;) {
      alpha_hist[k] = rho[k] * dot(pairs[k].first, dir);
      for (std::size_t i = 0; i < dim; ++i) dir[i] -= alpha_hist[k] * pairs[k].second[i];
    }
    if (!pairs.empty()) {
      const auto& [s, y] = pairs.back();
      const double scale = dot(s, y) / dot(y, y);
      for (auto& v : dir) v *= scale;
    }
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const double beta = rho[k] * dot(pairs[k].second, dir);
      for (std::size_t i = 0; i < dim; ++i) dir[i] += (alpha_hist[k] - beta) * pairs[k].first[i];
    }
    double slope = dot(grad, dir);
    if (!(slope < 0.0)) {
      pairs.clear();
      rho.clear();
      for (std::size_t i = 0; i < dim; ++i) dir[i] = -grad[i];
      slope = dot(grad, dir);
    }

    // Bracketing line search for the weak Wolfe conditions, with the
    // approximate-Wolfe acceptance once f changes fall below round-off.
    double step = pairs.empty() ? std::min(1.0, 1.0 / std::sqrt(dot(grad, grad))) : 1.0;
    double lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double f_next = fx;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      for (std::size_t i = 0; i < dim; ++i) next[i] = theta[i] + step * dir[i];
      f_next = f(next, next_grad);
      const double next_slope = dot(next_grad, dir);
      const bool armijo = f_next <= fx + c1 * step * slope;
      const bool approx = f_next <= fx + 1e-12 * std::abs(fx) && next_slope <= (2.0 * c1 - 1.0) * slope;
      if (!(armijo || approx) || !std::isfinite(f_next)) {
        hi = step;
        step = 0.5 * (lo + hi);
        continue;
      }
      if (next_slope < c2 * slope) {
        lo = step;
        step = std::isinf(hi) ? 2.0 * step : 0.5 * (lo + hi);
        continue;
      }
      accepted = true;
      break;
    }
    if (!accepted) break;

    std::vector<double> s(dim), y(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      s[i] = next[i] - theta[i];
      y[i] = next_grad[i] - grad[i];
    }
    const double sy = dot(s, y);
    if (sy > 1e-12 * dot(y, y)) {
      if (pairs.size() == static_cast<std::size_t>(opt.history)) {
        pairs.pop_front();
        rho.pop_front();
      }
      rho.push_back(1.0 / sy);
      pairs.emplace_back(std::move(s), std::move(y));
    }
    theta.swap(next);
    grad.swap(next_grad);
    fx = f_next;
  }
  res.theta = std::move(theta);
  return res;
}

}  // namespace

ProbeModel fit_probe(const TrainingSet& ts, const FitOptions& options, ProbeTarget target,
                     std::optional<double> gamma_star) {
  ts.validate();
  if (!(options.c > 0.0)) throw Error(ErrorCode::BadConfig, "inverse regularization C must be > 0");

  ProbeModel model;
  model.target = target;
  model.gamma_star = target == ProbeTarget::SE ? gamma_star : std::nullopt;
  const FeatureMatrix* x = &ts.features;
  FeatureMatrix standardized;
  if (options.standardize) {
    model.standardizer = Standardizer::fit(ts.features);
    standardized = model.standardizer.apply(ts.features);
    x = &standardized;
  }

  const Objective objective{*x, ts.labels, options.c};
  const auto result = minimize_lbfgs(objective, x->cols + 1, options);
  model.weights.assign(result.theta.begin(), result.theta.end() - 1);
  model.bias = result.theta.back();
  model.training_meta.n_train = ts.labels.size();
  model.training_meta.seed = options.seed;
  model.training_meta.iterations = result.iterations;
  model.training_meta.converged = result.converged;
  model.training_meta.gradient_norm = result.gradient_norm;
  return model;
}

double predict_proba(const ProbeModel& model, std::span<const double> features) {
  if (features.size() != model.weights.size())
    throw Error(ErrorCode::DimMismatch, "probe expects " + std::to_string(model.weights.size()) +
                                            " features, got " + std::to_string(features.size()));
  std::vector<double> z(features.size());
  model.standardizer.apply(features, z);
  return kernels::sigmoid(dot(z, model.weights) + model.bias);
}

std::vector<double> predict_proba(const ProbeModel& model, const FeatureMatrix& features) {
  if (features.cols != model.weights.size())
    throw Error(ErrorCode::DimMismatch, "probe expects " + std::to_string(model.weights.size()) +
                                            " features, got " + std::to_string(features.cols));
  if (model.standardizer.is_identity()) return kernels::predict_proba(features, model.weights, model.bias);
  return kernels::predict_proba(model.standardizer.apply(features), model.weights, model.bias);
}

std::vector<double> decision_function(const ProbeModel& model, const FeatureMatrix& features) {
  if (features.cols != model.weights.size())
    throw Error(ErrorCode::DimMismatch, "probe expects " + std::to_string(model.weights.size()) +
                                            " features, got " + std::to_string(features.cols));
  if (model.standardizer.is_identity()) return kernels::decision_function(features, model.weights, model.bias);
  return kernels::decision_function(model.standardizer.apply(features), model.weights, model.bias);
}

// ---- persistence -----------------------------------------------------------

void to_json(json& j, const ProbeModel& m) {
  json spec{{"position", to_string(m.feature_spec.position)},
            {"stream", to_string(m.feature_spec.stream)},
            {"layers", m.feature_spec.layers},
            {"hidden_dim", m.feature_spec.hidden_dim}};
  json standardizer = m.standardizer.is_identity()
                          ? json(nullptr)
                          : json{{"mean", m.standardizer.mean}, {"stddev", m.standardizer.stddev}};
  j = json{{"version", kProbeFormatVersion},
           {"target", to_string(m.target)},
           {"feature_spec", spec},
           {"weights", m.weights},
           {"bias", m.bias},
           {"standardizer", standardizer},
           {"gamma_star", m.gamma_star ? json(*m.gamma_star) : json(nullptr)},
           {"training_meta",
            {{"tasks", m.training_meta.tasks},
             {"n_train", m.training_meta.n_train},
             {"seed", m.training_meta.seed},
             {"iterations", m.training_meta.iterations},
             {"converged", m.training_meta.converged},
             {"gradient_norm", m.training_meta.gradient_norm}}}};
}

void from_json(const json& j, ProbeModel& m) {
  try {
    const int version = j.at("version").get<int>();
    if (version != kProbeFormatVersion)
      throw Error(ErrorCode::VersionUnsupported, "probe format version " + std::to_string(version));
    m.target = parse_probe_target(j.at("target").get<std::string>());
    const auto& spec = j.at("feature_spec");
    m.feature_spec.position = parse_position(spec.at("position").get<std::string>());
    m.feature_spec.stream = parse_stream(spec.at("stream").get<std::string>());
    m.feature_spec.layers = spec.at("layers").get<std::vector<int>>();
    m.feature_spec.hidden_dim = spec.at("hidden_dim").get<std::uint32_t>();
    m.weights = j.at("weights").get<std::vector<double>>();
    m.bias = j.at("bias").get<double>();
    const auto& st = j.at("standardizer");
    m.standardizer = {};
    if (!st.is_null()) {
      m.standardizer.mean = st.at("mean").get<std::vector<double>>();
      m.standardizer.stddev = st.at("stddev").get<std::vector<double>>();
    }
    const auto& g = j.at("gamma_star");
    m.gamma_star = g.is_null() ? std::nullopt : std::optional<double>(g.get<double>());
    const auto& meta = j.at("training_meta");
    m.training_meta.tasks = meta.at("tasks").get<std::vector<std::string>>();
    m.training_meta.n_train = meta.at("n_train").get<std::size_t>();
    m.training_meta.seed = meta.at("seed").get<std::uint64_t>();
    m.training_meta.iterations = meta.value("iterations", 0);
    m.training_meta.converged = meta.value("converged", false);
    m.training_meta.gradient_norm = meta.value("gradient_norm", 0.0);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaMismatch, e.what());
  }
  if (m.weights.size() != m.feature_spec.concat_dim())
    throw Error(ErrorCode::SchemaMismatch, "weights length " + std::to_string(m.weights.size()) +
                                               " != layers x hidden_dim " +
                                               std::to_string(m.feature_spec.concat_dim()));
  if (!m.standardizer.is_identity() &&
      (m.standardizer.mean.size() != m.weights.size() || m.standardizer.stddev.size() != m.weights.size()))
    throw Error(ErrorCode::SchemaMismatch, "standardizer width does not match weights");
  for (double sd : m.standardizer.stddev)
    if (!(sd > 0.0)) throw Error(ErrorCode::SchemaMismatch, "standardizer stddev must be > 0");
}

void save_probe(const ProbeModel& model, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << json(model).dump(2) << '\n';
}

ProbeModel load_probe(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::SchemaMismatch, e.what());
  }
  return j.get<ProbeModel>();
}

}  // namespace semprobe
