#include "semprobe/synthetic_lab.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "semprobe/clustering.hpp"
#include "semprobe/error.hpp"
#include "semprobe/uncertainty.hpp"

namespace semprobe {

void SyntheticTaskConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error(ErrorCode::BadConfig, what); };
  if (task_name.empty() || task_name.find_first_of(",;/\\\n") != std::string::npos)
    bad("task_name must be non-empty without ',', ';', '/', '\\' or newlines");
  if (n_prompts < 1) bad("n_prompts must be ≥ 1");
  if (n_meanings < 1) bad("n_meanings must be ≥ 1");
  if (!(dirichlet_alpha > 0.0) || !std::isfinite(dirichlet_alpha)) bad("dirichlet_alpha must be > 0");
  if (paraphrases_per_meaning < 1 || paraphrases_per_meaning > kMaxParaphrases)
    bad("paraphrases_per_meaning must lie in [1, " + std::to_string(kMaxParaphrases) + "]");
  if (n_samples < 1) bad("n_samples must be ≥ 1");
  if (hidden_dim < 2) bad("hidden_dim must be ≥ 2");
  if (n_layers < 1 || n_layers > 65535) bad("n_layers must lie in [1, 65535]");
  if (!std::isfinite(signal_weight)) bad("signal_weight must be finite");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) bad("noise_sigma must be ≥ 0");
  if (!std::isfinite(shortcut_weight)) bad("shortcut_weight must be finite");
  if (shortcut_slot < 0 || static_cast<std::uint32_t>(shortcut_slot) + 2 > hidden_dim)
    bad("shortcut_slot must lie in [0, hidden_dim − 2]");
  if (!(context_effect >= 0.0 && context_effect <= 1.0)) bad("context_effect must lie in [0, 1]");
  if (!(knowledge_threshold >= 0.0 && knowledge_threshold <= 1.0)) bad("knowledge_threshold must lie in [0, 1]");
  if (!(label_flip_rate >= 0.0 && label_flip_rate <= 1.0)) bad("label_flip_rate must lie in [0, 1]");
}

void to_json(json& j, const SyntheticTaskConfig& c) {
  j = json{{"task_name", c.task_name},
           {"seed", c.seed},
           {"world_seed", c.world_seed},
           {"n_prompts", c.n_prompts},
           {"n_meanings", c.n_meanings},
           {"dirichlet_alpha", c.dirichlet_alpha},
           {"paraphrases_per_meaning", c.paraphrases_per_meaning},
           {"n_samples", c.n_samples},
           {"hidden_dim", c.hidden_dim},
           {"n_layers", c.n_layers},
           {"signal_weight", c.signal_weight},
           {"noise_sigma", c.noise_sigma},
           {"shortcut_weight", c.shortcut_weight},
           {"shortcut_slot", c.shortcut_slot},
           {"context_effect", c.context_effect},
           {"knowledge_threshold", c.knowledge_threshold},
           {"label_flip_rate", c.label_flip_rate}};
}

void from_json(const json& j, SyntheticTaskConfig& c) {
  if (!j.is_object()) throw Error(ErrorCode::BadConfig, "lab config must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "task_name") c.task_name = v.get<std::string>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "world_seed") c.world_seed = v.get<std::uint64_t>();
      else if (key == "n_prompts") c.n_prompts = v.get<std::size_t>();
      else if (key == "n_meanings") c.n_meanings = v.get<int>();
      else if (key == "dirichlet_alpha") c.dirichlet_alpha = v.get<double>();
      else if (key == "paraphrases_per_meaning") c.paraphrases_per_meaning = v.get<int>();
      else if (key == "n_samples") c.n_samples = v.get<int>();
      else if (key == "hidden_dim") c.hidden_dim = v.get<std::uint32_t>();
      else if (key == "n_layers") c.n_layers = v.get<std::uint32_t>();
      else if (key == "signal_weight") c.signal_weight = v.get<double>();
      else if (key == "noise_sigma") c.noise_sigma = v.get<double>();
      else if (key == "shortcut_weight") c.shortcut_weight = v.get<double>();
      else if (key == "shortcut_slot") c.shortcut_slot = v.get<int>();
      else if (key == "context_effect") c.context_effect = v.get<double>();
      else if (key == "knowledge_threshold") c.knowledge_threshold = v.get<double>();
      else if (key == "label_flip_rate") c.label_flip_rate = v.get<double>();
      else throw Error(ErrorCode::BadConfig, "unknown lab config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadConfig, std::string("lab config: ") + e.what());
  }
}

namespace {

// Portable draws: only the engine's raw output is used, never the
// implementation-defined standard distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform_open() {
    double u;
    do u = uniform();
    while (u == 0.0);
    return u;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform_open()));
    const double theta = 2.0 * M_PI * uniform();
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double gamma(double alpha) {
    if (alpha < 1.0) return gamma(alpha + 1.0) * std::pow(uniform_open(), 1.0 / alpha);
    const double d = alpha - 1.0 / 3.0, c = 1.0 / std::sqrt(9.0 * d);
    while (true) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_open();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
    }
  }

  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index, std::uint64_t tag) {
  return splitmix64(splitmix64(splitmix64(seed) ^ index) ^ (tag * 0x632be59bd9b4e019ULL));
}

enum StreamTag : std::uint64_t { kPi = 1, kSamples = 2, kNoise = 3, kTaskDirections = 4, kWorldDirections = 5 };

constexpr const char* kTemplates[kMaxParaphrases] = {
    "{w}", "it is {w}", "the answer is {w}", "{w} is the answer",
    "i think it is {w}", "probably {w}", "my answer is {w}", "{w} i believe"};

std::string render(const char* tmpl, const std::string& word) {
  std::string s(tmpl);
  s.replace(s.find("{w}"), 3, word);
  return s;
}

std::string word_of(std::size_t prompt, int meaning) {
  return "p" + std::to_string(prompt) + "m" + std::to_string(meaning);
}

std::string prompt_id(const SyntheticTaskConfig& c, std::size_t i) {
  std::ostringstream s;
  s << c.task_name << '-' << std::setw(6) << std::setfill('0') << i;
  return s.str();
}

std::vector<double> unit_vector(Rng& rng, std::size_t d) {
  std::vector<double> v(d);
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

struct Directions {
  std::vector<std::vector<double>> base, se, shortcut;  // per layer
};

Directions make_directions(const SyntheticTaskConfig& c) {
  Directions d;
  for (std::uint32_t l = 0; l < c.n_layers; ++l) {
    // World-level orthonormal frame: u first, then one shortcut slot per task.
    Rng world(stream_seed(c.world_seed, l, kWorldDirections));
    std::vector<std::vector<double>> frame{unit_vector(world, c.hidden_dim)};
    for (int k = 0; k <= c.shortcut_slot; ++k) {
      auto v = unit_vector(world, c.hidden_dim);
      for (const auto& f : frame) {
        double proj = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) proj += v[i] * f[i];
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= proj * f[i];
      }
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      for (auto& x : v) x /= norm;
      frame.push_back(std::move(v));
    }
    d.se.push_back(frame.front());
    d.shortcut.push_back(frame.back());
    Rng task(stream_seed(c.seed, l, kTaskDirections));
    std::vector<double> base(c.hidden_dim);
    for (auto& x : base) x = task.normal();
    d.base.push_back(std::move(base));
  }
  return d;
}

int argmax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

double empirical_entropy(const std::vector<int>& meanings, int n_meanings) {
  std::vector<int> counts(static_cast<std::size_t>(n_meanings) + 1, 0);
  for (int m : meanings) ++counts[static_cast<std::size_t>(m)];
  const double n = static_cast<double>(meanings.size());
  double h = 0.0;
  for (int k : counts)
    if (k > 0) {
      const double p = k / n;
      h -= p * std::log(p);
    }
  return h;
}

GenerationSample make_sample(const std::string& text, double log_prob, double temperature) {
  GenerationSample s;
  s.text = text;
  s.temperature = temperature;
  std::size_t tokens = 1;
  for (char ch : text)
    if (ch == ' ') ++tokens;
  s.token_log_probs.assign(tokens, log_prob / static_cast<double>(tokens));
  return s;
}

// Samples, generation set and hidden states for prompt i given its meaning
// distribution and gold meaning. Draw counts per stream do not depend on π,
// so changing π reuses the same uniforms.
void realize(const SyntheticTaskConfig& c, const Directions& dirs, std::size_t i, SyntheticPrompt& p,
             GenerationSet& gen, std::vector<HiddenStateRecord>& hidden) {
  const int paraphrases = c.paraphrases_per_meaning;
  const double log_p_para = std::log(static_cast<double>(paraphrases));
  auto log_prob = [&](int m) { return std::log(std::max(p.pi[static_cast<std::size_t>(m)], 1e-300)) - log_p_para; };

  Rng rng(stream_seed(c.seed, i, kSamples));
  p.sample_meanings.clear();
  gen = GenerationSet{};
  gen.id = prompt_id(c, i);
  gen.decode_config.n_samples = c.n_samples;
  for (int s = 0; s < c.n_samples; ++s) {
    const double u = rng.uniform();
    double acc = 0.0;
    int m = 0;
    const int last = static_cast<int>(p.pi.size()) - 1;
    for (; m < last; ++m) {
      acc += p.pi[static_cast<std::size_t>(m)];
      if (u < acc) break;
    }
    while (p.pi[static_cast<std::size_t>(m)] <= 0.0 && m > 0) --m;
    const std::size_t para = rng.below(static_cast<std::size_t>(paraphrases));
    p.sample_meanings.push_back(m);
    gen.samples.push_back(make_sample(render(kTemplates[para], word_of(i, m)), log_prob(m), 1.0));
  }
  p.greedy_meaning = argmax(p.pi);
  gen.greedy = make_sample(word_of(i, p.greedy_meaning), log_prob(p.greedy_meaning), 0.0);
  p.gold_se = empirical_entropy(p.sample_meanings, c.n_meanings);
  p.correct = p.greedy_meaning == p.gold_meaning;

  Rng noise(stream_seed(c.seed, i, kNoise));
  const double scale = c.noise_sigma / std::sqrt(static_cast<double>(c.hidden_dim));
  const double sign = p.correct ? 1.0 : -1.0;
  for (Position pos : {Position::SLT, Position::TBG})
    for (std::uint32_t l = 0; l < c.n_layers; ++l) {
      HiddenStateRecord r;
      r.id = gen.id;
      r.position = pos;
      r.stream = Stream::HIDDEN;
      r.layer = static_cast<std::uint16_t>(l);
      r.vector.resize(c.hidden_dim);
      for (std::uint32_t k = 0; k < c.hidden_dim; ++k)
        r.vector[k] = static_cast<float>(dirs.base[l][k] + c.signal_weight * p.gold_se * dirs.se[l][k] +
                                         c.shortcut_weight * sign * dirs.shortcut[l][k] + scale * noise.normal());
      hidden.push_back(std::move(r));
    }
}

ArchiveManifest lab_manifest(const SyntheticTaskConfig& c, std::size_t records) {
  ArchiveManifest m;
  m.model_name = "synthetic-lab";
  m.hidden_dim = c.hidden_dim;
  m.n_layers = c.n_layers;
  m.positions = {Position::SLT, Position::TBG};
  m.streams = {Stream::HIDDEN};
  m.record_count = records;
  return m;
}

void rebuild(SyntheticTask& t) {
  const auto& c = t.config;
  const auto dirs = make_directions(c);
  t.gen_sets.assign(c.n_prompts, {});
  t.hidden.clear();
  t.hidden.reserve(c.n_prompts * 2 * c.n_layers);
  for (std::size_t i = 0; i < c.n_prompts; ++i) realize(c, dirs, i, t.prompts[i], t.gen_sets[i], t.hidden);
  t.manifest = lab_manifest(c, t.hidden.size());
}

}  // namespace

std::vector<double> SyntheticTask::gold_se() const {
  std::vector<double> out;
  for (const auto& p : prompts) out.push_back(p.gold_se);
  return out;
}

std::vector<std::uint8_t> SyntheticTask::correct() const {
  std::vector<std::uint8_t> out;
  for (const auto& p : prompts) out.push_back(p.correct ? 1 : 0);
  return out;
}

double SyntheticTask::accuracy() const {
  if (prompts.empty()) return 0.0;
  const auto c = correct();
  return static_cast<double>(std::count(c.begin(), c.end(), 1)) / static_cast<double>(c.size());
}

std::shared_ptr<MeaningOracleBackend> SyntheticTask::oracle() const {
  return std::make_shared<MeaningOracleBackend>(meaning_of, config.label_flip_rate, config.seed);
}

SyntheticTask make_synthetic_task(const SyntheticTaskConfig& config) {
  config.validate();
  SyntheticTask t;
  t.config = config;
  const int m_count = config.n_meanings;
  t.prompts.resize(config.n_prompts);
  t.records.reserve(config.n_prompts);

  for (std::size_t i = 0; i < config.n_prompts; ++i) {
    auto& p = t.prompts[i];
    Rng rng(stream_seed(config.seed, i, kPi));
    p.pi.assign(static_cast<std::size_t>(m_count) + 1, 0.0);
    double sum = 0.0;
    for (int m = 0; m < m_count; ++m) sum += p.pi[static_cast<std::size_t>(m)] = rng.gamma(config.dirichlet_alpha);
    if (sum > 0.0) {
      for (auto& x : p.pi) x /= sum;
    } else {
      p.pi[rng.below(static_cast<std::size_t>(m_count))] = 1.0;
    }
    for (int m = 0; m <= m_count; ++m) {
      const std::string key = config.task_name + ":" + std::to_string(i) + ":" + std::to_string(m);
      for (int k = 0; k < config.paraphrases_per_meaning; ++k)
        t.meaning_of[render(kTemplates[k], word_of(i, m))] = key;
    }
  }
  // Gold meaning is fixed by the context-free world: the greedy meaning when
  // enough samples agree with it, else a meaning the model never produces.
  rebuild(t);
  for (std::size_t i = 0; i < config.n_prompts; ++i) {
    auto& p = t.prompts[i];
    const auto agree = std::count(p.sample_meanings.begin(), p.sample_meanings.end(), p.greedy_meaning);
    const double share = static_cast<double>(agree) / static_cast<double>(config.n_samples);
    p.gold_meaning = share >= config.knowledge_threshold ? p.greedy_meaning : m_count;
  }
  rebuild(t);

  for (std::size_t i = 0; i < config.n_prompts; ++i) {
    QARecord r;
    r.id = prompt_id(config, i);
    r.question = "Synthetic question " + std::to_string(i) + " of " + config.task_name + "?";
    r.answers = {word_of(i, t.prompts[i].gold_meaning)};
    r.dataset = config.task_name;
    t.records.push_back(std::move(r));
  }
  if (config.context_effect > 0.0) return apply_context(t, config.context_effect);
  return t;
}

SyntheticTask apply_context(const SyntheticTask& world, double context_effect) {
  if (!(context_effect >= 0.0 && context_effect <= 1.0))
    throw Error(ErrorCode::BadConfig, "context_effect must lie in [0, 1]");
  SyntheticTask t = world;
  t.config.context_effect = context_effect;
  if (context_effect == 0.0) return t;
  for (std::size_t i = 0; i < t.prompts.size(); ++i) {
    auto& p = t.prompts[i];
    for (auto& x : p.pi) x *= 1.0 - context_effect;
    p.pi[static_cast<std::size_t>(p.gold_meaning)] += context_effect;
    t.records[i].context = "Reference: the answer is " + word_of(i, p.gold_meaning) + ".";
  }
  rebuild(t);
  return t;
}

FeatureSpec synthetic_feature_spec(const SyntheticTaskConfig& config, Position position) {
  FeatureSpec spec;
  spec.position = position;
  spec.stream = Stream::HIDDEN;
  spec.hidden_dim = config.hidden_dim;
  for (std::uint32_t l = 0; l < config.n_layers; ++l) spec.layers.push_back(static_cast<int>(l));
  return spec;
}

namespace {

std::vector<UncertaintyReport> pipeline_reports(const SyntheticTask& task) {
  const auto oracle = task.oracle();
  std::vector<SemanticClustering> clusterings;
  clusterings.reserve(task.gen_sets.size());
  for (const auto& g : task.gen_sets) {
    std::vector<std::string> texts;
    for (const auto& s : g.samples) texts.push_back(s.text);
    clusterings.push_back(cluster_generations(texts, *oracle));
  }
  return kernels::score_queries(task.gen_sets, clusterings);
}

}  // namespace

TaskData synthetic_task_data(const SyntheticTask& task, const FeatureSpec& spec) {
  const auto reports = pipeline_reports(task);
  const auto labels = label_correctness_short(task.records, task.gen_sets);
  return make_task_data(task.config.task_name, reports, labels, task.hidden, spec, spec);
}

void write_synthetic_task(const SyntheticTask& task, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_qa_jsonl(dir / "qa.jsonl", task.records);
  write_generations_jsonl(dir / "generations.jsonl", task.gen_sets);
  write_hidden_archive(task.manifest, task.hidden, dir / "hidden.seph");

  const auto reports = pipeline_reports(task);
  std::vector<ClusterRecord> clusters;
  for (const auto& r : reports) clusters.push_back({r.id, r.clusters});
  write_clusters_jsonl(dir / "clusters.jsonl", clusters);
  write_reports_jsonl(dir / "reports.jsonl", reports);
  write_labels_jsonl(dir / "labels.jsonl", label_correctness_short(task.records, task.gen_sets));

  std::vector<json> gold;
  for (std::size_t i = 0; i < task.prompts.size(); ++i) {
    const auto& p = task.prompts[i];
    gold.push_back(json{{"id", task.records[i].id},
                        {"gold_se", p.gold_se},
                        {"correct", p.correct},
                        {"greedy_meaning", p.greedy_meaning},
                        {"gold_meaning", p.gold_meaning},
                        {"pi", p.pi}});
  }
  write_jsonl(dir / "gold.jsonl", gold);

  {
    std::vector<std::pair<std::string, std::string>> sorted(task.meaning_of.begin(), task.meaning_of.end());
    std::sort(sorted.begin(), sorted.end());
    json j = json::object();
    for (const auto& [text, meaning] : sorted) j[text] = meaning;
    std::ofstream out(dir / "oracle.json", std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + (dir / "oracle.json").string());
    out << j.dump() << '\n';
  }
  {
    std::ofstream out(dir / "lab.json", std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + (dir / "lab.json").string());
    out << json(task.config).dump(2) << '\n';
  }

  TaskDescriptor d;
  d.name = task.config.task_name;
  d.reports = dir / "reports.jsonl";
  d.labels = dir / "labels.jsonl";
  d.archive = dir / "hidden.seph";
  d.qa = dir / "qa.jsonl";
  d.generations = dir / "generations.jsonl";
  d.clusters = dir / "clusters.jsonl";
  write_task_descriptor(dir / "task.json", d);
}

}  // namespace semprobe
