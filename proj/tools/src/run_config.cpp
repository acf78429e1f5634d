#include "app/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace app {

namespace {

// Defaults mirror the library defaults; the data-dependent widths of the
// model are taken from the dataset at train/eval time.
const std::vector<KeySpec> kKeys{
    {"accumulation_steps", "5", "micro-batches per optimizer step"},
    {"adam_beta1", "0.9", "Adam first-moment decay"},
    {"adam_beta2", "0.999", "Adam second-moment decay"},
    {"adam_eps", "1e-08", "Adam denominator epsilon"},
    {"age_dims", "8", "synthetic: leading dims carrying the age-group pattern"},
    {"age_distribution", "subgroup_balanced", "synthetic: subgroup_balanced | uniform"},
    {"age_signal", "1", "synthetic: age-group pattern strength"},
    {"alpha", "0.01", "weight of the summed discriminator losses"},
    {"am_margin", "0.2", "AM-softmax additive margin"},
    {"am_scale", "30", "AM-softmax scale"},
    {"batch_size", "32", "samples per micro-batch"},
    {"c_fa", "1", "minDCF false-alarm cost"},
    {"c_miss", "1", "minDCF miss cost"},
    {"checkpoint", "", "checkpoint for eval (empty: <run_dir>/checkpoints/best.ckpt)"},
    {"clip_max_norm", "4", "global gradient-norm clip"},
    {"cluster_spread", "1", "synthetic: std of speaker centres"},
    {"data_path", "", "dataset JSONL (empty: <run_dir>/data/dataset.jsonl)"},
    {"disc_hidden", "256,256", "discriminator hidden widths"},
    {"discriminators", "ALL", "woD | YD | SD | YSD | AD | ALL"},
    {"embedding_dim", "0", "speaker embedding width (0: width of f)"},
    {"epochs", "10", "training epochs"},
    {"extractor_batch_norm", "true", "batch norm in the stand-in extractors"},
    {"extractor_e_hidden", "512", "extractor E hidden widths"},
    {"extractor_e_out", "256", "extractor E output width"},
    {"extractor_r_hidden", "512", "extractor R hidden widths"},
    {"extractor_r_out", "512", "extractor R output width"},
    {"gradcheck_fault_injection", "false", "add a primitive with a corrupted backward (negative control)"},
    {"gradcheck_h", "1e-05", "central-difference step"},
    {"gradcheck_tol", "0.0001", "max relative error"},
    {"head_batch_norm", "true", "batch norm in label heads and discriminators"},
    {"head_dropout", "0.5", "dropout in label heads and discriminators"},
    {"head_hidden", "256,256", "label-head hidden widths"},
    {"improvement_threshold", "1e-06", "dev metric gain that counts as improvement"},
    {"integration", "single", "single | concat"},
    {"label_smoothing", "0.1", "discriminator label smoothing"},
    {"lambda", "1", "gradient reversal coefficient"},
    {"lambda_schedule", "false", "warm lambda up as 2/(1+exp(-10p))-1"},
    {"leaky_slope", "0.01", "leaky ReLU negative slope"},
    {"learning_rate", "0.0001", "initial learning rate"},
    {"lr_decay_factor", "0.8", "learning-rate factor on stagnation"},
    {"mode", "MTL", "STL | MTL"},
    {"noise_std", "1", "synthetic: per-utterance noise std"},
    {"p_target", "0.01", "minDCF target prior"},
    {"probe_iterations", "300", "subgroup probe gradient steps"},
    {"probe_l2", "0.0001", "subgroup probe weight decay"},
    {"probe_learning_rate", "0.5", "subgroup probe step size"},
    {"probe_train_fraction", "0.5", "subgroup probe training share"},
    {"run_dir", "run", "output directory"},
    {"scheme", "leq29", "age-group scheme: leq29 | leq17"},
    {"seed", "1", "single seed for all randomness"},
    {"speakers_adult", "12", "synthetic: adult speakers"},
    {"speakers_senior", "12", "synthetic: senior speakers"},
    {"speakers_young", "12", "synthetic: young speakers"},
    {"split_dev", "0.1", "dev fraction"},
    {"split_eval", "0.1", "eval fraction"},
    {"split_train", "0.8", "train fraction"},
    {"stagnation_epochs", "2", "epochs without improvement before decay"},
    {"subgroup_dims", "8", "synthetic: dims carrying the subgroup pattern"},
    {"subgroup_signal", "1", "synthetic: subgroup pattern strength"},
    {"task_weight_init", "1", "initial C for both main tasks"},
    {"trials", "10000", "speaker-verification trial pairs"},
    {"utts_per_speaker", "20", "synthetic: utterances per speaker"},
    {"view1_dim", "80", "synthetic: first view width"},
    {"view2_dim", "160", "synthetic: second view width (0: none)"},
};

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class F>
auto guarded(std::string_view what, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
}

}  // namespace

const std::vector<KeySpec>& config_keys() { return kKeys; }

std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream) noexcept {
  // splitmix64 finalizer over (seed, stream)
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(stream) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

RunConfig::RunConfig() {
  for (const auto& k : kKeys) values_.emplace(std::string(k.name), std::string(k.default_value));
}

RunConfig RunConfig::from_text(std::string_view text, std::string_view origin) {
  RunConfig cfg;
  std::map<std::string, std::size_t, std::less<>> seen;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const auto where = std::string(origin) + ":" + std::to_string(line_no);
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected 'key = value'");
    const auto key = std::string(trim(line.substr(0, eq)));
    if (auto [it, fresh] = seen.emplace(key, line_no); !fresh)
      throw ConfigError(where + ": key '" + key + "' already set on line " + std::to_string(it->second));
    guarded(where, [&] { cfg.set(key, trim(line.substr(eq + 1))); });
  }
  return cfg;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str(), path.string());
}

void RunConfig::apply_overrides(const std::vector<std::string>& args) {
  for (const auto& arg : args) {
    std::string_view a = arg;
    if (a.substr(0, 2) != "--" || a.find('=') == std::string_view::npos)
      throw ConfigError("expected an override of the form --key=value, got '" + arg + "'");
    a.remove_prefix(2);
    const auto eq = a.find('=');
    set(a.substr(0, eq), a.substr(eq + 1));
  }
}

void RunConfig::set(std::string_view key, std::string_view value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  it->second = std::string(value);
}

const std::string& RunConfig::get(std::string_view key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  return it->second;
}

std::string RunConfig::echo() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

void RunConfig::write_echo(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << echo();
}

// ---------------------------------------------------------------------------
// Scalar conversions

double RunConfig::real(std::string_view key) const {
  const auto& s = get(key);
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v))
    throw ConfigError("config key '" + std::string(key) + "': '" + s + "' is not a finite number");
  return v;
}

std::int64_t RunConfig::integer(std::string_view key) const {
  const auto& s = get(key);
  std::int64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ConfigError("config key '" + std::string(key) + "': '" + s + "' is not an integer");
  return v;
}

std::size_t RunConfig::count(std::string_view key) const {
  const auto v = integer(key);
  if (v < 0) throw ConfigError("config key '" + std::string(key) + "' must be nonnegative");
  return static_cast<std::size_t>(v);
}

bool RunConfig::flag(std::string_view key) const {
  const auto& s = get(key);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key '" + std::string(key) + "': '" + s + "' is not true/false");
}

std::vector<std::size_t> RunConfig::widths(std::string_view key) const {
  std::vector<std::size_t> out;
  std::string_view s = get(key);
  while (!trim(s).empty()) {
    const auto comma = s.find(',');
    const auto item = trim(s.substr(0, comma));
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || p != item.data() + item.size() || v == 0)
      throw ConfigError("config key '" + std::string(key) + "': expected comma-separated positive widths");
    out.push_back(v);
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Typed views

std::uint64_t RunConfig::seed() const { return static_cast<std::uint64_t>(count("seed")); }

std::filesystem::path RunConfig::run_dir() const {
  const auto& d = get("run_dir");
  if (d.empty()) throw ConfigError("config key 'run_dir' must not be empty");
  return d;
}

std::filesystem::path RunConfig::data_path() const {
  const auto& p = get("data_path");
  return p.empty() ? run_dir() / "data" / "dataset.jsonl" : std::filesystem::path(p);
}

std::filesystem::path RunConfig::checkpoint_path() const {
  const auto& p = get("checkpoint");
  return p.empty() ? run_dir() / "checkpoints" / "best.ckpt" : std::filesystem::path(p);
}

advmtl::SchemeVariant RunConfig::scheme() const {
  return guarded("config key 'scheme'", [&] { return advmtl::parse_scheme(get("scheme")); });
}

advmtl::SynthConfig RunConfig::synth() const {
  advmtl::SynthConfig c;
  c.scheme = scheme();
  c.speakers_per_group = {count("speakers_young"), count("speakers_adult"), count("speakers_senior")};
  c.utts_per_speaker = count("utts_per_speaker");
  c.view1_dim = count("view1_dim");
  c.view2_dim = count("view2_dim");
  c.cluster_spread = real("cluster_spread");
  c.noise_std = real("noise_std");
  c.age_dims = count("age_dims");
  c.subgroup_dims = count("subgroup_dims");
  c.age_signal = real("age_signal");
  c.subgroup_signal = real("subgroup_signal");
  c.age_distribution = guarded("config key 'age_distribution'",
                               [&] { return advmtl::parse_age_distribution(get("age_distribution")); });
  c.seed = derive_seed(seed(), SeedStream::kData);
  guarded("synthetic data config", [&] { c.validate(); });
  return c;
}

advmtl::SplitFractions RunConfig::split_fractions() const {
  advmtl::SplitFractions f{real("split_train"), real("split_dev"), real("split_eval")};
  if (f.train <= 0.0 || f.dev <= 0.0 || f.eval < 0.0 || std::abs(f.train + f.dev + f.eval - 1.0) > 1e-9)
    throw ConfigError("split fractions must be positive (eval may be 0) and sum to 1");
  return f;
}

advmtl::ModelConfig RunConfig::model(std::size_t view1_dim, std::size_t view2_dim,
                                     std::size_t num_speakers) const {
  advmtl::ModelConfig m;
  m.integration = guarded("config key 'integration'",
                          [&] { return advmtl::parse_integration(get("integration")); });
  m.view1_dim = view1_dim;
  m.view2_dim = view2_dim;
  m.extractor_e_hidden = widths("extractor_e_hidden");
  m.extractor_e_out = count("extractor_e_out");
  m.extractor_r_hidden = widths("extractor_r_hidden");
  m.extractor_r_out = count("extractor_r_out");
  m.extractor_batch_norm = flag("extractor_batch_norm");
  m.head_hidden = widths("head_hidden");
  m.disc_hidden = widths("disc_hidden");
  m.head_batch_norm = flag("head_batch_norm");
  m.head_dropout = real("head_dropout");
  m.leaky_slope = real("leaky_slope");
  m.embedding_dim = count("embedding_dim");
  m.num_speakers = num_speakers;
  m.subgroup_counts = advmtl::SubgroupScheme::default_for(scheme()).counts();
  m.discriminators = guarded("config key 'discriminators'", [&] {
    return advmtl::DiscriminatorConfig::parse(get("discriminators"), real("lambda"));
  });
  m.task_weight_init = real("task_weight_init");
  m.seed = derive_seed(seed(), SeedStream::kModel);
  guarded("model config", [&] { m.validate(); });
  return m;
}

advmtl::TrainConfig RunConfig::train() const {
  advmtl::TrainConfig t;
  t.learning_rate = real("learning_rate");
  t.clip_max_norm = real("clip_max_norm");
  t.accumulation_steps = count("accumulation_steps");
  t.lr_decay_factor = real("lr_decay_factor");
  t.stagnation_epochs = count("stagnation_epochs");
  t.improvement_threshold = real("improvement_threshold");
  t.epochs = count("epochs");
  t.batch_size = count("batch_size");
  t.seed = derive_seed(seed(), SeedStream::kShuffle);
  t.mode = guarded("config key 'mode'", [&] { return advmtl::parse_train_mode(get("mode")); });
  t.alpha = real("alpha");
  t.am_margin = real("am_margin");
  t.am_scale = real("am_scale");
  t.label_smoothing = real("label_smoothing");
  t.lambda_schedule = flag("lambda_schedule");
  t.adam_beta1 = real("adam_beta1");
  t.adam_beta2 = real("adam_beta2");
  t.adam_eps = real("adam_eps");
  guarded("training config", [&] { t.validate(); });
  return t;
}

advmtl::ProbeConfig RunConfig::probe() const {
  advmtl::ProbeConfig p;
  p.iterations = count("probe_iterations");
  p.learning_rate = real("probe_learning_rate");
  p.l2 = real("probe_l2");
  p.train_fraction = real("probe_train_fraction");
  if (p.iterations == 0 || !(p.learning_rate > 0.0) || !(p.l2 >= 0.0) ||
      !(p.train_fraction > 0.0 && p.train_fraction < 1.0))
    throw ConfigError("probe settings out of range");
  return p;
}

advmtl::GradcheckSuiteConfig RunConfig::gradcheck() const {
  advmtl::GradcheckSuiteConfig g;
  g.h = real("gradcheck_h");
  g.tol = real("gradcheck_tol");
  g.seed = derive_seed(seed(), SeedStream::kGradcheck);
  g.fault_injection = flag("gradcheck_fault_injection");
  if (!(g.h > 0.0) || !(g.tol > 0.0)) throw ConfigError("gradcheck_h and gradcheck_tol must be positive");
  return g;
}

std::size_t RunConfig::trials() const {
  const auto n = count("trials");
  if (n < 2) throw ConfigError("config key 'trials' must be at least 2");
  return n;
}

double RunConfig::p_target() const {
  const auto p = real("p_target");
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("config key 'p_target' must lie in (0,1)");
  return p;
}

double RunConfig::c_miss() const {
  const auto c = real("c_miss");
  if (!(c > 0.0)) throw ConfigError("config key 'c_miss' must be positive");
  return c;
}

double RunConfig::c_fa() const {
  const auto c = real("c_fa");
  if (!(c > 0.0)) throw ConfigError("config key 'c_fa' must be positive");
  return c;
}

void RunConfig::validate() const {
  run_dir();
  synth();
  split_fractions();
  model(std::max<std::size_t>(1, count("view1_dim")), std::max<std::size_t>(1, count("view2_dim")), 1);
  train();
  probe();
  gradcheck();
  trials();
  p_target();
  c_miss();
  c_fa();
}

}  // namespace app
