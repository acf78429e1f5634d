#include "app/commands.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>
#include <set>

#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "advmtl/checkpoint.hpp"
#include "advmtl/gradcheck_suite.hpp"

namespace app {

namespace fs = std::filesystem;
using advmtl::AgeGroup;
using advmtl::kAllGroups;
using advmtl::kNumGroups;
using json = nlohmann::ordered_json;

namespace {

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::string num(double v) { return fmt::format("{}", v); }
std::string num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

json json_num(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

struct LoadedData {
  advmtl::DatasetSplits splits;
  advmtl::SpeakerIndex speakers;
  advmtl::ModelConfig model;
};

LoadedData load_data(const RunConfig& cfg) {
  const auto path = cfg.data_path();
  if (!fs::exists(path)) throw ConfigError("dataset file " + path.string() + " does not exist");
  LoadedData out;
  try {
    const auto data = advmtl::load_jsonl(path, advmtl::LabelScheme::make(cfg.scheme()));
    out.splits = advmtl::split(data, cfg.split_fractions(), derive_seed(cfg.seed(), SeedStream::kSplit));
  } catch (const advmtl::DataError& e) {
    throw ConfigError(e.what());
  }
  out.speakers = advmtl::SpeakerIndex(out.splits.train);
  const auto& train = out.splits.train;
  out.model = cfg.model(train.view1_dim(), train.view2_dim(), out.speakers.size());
  if (out.model.integration == advmtl::Integration::kConcat && !train.has_view2())
    throw ConfigError("integration=concat needs a second view on every sample of " + path.string());
  return out;
}

const char* kStepHeader =
    "step,L_spk,L_ag,C_spk,C_ag,disc_young,disc_adult,disc_senior,main,total,lr,lambda,"
    "optimizer_step,grad_norm,clipped_norm\n";

std::string step_row(std::size_t step, const advmtl::LossReport& r, double lr, double lambda,
                     bool optimizer_step, double grad_norm, double clipped_norm) {
  std::string row = fmt::format("{},{},{},{},{}", step, num(r.speaker), num(r.age_group),
                                num(r.c_speaker), num(r.c_age_group));
  for (const auto& d : r.discriminator) row += "," + num(d);
  row += fmt::format(",{},{},{},{},{},", num(r.main), num(r.total), num(lr), num(lambda),
                     optimizer_step ? 1 : 0);
  row += optimizer_step ? num(grad_norm) + "," + num(clipped_norm) : std::string(",");
  return row + "\n";
}

}  // namespace

// ---------------------------------------------------------------------------

void cmd_gen_data(const RunConfig& cfg) {
  cfg.validate();
  cfg.write_echo(cfg.run_dir() / "config.txt");
  const auto synth = cfg.synth();
  const auto data = advmtl::generate_synthetic(synth);
  const auto path = cfg.data_path();
  advmtl::save_jsonl(data, path);

  json meta;
  meta["seed"] = cfg.seed();
  meta["data_seed"] = synth.seed;
  meta["scheme"] = std::string(advmtl::scheme_name(synth.scheme));
  meta["samples"] = data.size();
  meta["speakers"] = data.speakers().size();
  const auto counts = data.group_counts();
  json groups;
  for (auto g : kAllGroups) groups[std::string(advmtl::group_name(g))] = counts[advmtl::index_of(g)];
  meta["group_counts"] = groups;
  meta["view1_dim"] = data.view1_dim();
  meta["view2_dim"] = data.view2_dim();
  open_out(path.string() + ".meta.json") << meta.dump(2) << "\n";
  spdlog::info("wrote {} samples from {} speakers to {}", data.size(), data.speakers().size(),
               path.string());
}

void cmd_train(const RunConfig& cfg) {
  cfg.validate();
  const auto run = cfg.run_dir();
  cfg.write_echo(run / "config.txt");
  auto loaded = load_data(cfg);
  const auto tc = cfg.train();
  advmtl::NetworkAssembly net(loaded.model);
  spdlog::info("{} training, discriminators {}, {} parameters, {} train / {} dev samples",
               advmtl::train_mode_name(tc.mode), loaded.model.discriminators.name(),
               net.parameter_count(), loaded.splits.train.size(), loaded.splits.dev.size());

  auto steps = open_out(run / "logs" / "steps.csv");
  steps << kStepHeader;
  advmtl::FitResult result;
  try {
    result = advmtl::fit(net, loaded.splits, tc, [&](const advmtl::StepRecord& s) {
      steps << step_row(s.step, s.report, s.learning_rate, s.lambda, s.optimizer_step, s.grad_norm,
                        s.clipped_norm);
    });
  } catch (const advmtl::NumericalError& e) {
    steps << step_row(e.step, e.report, std::nan(""), net.lambda(), false, 0.0, 0.0);
    steps.flush();
    open_out(run / "logs" / "failure.txt") << "step " << e.step << ": " << e.what() << "\n";
    throw;
  }

  auto epochs = open_out(run / "logs" / "epochs.csv");
  epochs << "epoch,lr,dev_macro_precision,prec_young,prec_adult,prec_senior,"
            "disc_acc_young,disc_acc_adult,disc_acc_senior,mean_train_loss,improved\n";
  for (const auto& e : result.epochs) {
    epochs << e.epoch << "," << num(e.learning_rate) << "," << num(e.dev_macro_precision);
    for (std::size_t k = 0; k < kNumGroups; ++k) epochs << "," << num(e.dev_precision[k]);
    for (const auto& a : e.discriminator_accuracy) epochs << "," << num(a);
    epochs << "," << num(e.mean_train_loss) << "," << (e.improved ? 1 : 0) << "\n";
    spdlog::info("epoch {}: dev macro precision {:.4f}, lr {}", e.epoch, e.dev_macro_precision,
                 e.learning_rate);
  }

  advmtl::save_checkpoint(result.best_state, run / "checkpoints" / "best.ckpt");
  advmtl::save_checkpoint(net.state(), run / "checkpoints" / "last.ckpt");

  json summary;
  summary["mode"] = std::string(advmtl::train_mode_name(tc.mode));
  summary["discriminators"] = loaded.model.discriminators.name();
  summary["integration"] = std::string(advmtl::integration_name(loaded.model.integration));
  summary["lambda"] = loaded.model.discriminators.lambda;
  summary["parameters"] = net.parameter_count();
  summary["speakers"] = loaded.speakers.size();
  summary["epochs"] = result.epochs.size();
  summary["micro_steps"] = result.steps.size();
  summary["optimizer_steps"] = result.optimizer_steps;
  summary["best_epoch"] = result.best_epoch ? json(*result.best_epoch) : json(nullptr);
  summary["best_dev_macro_precision"] =
      result.best_epoch ? json(result.epochs[*result.best_epoch - 1].dev_macro_precision) : json(nullptr);
  open_out(run / "reports" / "train_summary.json") << summary.dump(2) << "\n";
}

void cmd_eval(const RunConfig& cfg) {
  cfg.validate();
  const auto run = cfg.run_dir();
  cfg.write_echo(run / "config.txt");
  auto loaded = load_data(cfg);
  const auto& data = loaded.splits.eval;
  if (data.empty()) throw ConfigError("eval split is empty; raise split_eval");

  advmtl::NetworkAssembly net(loaded.model);
  const auto ckpt_path = cfg.checkpoint_path();
  try {
    net.load_state(advmtl::load_checkpoint(ckpt_path));
  } catch (const advmtl::CheckpointError& e) {
    throw ConfigError(e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError("checkpoint " + ckpt_path.string() + " does not fit the data/config: " + e.what());
  }

  // Frozen features f and age-group predictions in eval mode.
  const auto tc = cfg.train();
  const auto n = data.size();
  const auto fdim = net.feature_dim();
  advmtl::Tensor features({n, fdim});
  advmtl::ConfusionMatrix cm;
  advmtl::ForwardOptions opts;
  opts.speaker_head = false;
  opts.discriminators = false;
  const advmtl::SpeakerIndex no_speakers;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += tc.batch_size) {
    const auto end = std::min(n, start + tc.batch_size);
    idx.resize(end - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    const auto batch = advmtl::make_batch(data, idx, no_speakers, loaded.model.integration);
    advmtl::Tape tape;
    const auto out = net.forward(tape, batch.inputs, advmtl::Mode::kEval, opts);
    const auto& f = out.f.value();
    const auto& lp = out.ag_log_probs.value();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::copy_n(f.data() + r * fdim, fdim, features.data() + (start + r) * fdim);
      const auto* row = lp.data() + r * kNumGroups;
      const auto pred = std::max_element(row, row + kNumGroups) - row;
      cm.add(batch.groups[r], static_cast<int>(pred));
    }
  }
  if (!features.all_finite()) throw advmtl::NumericalError("non-finite features in eval", {}, 0);
  const auto precision = advmtl::per_class_precision(cm);

  // Speaker verification on cosine scores of f.
  const auto trials = advmtl::generate_trials(data, cfg.trials(), derive_seed(cfg.seed(), SeedStream::kTrials));
  advmtl::ScoreSet scores;
  for (const auto& t : trials.pairs) {
    scores.scores.push_back(advmtl::cosine_score({features.data() + t.enroll * fdim, fdim},
                                                 {features.data() + t.test * fdim, fdim}));
    scores.is_target.push_back(t.is_target);
  }
  const auto points = advmtl::operating_points(scores);
  const auto eer = advmtl::eer_from_points(points);
  const auto dcf = advmtl::min_dcf_from_points(points, cfg.p_target(), cfg.c_miss(), cfg.c_fa());

  // Subgroup probes per age group.
  json probes = json::object();
  double acc_sum = 0.0, chance_sum = 0.0;
  std::size_t probed = 0;
  const auto probe_cfg = cfg.probe();
  for (auto g : kAllGroups) {
    const auto k = advmtl::index_of(g);
    std::vector<std::size_t> rows;
    std::vector<int> labels;
    for (std::size_t i = 0; i < n; ++i) {
      if (data.group(i) != g) continue;
      rows.push_back(i);
      labels.push_back(data.subgroup(i));
    }
    const std::set<int> distinct(labels.begin(), labels.end());
    const auto name = std::string(advmtl::group_name(g));
    if (distinct.size() < 2 || rows.size() < 4) {
      probes[name] = nullptr;
      continue;
    }
    advmtl::Tensor fk({rows.size(), fdim});
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy_n(features.data() + rows[r] * fdim, fdim, fk.data() + r * fdim);
    const auto res = advmtl::subgroup_probe(fk, labels, g, derive_seed(cfg.seed(), SeedStream::kProbe) + k,
                                            probe_cfg);
    probes[name] = {{"accuracy", res.accuracy}, {"chance", res.chance},
                    {"train_size", res.train_size}, {"test_size", res.test_size},
                    {"subgroups", res.classes}};
    acc_sum += res.accuracy;
    chance_sum += res.chance;
    ++probed;
  }

  json report;
  report["mode"] = cfg.get("mode");
  report["discriminators"] = loaded.model.discriminators.name();
  report["integration"] = std::string(advmtl::integration_name(loaded.model.integration));
  report["lambda"] = loaded.model.discriminators.lambda;
  report["scheme"] = std::string(advmtl::scheme_name(cfg.scheme()));
  report["checkpoint"] = ckpt_path.string();
  report["eval_samples"] = n;
  json ag;
  json confusion = json::array();
  for (std::size_t t = 0; t < kNumGroups; ++t) {
    json row = json::array();
    for (std::size_t p = 0; p < kNumGroups; ++p) row.push_back(cm.count(t, p));
    confusion.push_back(row);
  }
  ag["confusion"] = confusion;
  json per_class;
  for (auto g : kAllGroups)
    per_class[std::string(advmtl::group_name(g))] = json_num(precision.precision[advmtl::index_of(g)]);
  ag["precision"] = per_class;
  ag["macro_precision"] = precision.macro;
  json undefined = json::array();
  for (auto k : precision.undefined) undefined.push_back(std::string(advmtl::group_name(kAllGroups[k])));
  ag["undefined"] = undefined;
  ag["accuracy"] = cm.accuracy();
  report["age_group"] = ag;
  report["speaker"] = {{"trials", trials.pairs.size()},
                       {"targets", trials.targets},
                       {"nontargets", trials.nontargets},
                       {"balanced", trials.balanced},
                       {"eer", eer.eer},
                       {"eer_percent", 100.0 * eer.eer},
                       {"eer_threshold", eer.threshold},
                       {"min_dcf", dcf.min_dcf},
                       {"min_dcf_threshold", dcf.threshold},
                       {"p_target", cfg.p_target()},
                       {"c_miss", cfg.c_miss()},
                       {"c_fa", cfg.c_fa()}};
  report["probes"] = probes;
  report["probe_mean_accuracy"] = probed ? json(acc_sum / static_cast<double>(probed)) : json(nullptr);
  report["probe_mean_chance"] = probed ? json(chance_sum / static_cast<double>(probed)) : json(nullptr);

  const auto reports = run / "reports";
  open_out(reports / "metrics.json") << report.dump(2) << "\n";

  auto csv = open_out(reports / "metrics.csv");
  csv << "metric,value\n";
  for (auto g : kAllGroups)
    csv << "precision_" << advmtl::group_name(g) << "," << num(precision.precision[advmtl::index_of(g)]) << "\n";
  csv << "macro_precision," << num(precision.macro) << "\n";
  csv << "accuracy," << num(cm.accuracy()) << "\n";
  csv << "eer_percent," << num(100.0 * eer.eer) << "\n";
  csv << "min_dcf," << num(dcf.min_dcf) << "\n";
  csv << "trials," << trials.pairs.size() << "\n";
  csv << "target_trials," << trials.targets << "\n";
  csv << "nontarget_trials," << trials.nontargets << "\n";
  for (auto g : kAllGroups) {
    const auto& p = probes[std::string(advmtl::group_name(g))];
    csv << "probe_accuracy_" << advmtl::group_name(g) << ","
        << (p.is_null() ? std::string() : num(p["accuracy"].get<double>())) << "\n";
    csv << "probe_chance_" << advmtl::group_name(g) << ","
        << (p.is_null() ? std::string() : num(p["chance"].get<double>())) << "\n";
  }

  auto op = open_out(reports / "operating_points.csv");
  op << "threshold,far,frr\n";
  for (const auto& p : points) op << num(p.threshold) << "," << num(p.far) << "," << num(p.frr) << "\n";

  auto emb = open_out(reports / "embeddings.jsonl");
  for (std::size_t i = 0; i < n; ++i) {
    json line;
    line["id"] = data[i].id;
    line["group"] = std::string(advmtl::group_name(data.group(i)));
    line["subgroup"] = data.subgroup(i);
    line["embedding"] = std::vector<double>(features.data() + i * fdim, features.data() + (i + 1) * fdim);
    emb << line.dump() << "\n";
  }
  spdlog::info("eval: macro precision {:.4f}, EER {:.2f}%, minDCF {:.4f}", precision.macro,
               100.0 * eer.eer, dcf.min_dcf);
}

bool cmd_gradcheck(const RunConfig& cfg, std::ostream& out) {
  cfg.validate();
  cfg.write_echo(cfg.run_dir() / "config.txt");
  const auto gc = cfg.gradcheck();
  const auto suite = advmtl::run_gradcheck_suite(gc);
  std::string text = fmt::format("# central differences, h = {}, tol = {}\n", gc.h, gc.tol);
  for (const auto& e : suite.entries) {
    const auto& r = e.report;
    text += fmt::format("{:<24} max_rel_error={:.3e} coords={:<4} worst={}[{}] {}\n", e.name,
                        r.max_rel_error, r.coordinates, r.worst_parameter, r.worst_index,
                        r.passed ? "PASS" : "FAIL");
  }
  text += fmt::format("overall {}\n", suite.passed ? "PASS" : "FAIL");
  open_out(cfg.run_dir() / "reports" / "gradcheck.txt") << text;
  out << text;
  return suite.passed;
}

int run_command(std::string_view command, const RunConfig& cfg, std::ostream& out) {
  try {
    if (command == "gen-data") {
      cmd_gen_data(cfg);
    } else if (command == "train") {
      cmd_train(cfg);
    } else if (command == "eval") {
      cmd_eval(cfg);
    } else if (command == "gradcheck") {
      return cmd_gradcheck(cfg, out) ? kExitOk : kExitFailure;
    } else {
      spdlog::error("unknown command '{}' (valid: gen-data, train, eval, gradcheck)", command);
      return kExitConfigError;
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kExitConfigError;
  } catch (const advmtl::NumericalError& e) {
    spdlog::error("numerical failure: {}", e.what());
    return kExitNumericalError;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitFailure;
  }
}

}  // namespace app
