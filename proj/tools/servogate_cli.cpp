// servogate: campaign driver for uncertainty-gated shape servoing.
//
// Subcommands: train, simulate, calibrate, gate-run, report.
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric degeneracy.
// Seed precedence: --seed flag > config "seed" key > SERVOGATE_SEED env var
// > built-in default.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include <servogate/campaign.hpp>

namespace fs = std::filesystem;
using servogate::BadConfig;
using servogate::CampaignConfig;
using servogate::Json;

namespace {

struct CommonOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<std::string> output_dir;
  std::optional<std::string> model_dir;
  std::optional<std::size_t> tuples;
  std::optional<int> members;
  std::optional<bool> gate_enabled;
  std::optional<double> tau_p;
  std::optional<double> tau_r;
  std::optional<std::string> gate_mode;
  std::optional<long> decision_step;
  std::optional<bool> continuous;
};

std::uint64_t parse_seed_text(const std::string& text, const std::string& origin) {
  try {
    std::size_t used = 0;
    const std::uint64_t v = std::stoull(text, &used);
    if (used != text.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw BadConfig("cannot parse seed from " + origin + ": '" + text + "'");
  }
}

CampaignConfig resolve_config(const CommonOpts& o) {
  std::ifstream in(o.config_path);
  if (!in) throw BadConfig("cannot open config file '" + o.config_path + "'");
  Json doc;
  try {
    in >> doc;
  } catch (const Json::exception& e) {
    throw BadConfig("config '" + o.config_path + "' is not valid JSON: " + e.what());
  }
  const bool config_has_seed = doc.is_object() && doc.contains("seed");
  CampaignConfig cfg = servogate::parse_campaign_config(doc);

  if (o.seed.has_value()) {
    cfg.seed = *o.seed;
  } else if (!config_has_seed) {
    if (const char* env = std::getenv("SERVOGATE_SEED")) {
      cfg.seed = parse_seed_text(env, "SERVOGATE_SEED");
    }
  }
  if (o.workers) cfg.workers = *o.workers;
  if (o.output_dir) cfg.output_dir = *o.output_dir;
  if (o.model_dir) cfg.predictor.model_dir = *o.model_dir;
  if (o.tuples) cfg.predictor.training_tuples = *o.tuples;
  if (o.members) cfg.predictor.members = *o.members;
  if (o.gate_enabled) cfg.gate_enabled = *o.gate_enabled;
  if (o.tau_p) cfg.gate.tau_p = *o.tau_p;
  if (o.tau_r) cfg.gate.tau_r = *o.tau_r;
  if (o.gate_mode) cfg.gate.mode = servogate::gate_mode_from_string(*o.gate_mode);
  if (o.decision_step) cfg.gate.decision_step = *o.decision_step;
  if (o.continuous) cfg.gate.monitor_continuously = *o.continuous;

  if (cfg.workers < 1) throw BadConfig("workers must be >= 1");
  if (cfg.gate.decision_step < 1) throw BadConfig("decision step must be >= 1");
  if (cfg.predictor.kind == servogate::PredictorKind::Ensemble && cfg.predictor.members < 2) {
    throw BadConfig("ensemble predictor needs at least 2 members");
  }
  return cfg;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw BadConfig("cannot create directory '" + dir + "': " + ec.message());
}

void echo_config(const CampaignConfig& cfg, const std::string& dir) {
  ensure_dir(dir);
  std::ofstream out(fs::path(dir) / "resolved_config.json");
  if (!out) throw servogate::IoError("cannot write resolved_config.json into '" + dir + "'");
  out << servogate::campaign_config_to_json(cfg).dump(2) << "\n";
}

int cmd_train(const CommonOpts& opts) {
  const CampaignConfig cfg = resolve_config(opts);
  const servogate::TrainManifest manifest = servogate::train_models(cfg);
  echo_config(cfg, cfg.predictor.model_dir);
  std::cout << "trained " << manifest.member_count << " member model(s) on "
            << manifest.tuple_count << " tuples (dataset seed " << manifest.dataset_seed
            << ")\nwrote " << (fs::path(cfg.predictor.model_dir) / "manifest.json").string()
            << "\n";
  return 0;
}

int cmd_simulate(const CommonOpts& opts) {
  const CampaignConfig cfg = resolve_config(opts);
  const servogate::Predictor predictor = servogate::load_predictor(cfg);
  const std::vector<servogate::IndexedTrial> trials = servogate::run_campaign(cfg, predictor);

  ensure_dir(cfg.output_dir);
  const std::string trials_path = (fs::path(cfg.output_dir) / "trials.jsonl").string();
  servogate::write_trials_jsonl(trials, trials_path);
  echo_config(cfg, cfg.output_dir);

  std::size_t successes = 0, needed = 0, requested = 0;
  for (const auto& t : trials) {
    successes += t.record.success ? 1 : 0;
    needed += t.record.intervention_needed ? 1 : 0;
    requested += t.record.intervention_requested ? 1 : 0;
  }
  std::cout << "ran " << trials.size() << " trial(s): " << successes << " successful, "
            << needed << " needing intervention, " << requested << " requested\nwrote "
            << trials_path << "\n";
  return 0;
}

int cmd_calibrate(const std::string& trials_path, double w, const std::string& component,
                  const std::string& statistic, const std::string& output_dir) {
  const std::vector<servogate::IndexedTrial> records =
      servogate::read_trials_jsonl(trials_path);
  const servogate::SlopeStatistic stat = servogate::slope_statistic_from_string(statistic);
  const std::vector<servogate::SlopeSample> samples =
      servogate::slope_samples_from_trials(records, stat);
  if (samples.empty()) {
    throw servogate::EmptyInput("no trials with at least two steps in '" + trials_path + "'");
  }
  bool has_needed = false, has_not_needed = false;
  for (const auto& s : samples) (s.intervention_needed ? has_needed : has_not_needed) = true;
  if (!has_needed || !has_not_needed) {
    throw servogate::UndefinedRate(
        "calibration needs both label classes; rerun the simulate command with a scenario "
        "mix containing both in-distribution and failure-prone cases");
  }

  ensure_dir(output_dir);
  const bool do_p = component == "position" || component == "both";
  const bool do_r = component == "rotation" || component == "both";
  Json thresholds{{"schema", "thresholds-v1"},
                  {"w", w},
                  {"statistic", servogate::to_string(stat)},
                  {"tau_p", nullptr},
                  {"tau_r", nullptr},
                  {"objective_p", nullptr},
                  {"objective_r", nullptr}};

  auto run_component = [&](servogate::GateComponent comp, const char* tag, const char* tau_key,
                           const char* obj_key) {
    const std::vector<double> grid = servogate::midpoint_grid(samples, comp);
    const servogate::CalibrationResult res =
        servogate::calibrate(samples, comp, servogate::MetaObjectiveConfig{w}, grid);
    const std::vector<servogate::SweepPoint> sweep =
        servogate::sweep_thresholds(samples, comp, grid);

    const std::string sweep_path =
        (fs::path(output_dir) / (std::string("sweep_") + tag + ".csv")).string();
    std::ofstream out(sweep_path);
    if (!out) throw servogate::IoError("cannot write '" + sweep_path + "'");
    out.precision(17);
    out << "threshold,fpr,fnr\n";
    for (const auto& p : sweep) out << p.threshold << "," << p.fpr << "," << p.fnr << "\n";

    thresholds[tau_key] = res.tau_star;
    thresholds[obj_key] = res.objective;
    std::cout << tag << ": tau* = " << res.tau_star << " (objective " << res.objective
              << ")\nwrote " << sweep_path << "\n";
  };
  if (do_p) run_component(servogate::GateComponent::Position, "position", "tau_p", "objective_p");
  if (do_r) run_component(servogate::GateComponent::Rotation, "rotation", "tau_r", "objective_r");

  const std::string thr_path = (fs::path(output_dir) / "thresholds.json").string();
  std::ofstream out(thr_path);
  if (!out) throw servogate::IoError("cannot write '" + thr_path + "'");
  out << thresholds.dump(2) << "\n";
  std::cout << "wrote " << thr_path << "\n";
  return 0;
}

int cmd_gate_run(const CommonOpts& opts, const std::string& thresholds_path) {
  CommonOpts o = opts;
  o.gate_enabled = true;
  CampaignConfig cfg = resolve_config(o);

  if (!thresholds_path.empty()) {
    std::ifstream in(thresholds_path);
    if (!in) throw servogate::IoError("cannot open thresholds file '" + thresholds_path + "'");
    Json doc;
    try {
      in >> doc;
    } catch (const Json::exception& e) {
      throw servogate::ParseError(thresholds_path, 0, e.what());
    }
    if (doc.contains("tau_p") && !doc.at("tau_p").is_null()) {
      cfg.gate.tau_p = doc.at("tau_p").get<double>();
    }
    if (doc.contains("tau_r") && !doc.at("tau_r").is_null()) {
      cfg.gate.tau_r = doc.at("tau_r").get<double>();
    }
    // thresholds calibrated against the peak statistic imply continuous
    // monitoring; a fixed decision step would sample a different quantity
    if (doc.contains("statistic") && doc.at("statistic").is_string() &&
        doc.at("statistic").get<std::string>() == "peak") {
      cfg.gate.monitor_continuously = true;
    }
    // explicit --tau-p / --tau-r flags still win
    if (opts.tau_p) cfg.gate.tau_p = *opts.tau_p;
    if (opts.tau_r) cfg.gate.tau_r = *opts.tau_r;
  }

  const servogate::Predictor predictor = servogate::load_predictor(cfg);
  const std::vector<servogate::IndexedTrial> trials = servogate::run_campaign(cfg, predictor);

  ensure_dir(cfg.output_dir);
  const std::string trials_path = (fs::path(cfg.output_dir) / "gated_trials.jsonl").string();
  servogate::write_trials_jsonl(trials, trials_path);
  echo_config(cfg, cfg.output_dir);

  const servogate::CampaignReport report = servogate::compute_report(trials);
  const std::string report_path = (fs::path(cfg.output_dir) / "report.json").string();
  std::ofstream out(report_path);
  if (!out) throw servogate::IoError("cannot write '" + report_path + "'");
  out << servogate::report_to_json(report).dump(2) << "\n";

  std::cout << "ran " << report.total_trials << " gated trial(s): success rate "
            << report.success_rate << ", autonomy rate " << report.autonomy_rate
            << "\nconfusion tp=" << report.confusion.tp << " fn=" << report.confusion.fn
            << " fp=" << report.confusion.fp << " tn=" << report.confusion.tn << "\nwrote "
            << trials_path << " and " << report_path << "\n";
  return 0;
}

int cmd_report(const std::string& trials_path, const std::string& output_dir) {
  const std::vector<servogate::IndexedTrial> records =
      servogate::read_trials_jsonl(trials_path);
  if (records.empty()) {
    throw servogate::EmptyInput("no trials in '" + trials_path + "'");
  }
  const servogate::CampaignReport report = servogate::compute_report(records);
  if (!report.separation.has_value()) {
    throw servogate::DegenerateDistribution(
        "trials contain a single intervention_needed class, so the class-separation KL is "
        "undefined; rerun the simulate command with a mixed scenario set");
  }
  const std::vector<servogate::TrialSignals> signals = servogate::extract_signals(records);

  ensure_dir(output_dir);
  const fs::path dir(output_dir);
  std::ofstream out(dir / "report.json");
  if (!out) throw servogate::IoError("cannot write report.json into '" + output_dir + "'");
  out << servogate::report_to_json(report).dump(2) << "\n";
  servogate::write_signals_csv(signals, (dir / "samples.csv").string());
  servogate::write_histograms_csv(signals, (dir / "histograms.csv").string());

  std::ofstream traces(dir / "traces.csv");
  if (!traces) throw servogate::IoError("cannot write traces.csv into '" + output_dir + "'");
  traces << "trial,t,var_p,var_r\n";
  traces.precision(17);
  for (const auto& r : records) {
    for (const auto& s : r.record.steps) {
      traces << r.index << "," << s.t << "," << s.var_p << "," << s.var_r << "\n";
    }
  }

  const servogate::SeparationReport& sep = *report.separation;
  std::cout << "report over " << report.total_trials << " trial(s), "
            << report.needed_count << " needing intervention\n"
            << "kl_gaussian raw:   p=" << sep.raw_p.kl_gaussian
            << " r=" << sep.raw_r.kl_gaussian << "\n"
            << "kl_gaussian slope: p=" << sep.slope_p.kl_gaussian
            << " r=" << sep.slope_r.kl_gaussian << "\n"
            << "wrote report.json, samples.csv, histograms.csv, traces.csv in " << output_dir
            << "\n";
  return 0;
}

int fail(int code, const std::string& what) {
  std::cerr << "error: " << what << "\n";
  return code;
}

template <typename F>
int run_guarded(F&& f) {
  try {
    return f();
  } catch (const BadConfig& e) {
    return fail(2, e.what());
  } catch (const servogate::TooFewMembers& e) {
    return fail(2, e.what());
  } catch (const servogate::ParseError& e) {
    return fail(3, e.what());
  } catch (const servogate::IoError& e) {
    return fail(3, e.what());
  } catch (const servogate::EmptyInput& e) {
    return fail(3, e.what());
  } catch (const servogate::EmptyCloud& e) {
    return fail(3, e.what());
  } catch (const servogate::BadCount& e) {
    return fail(3, e.what());
  } catch (const servogate::MissingStep& e) {
    return fail(3, e.what());
  } catch (const servogate::GraspOnAnchor& e) {
    return fail(3, e.what());
  } catch (const servogate::ActionOutOfRange& e) {
    return fail(3, e.what());
  } catch (const servogate::DegenerateMean& e) {
    return fail(4, e.what());
  } catch (const servogate::DegenerateDistribution& e) {
    return fail(4, e.what());
  } catch (const servogate::UndefinedRate& e) {
    return fail(4, e.what());
  } catch (const servogate::RankDeficient& e) {
    return fail(4, e.what());
  } catch (const servogate::NotARotation& e) {
    return fail(4, e.what());
  } catch (const servogate::Error& e) {
    return fail(1, e.what());
  } catch (const std::exception& e) {
    return fail(1, e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"uncertainty-gated shape-servo campaigns: train, simulate, calibrate, gate, report"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string trials_path;
  std::string thresholds_path;
  std::string output_dir = "out";
  std::string component = "both";
  std::string statistic = "initial";
  double w = 0.25;

  auto add_common = [&](CLI::App* cmd, bool with_gate_flags) {
    cmd->add_option("--config", opts.config_path, "campaign config JSON")->required();
    cmd->add_option("--seed", opts.seed, "override the campaign seed");
    cmd->add_option("--workers", opts.workers, "worker thread count");
    cmd->add_option("--output-dir", opts.output_dir, "output directory");
    cmd->add_option("--model-dir", opts.model_dir, "model directory");
    if (with_gate_flags) {
      cmd->add_flag_callback("--gate-on", [&] { opts.gate_enabled = true; },
                             "enable the uncertainty gate");
      cmd->add_flag_callback("--gate-off", [&] { opts.gate_enabled = false; },
                             "disable the uncertainty gate");
      cmd->add_option("--tau-p", opts.tau_p, "positional slope threshold");
      cmd->add_option("--tau-r", opts.tau_r, "rotational slope threshold");
      cmd->add_option("--mode", opts.gate_mode, "gate mode: position|rotation|both");
      cmd->add_option("--decision-step", opts.decision_step, "gate decision step (>= 1)");
      cmd->add_flag_callback("--continuous", [&] { opts.continuous = true; },
                             "monitor every step instead of one decision step");
    }
  };

  CLI::App* train = app.add_subcommand("train", "fit member models from seeded sheets");
  add_common(train, false);
  train->add_option("--tuples", opts.tuples, "training tuple count");
  train->add_option("--members", opts.members, "ensemble member count");

  CLI::App* simulate = app.add_subcommand("simulate", "run a campaign and persist trials");
  add_common(simulate, true);

  CLI::App* calibrate =
      app.add_subcommand("calibrate", "pick slope thresholds from labeled trials");
  calibrate->add_option("--trials", trials_path, "trials.jsonl from the simulate command")
      ->required();
  calibrate->add_option("--w", w, "false-positive weight in the objective FN + w*FP")
      ->check(CLI::Range(0.0, 1.0));
  calibrate->add_option("--component", component, "position|rotation|both")
      ->check(CLI::IsMember({"position", "rotation", "both"}));
  calibrate->add_option("--statistic", statistic,
                        "per-trial slope statistic: initial (slope at step 1) or peak "
                        "(largest step-to-step slope; pair with continuous monitoring)")
      ->check(CLI::IsMember({"initial", "peak"}));
  calibrate->add_option("--output-dir", output_dir, "output directory");

  CLI::App* gate_run = app.add_subcommand("gate-run", "run a gated campaign and report");
  add_common(gate_run, true);
  gate_run->add_option("--thresholds", thresholds_path,
                       "thresholds.json from the calibrate command");

  CLI::App* report = app.add_subcommand("report", "distribution and KL report from trials");
  report->add_option("--trials", trials_path, "trials.jsonl to analyze")->required();
  report->add_option("--output-dir", output_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (app.got_subcommand(train)) return run_guarded([&] { return cmd_train(opts); });
  if (app.got_subcommand(simulate)) return run_guarded([&] { return cmd_simulate(opts); });
  if (app.got_subcommand(calibrate)) {
    return run_guarded(
        [&] { return cmd_calibrate(trials_path, w, component, statistic, output_dir); });
  }
  if (app.got_subcommand(gate_run)) {
    return run_guarded([&] { return cmd_gate_run(opts, thresholds_path); });
  }
  if (app.got_subcommand(report)) {
    return run_guarded([&] { return cmd_report(trials_path, output_dir); });
  }
  std::cerr << "error: no subcommand\n";
  return 2;
}
