#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "servogate/calibration.hpp"
#include "servogate/error.hpp"
#include "servogate/gate.hpp"
#include "servogate/predictors.hpp"
#include "servogate/sim.hpp"

namespace servogate {

using Json = nlohmann::json;

enum class PredictorKind { Ensemble, Stochastic };

inline std::string to_string(PredictorKind k) {
  return k == PredictorKind::Ensemble ? "ensemble" : "stochastic";
}

inline PredictorKind predictor_kind_from_string(const std::string& s) {
  if (s == "ensemble") return PredictorKind::Ensemble;
  if (s == "stochastic") return PredictorKind::Stochastic;
  throw BadConfig("predictor.kind must be 'ensemble' or 'stochastic', got '" + s + "'");
}

struct PredictorSpec {
  PredictorKind kind = PredictorKind::Ensemble;
  int members = 5;                  // ensemble size
  int samples = 100;                // stochastic forward passes
  double dropout_rate = 0.25;       // stochastic masking rate
  std::size_t training_tuples = 800;
  double ridge_lambda = 1e-6;
  std::string model_dir = "models";
};

/// Full description of a reproducible campaign: every run artifact derives
/// from this plus nothing else.
struct CampaignConfig {
  std::uint64_t seed = 1;
  int workers = 1;
  std::string output_dir = "out";
  PredictorSpec predictor;
  bool gate_enabled = false;
  GateConfig gate;
  SimParams sim;
  std::map<ScenarioKind, int> scenario_counts;
};

namespace detail {

inline void require_keys_known(const Json& obj, const char* where,
                               std::initializer_list<const char*> known) {
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (std::find_if(known.begin(), known.end(),
                     [&](const char* k) { return key == k; }) == known.end()) {
      throw BadConfig(std::string("unknown key '") + key + "' in " + where);
    }
  }
}

template <typename T>
T get_or(const Json& obj, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw BadConfig(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline GateMode gate_mode_from_string(const std::string& s) {
  if (s == "position") return GateMode::Position;
  if (s == "rotation") return GateMode::Rotation;
  if (s == "both") return GateMode::Both;
  throw BadConfig("gate.mode must be 'position', 'rotation', or 'both', got '" + s + "'");
}

inline std::string to_string(GateMode m) {
  switch (m) {
    case GateMode::Position: return "position";
    case GateMode::Rotation: return "rotation";
    case GateMode::Both: return "both";
  }
  throw Error("unknown gate mode");
}

/// Parses a config document, filling defaults. Unknown keys are rejected so
/// typos fail loudly instead of silently running defaults.
inline CampaignConfig parse_campaign_config(const Json& doc) {
  if (!doc.is_object()) throw BadConfig("config root must be a JSON object");
  detail::require_keys_known(doc, "config root",
                             {"seed", "workers", "output_dir", "predictor", "gate",
                              "sim", "scenarios"});
  CampaignConfig cfg;
  cfg.seed = detail::get_or<std::uint64_t>(doc, "seed", cfg.seed);
  cfg.workers = detail::get_or<int>(doc, "workers", cfg.workers);
  cfg.output_dir = detail::get_or<std::string>(doc, "output_dir", cfg.output_dir);
  if (cfg.workers < 1) throw BadConfig("workers must be >= 1");

  if (doc.contains("predictor")) {
    const Json& p = doc.at("predictor");
    detail::require_keys_known(p, "predictor",
                               {"kind", "members", "samples", "dropout_rate",
                                "training_tuples", "ridge_lambda", "model_dir"});
    cfg.predictor.kind = predictor_kind_from_string(
        detail::get_or<std::string>(p, "kind", to_string(cfg.predictor.kind)));
    cfg.predictor.members = detail::get_or<int>(p, "members", cfg.predictor.members);
    cfg.predictor.samples = detail::get_or<int>(p, "samples", cfg.predictor.samples);
    cfg.predictor.dropout_rate =
        detail::get_or<double>(p, "dropout_rate", cfg.predictor.dropout_rate);
    cfg.predictor.training_tuples = detail::get_or<std::size_t>(
        p, "training_tuples", cfg.predictor.training_tuples);
    cfg.predictor.ridge_lambda =
        detail::get_or<double>(p, "ridge_lambda", cfg.predictor.ridge_lambda);
    cfg.predictor.model_dir =
        detail::get_or<std::string>(p, "model_dir", cfg.predictor.model_dir);
  }

  if (doc.contains("gate")) {
    const Json& g = doc.at("gate");
    detail::require_keys_known(g, "gate",
                               {"enabled", "tau_p", "tau_r", "mode", "decision_step",
                                "monitor_continuously"});
    cfg.gate_enabled = detail::get_or<bool>(g, "enabled", cfg.gate_enabled);
    cfg.gate.tau_p = detail::get_or<double>(g, "tau_p", cfg.gate.tau_p);
    cfg.gate.tau_r = detail::get_or<double>(g, "tau_r", cfg.gate.tau_r);
    cfg.gate.mode =
        gate_mode_from_string(detail::get_or<std::string>(g, "mode", to_string(cfg.gate.mode)));
    cfg.gate.decision_step = detail::get_or<long>(g, "decision_step", cfg.gate.decision_step);
    cfg.gate.monitor_continuously =
        detail::get_or<bool>(g, "monitor_continuously", cfg.gate.monitor_continuously);
    if (cfg.gate.decision_step < 1) throw BadConfig("gate.decision_step must be >= 1");
  }

  if (doc.contains("sim")) {
    const Json& s = doc.at("sim");
    detail::require_keys_known(s, "sim",
                               {"spacing", "noise_sigma", "subsample", "max_steps",
                                "eps_succ", "convergence_eps", "max_action_translation"});
    cfg.sim.spacing = detail::get_or<double>(s, "spacing", cfg.sim.spacing);
    cfg.sim.noise_sigma = detail::get_or<double>(s, "noise_sigma", cfg.sim.noise_sigma);
    cfg.sim.subsample = detail::get_or<std::size_t>(s, "subsample", cfg.sim.subsample);
    cfg.sim.max_steps = detail::get_or<int>(s, "max_steps", cfg.sim.max_steps);
    cfg.sim.eps_succ = detail::get_or<double>(s, "eps_succ", cfg.sim.eps_succ);
    cfg.sim.convergence_eps =
        detail::get_or<double>(s, "convergence_eps", cfg.sim.convergence_eps);
    cfg.sim.max_action_translation =
        detail::get_or<double>(s, "max_action_translation", cfg.sim.max_action_translation);
    if (cfg.sim.max_steps < 2) throw BadConfig("sim.max_steps must be >= 2");
    if (!(cfg.sim.spacing > 0.0)) throw BadConfig("sim.spacing must be positive");
    if (cfg.sim.noise_sigma < 0.0) throw BadConfig("sim.noise_sigma must be >= 0");
  }

  if (doc.contains("scenarios")) {
    const Json& s = doc.at("scenarios");
    detail::require_keys_known(s, "scenarios",
                               {"in_distribution", "suboptimal_grasp", "non_local_goal",
                                "ood_geometry", "bimanual"});
    for (const auto& [key, value] : s.items()) {
      const int count = value.get<int>();
      if (count < 0) throw BadConfig("scenario count for '" + key + "' must be >= 0");
      cfg.scenario_counts[scenario_kind_from_string(key)] = count;
    }
  }
  if (cfg.scenario_counts.empty()) {
    throw BadConfig("config must list at least one scenario kind under 'scenarios'");
  }

  if (cfg.predictor.kind == PredictorKind::Ensemble && cfg.predictor.members < 2) {
    throw BadConfig("ensemble predictor needs at least 2 members");
  }
  if (cfg.predictor.kind == PredictorKind::Stochastic) {
    if (cfg.predictor.samples < 2) throw BadConfig("stochastic predictor needs samples >= 2");
    if (!(cfg.predictor.dropout_rate > 0.0) || !(cfg.predictor.dropout_rate < 1.0)) {
      throw BadConfig("dropout_rate must lie in (0, 1)");
    }
  }
  return cfg;
}

inline CampaignConfig load_campaign_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  Json doc;
  try {
    in >> doc;
  } catch (const Json::exception& e) {
    throw BadConfig("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_campaign_config(doc);
}

/// The fully resolved config, defaults included, for provenance echoes.
inline Json campaign_config_to_json(const CampaignConfig& cfg) {
  Json scenarios = Json::object();
  for (const auto& [kind, count] : cfg.scenario_counts) scenarios[to_string(kind)] = count;
  return Json{
      {"seed", cfg.seed},
      {"workers", cfg.workers},
      {"output_dir", cfg.output_dir},
      {"predictor",
       {{"kind", to_string(cfg.predictor.kind)},
        {"members", cfg.predictor.members},
        {"samples", cfg.predictor.samples},
        {"dropout_rate", cfg.predictor.dropout_rate},
        {"training_tuples", cfg.predictor.training_tuples},
        {"ridge_lambda", cfg.predictor.ridge_lambda},
        {"model_dir", cfg.predictor.model_dir}}},
      {"gate",
       {{"enabled", cfg.gate_enabled},
        {"tau_p", cfg.gate.tau_p},
        {"tau_r", cfg.gate.tau_r},
        {"mode", to_string(cfg.gate.mode)},
        {"decision_step", cfg.gate.decision_step},
        {"monitor_continuously", cfg.gate.monitor_continuously}}},
      {"sim",
       {{"spacing", cfg.sim.spacing},
        {"noise_sigma", cfg.sim.noise_sigma},
        {"subsample", cfg.sim.subsample},
        {"max_steps", cfg.sim.max_steps},
        {"eps_succ", cfg.sim.eps_succ},
        {"convergence_eps", cfg.sim.convergence_eps},
        {"max_action_translation", cfg.sim.max_action_translation}}},
      {"scenarios", scenarios}};
}

// ---------------------------------------------------------------------------
// Training artifacts

inline constexpr const char* kTrainManifestSchema = "train-manifest-v1";

struct TrainManifest {
  PredictorKind kind = PredictorKind::Ensemble;
  std::uint64_t dataset_seed = 0;
  std::uint64_t base_seed = 0;
  std::size_t tuple_count = 0;
  std::size_t member_count = 0;
  double ridge_lambda = 0.0;
  std::vector<std::string> files;
};

namespace detail {

inline constexpr std::uint64_t kStreamDataset = 71;
inline constexpr std::uint64_t kStreamMembers = 73;
inline constexpr std::uint64_t kStreamTrial = 79;

inline std::string member_file_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "member_%02zu.txt", i);
  return buf;
}

}  // namespace detail

/// Generates the self-supervised dataset, fits the member model(s), and
/// writes them plus a manifest into predictor.model_dir. Deterministic:
/// rerunning the same config reproduces every byte.
inline TrainManifest train_models(const CampaignConfig& cfg) {
  namespace fs = std::filesystem;
  const fs::path dir(cfg.predictor.model_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create model dir '" + dir.string() + "': " + ec.message());

  TrainManifest manifest;
  manifest.kind = cfg.predictor.kind;
  manifest.dataset_seed = detail::mix_seed(cfg.seed, detail::kStreamDataset);
  manifest.base_seed = detail::mix_seed(cfg.seed, detail::kStreamMembers);
  manifest.tuple_count = cfg.predictor.training_tuples;
  manifest.ridge_lambda = cfg.predictor.ridge_lambda;

  const std::vector<SupervisionTuple> tuples =
      generate_training_tuples(cfg.predictor.training_tuples, manifest.dataset_seed, cfg.sim);

  std::vector<MemberModel> members;
  if (cfg.predictor.kind == PredictorKind::Ensemble) {
    const EnsemblePredictor ens = fit_ensemble(tuples, cfg.predictor.members,
                                               manifest.base_seed, cfg.predictor.ridge_lambda);
    members = ens.members;
  } else {
    members.push_back(fit_member(tuples, manifest.base_seed, cfg.predictor.ridge_lambda));
  }
  manifest.member_count = members.size();

  for (std::size_t i = 0; i < members.size(); ++i) {
    const std::string name = detail::member_file_name(i);
    save_member(members[i], (dir / name).string());
    manifest.files.push_back(name);
  }

  Json doc{{"schema", kTrainManifestSchema},
           {"kind", to_string(manifest.kind)},
           {"dataset_seed", manifest.dataset_seed},
           {"base_seed", manifest.base_seed},
           {"tuple_count", manifest.tuple_count},
           {"member_count", manifest.member_count},
           {"ridge_lambda", manifest.ridge_lambda},
           {"feature_dim", kFeatureDim},
           {"action_dim", kActionDim},
           {"files", manifest.files}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write manifest in '" + dir.string() + "'");
  out << doc.dump(2) << "\n";
  return manifest;
}

/// Loads the trained predictor described by the manifest in model_dir.
inline Predictor load_predictor(const CampaignConfig& cfg) {
  namespace fs = std::filesystem;
  const fs::path dir(cfg.predictor.model_dir);
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) {
    throw IoError("no trained models: cannot open '" + manifest_path.string() +
                  "' (run the train command first)");
  }
  Json doc;
  try {
    in >> doc;
  } catch (const Json::exception& e) {
    throw ParseError(manifest_path.string(), 0, e.what());
  }
  if (detail::get_or<std::string>(doc, "schema", "") != kTrainManifestSchema) {
    throw ParseError(manifest_path.string(), 0, "unknown manifest schema");
  }
  const PredictorKind kind =
      predictor_kind_from_string(detail::get_or<std::string>(doc, "kind", "ensemble"));
  if (kind != cfg.predictor.kind) {
    throw BadConfig("model dir holds a " + to_string(kind) + " predictor but config asks for " +
                    to_string(cfg.predictor.kind));
  }

  std::vector<MemberModel> members;
  for (const auto& f : doc.at("files")) {
    members.push_back(load_member((dir / f.get<std::string>()).string()));
  }
  if (members.empty()) throw ParseError(manifest_path.string(), 0, "manifest lists no members");

  if (kind == PredictorKind::Ensemble) {
    return Predictor(EnsemblePredictor(std::move(members)));
  }
  return Predictor(StochasticPredictor(std::move(members.front()), cfg.predictor.dropout_rate,
                                       cfg.predictor.samples));
}

// ---------------------------------------------------------------------------
// Campaign execution

struct IndexedTrial {
  long index = 0;
  TrialRecord record;
};

/// Deterministic scenario list: kinds in enum order, per-trial seeds derived
/// from the campaign seed, kind, and in-kind ordinal.
inline std::vector<Scenario> plan_scenarios(const CampaignConfig& cfg) {
  std::vector<Scenario> out;
  for (const auto& [kind, count] : cfg.scenario_counts) {
    for (int i = 0; i < count; ++i) {
      const std::uint64_t tag =
          detail::kStreamTrial + 1000003ULL * static_cast<std::uint64_t>(kind) +
          static_cast<std::uint64_t>(i);
      out.push_back(make_scenario(kind, detail::mix_seed(cfg.seed, tag)));
    }
  }
  return out;
}

/// Runs every planned trial across a pool of cfg.workers threads. Trials are
/// seed-isolated, so the result is independent of scheduling; records come
/// back ordered by trial index.
inline std::vector<IndexedTrial> run_campaign(const CampaignConfig& cfg,
                                              const Predictor& predictor) {
  const std::vector<Scenario> scenarios = plan_scenarios(cfg);
  const std::optional<GateConfig> gate =
      cfg.gate_enabled ? std::optional<GateConfig>(cfg.gate) : std::nullopt;

  std::vector<IndexedTrial> results(scenarios.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex error_mutex;

  auto work = [&]() {
    while (!failed.load(std::memory_order_relaxed)) {
      const std::size_t i = next.fetch_add(1);
      if (i >= scenarios.size()) return;
      try {
        results[i] = IndexedTrial{static_cast<long>(i),
                                  run_any_trial(predictor, gate, scenarios[i], cfg.sim)};
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        failed.store(true, std::memory_order_relaxed);
        return;
      }
    }
  };

  const int n_workers =
      scenarios.empty() ? 1
                        : std::max(1, std::min(cfg.workers, static_cast<int>(scenarios.size())));
  if (n_workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_workers);
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(work);
    for (std::thread& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return results;
}

// ---------------------------------------------------------------------------
// JSON Lines persistence (schema trial-v1)

inline constexpr const char* kTrialSchema = "trial-v1";

inline std::string to_string(GateAction a) {
  return a == GateAction::Proceed ? "proceed" : "request_intervention";
}

inline std::string to_string(GateComponent c) {
  return c == GateComponent::Position ? "position" : "rotation";
}

inline Json trial_to_json(const IndexedTrial& trial) {
  const TrialRecord& r = trial.record;
  Json steps = Json::array();
  for (const StepRecord& s : r.steps) {
    steps.push_back(Json{{"t", s.t},
                         {"var_p", s.var_p},
                         {"var_r", s.var_r},
                         {"action", {s.action(0), s.action(1), s.action(2), s.action(3),
                                     s.action(4), s.action(5)}},
                         {"translation_norm", s.translation_norm},
                         {"members", s.member_count}});
  }
  Json gate;
  if (r.gate.has_value()) {
    Json triggered = Json::array();
    for (GateComponent c : r.gate->triggered_by) triggered.push_back(to_string(c));
    gate = Json{{"action", to_string(r.gate->action)},
                {"triggered_by", triggered},
                {"at_step", r.gate->at_step},
                {"u_p", r.gate->u.d_var_p},
                {"u_r", r.gate->u.d_var_r}};
  } else {
    gate = nullptr;
  }
  return Json{{"schema", kTrialSchema},
              {"trial", trial.index},
              {"scenario",
               {{"kind", to_string(r.scenario.kind)},
                {"seed", r.scenario.seed},
                {"rows", r.scenario.rows},
                {"cols", r.scenario.cols},
                {"kernel_sigma", r.scenario.kernel_sigma},
                {"curvature", r.scenario.curvature},
                {"grasp_node", r.scenario.grasp_node},
                {"left_grasp_node", r.scenario.left_grasp_node}}},
              {"steps", steps},
              {"gate", gate},
              {"terminated_at_step", r.terminated_at_step},
              {"termination", to_string(r.termination)},
              {"final_chamfer", r.final_chamfer},
              {"success", r.success},
              {"intervention_needed", r.intervention_needed},
              {"intervention_requested", r.intervention_requested},
              {"autonomous",
               {{"final_chamfer", r.autonomous_final_chamfer},
                {"success", r.autonomous_success},
                {"terminated_at_step", r.autonomous_terminated_at_step}}}};
}

inline IndexedTrial trial_from_json(const Json& doc, const std::string& path, long line) {
  try {
    if (detail::get_or<std::string>(doc, "schema", "") != kTrialSchema) {
      throw ParseError(path, line, "unknown or missing record schema");
    }
    IndexedTrial out;
    out.index = doc.at("trial").get<long>();
    TrialRecord& r = out.record;
    const Json& sc = doc.at("scenario");
    r.scenario.kind = scenario_kind_from_string(sc.at("kind").get<std::string>());
    r.scenario.seed = sc.at("seed").get<std::uint64_t>();
    r.scenario.rows = sc.at("rows").get<int>();
    r.scenario.cols = sc.at("cols").get<int>();
    r.scenario.kernel_sigma = sc.at("kernel_sigma").get<double>();
    r.scenario.curvature = sc.at("curvature").get<double>();
    r.scenario.grasp_node = sc.at("grasp_node").get<int>();
    r.scenario.left_grasp_node = sc.at("left_grasp_node").get<int>();
    for (const Json& s : doc.at("steps")) {
      StepRecord step;
      step.t = s.at("t").get<long>();
      step.var_p = s.at("var_p").get<double>();
      step.var_r = s.at("var_r").get<double>();
      const auto& a = s.at("action");
      for (int k = 0; k < kActionDim; ++k) step.action(k) = a.at(k).get<double>();
      step.translation_norm = s.at("translation_norm").get<double>();
      step.member_count = s.at("members").get<std::size_t>();
      r.steps.push_back(step);
    }
    if (!doc.at("gate").is_null()) {
      const Json& g = doc.at("gate");
      GateDecision d;
      const std::string action = g.at("action").get<std::string>();
      d.action = action == "proceed" ? GateAction::Proceed : GateAction::RequestIntervention;
      for (const Json& c : g.at("triggered_by")) {
        d.triggered_by.push_back(c.get<std::string>() == "position" ? GateComponent::Position
                                                                    : GateComponent::Rotation);
      }
      d.at_step = g.at("at_step").get<long>();
      d.u.d_var_p = g.at("u_p").get<double>();
      d.u.d_var_r = g.at("u_r").get<double>();
      r.gate = d;
    }
    r.terminated_at_step = doc.at("terminated_at_step").get<long>();
    const std::string term = doc.at("termination").get<std::string>();
    if (term == "converged") r.termination = Termination::Converged;
    else if (term == "max_steps") r.termination = Termination::MaxSteps;
    else if (term == "intervention") r.termination = Termination::Intervention;
    else throw ParseError(path, line, "unknown termination '" + term + "'");
    r.final_chamfer = doc.at("final_chamfer").get<double>();
    r.success = doc.at("success").get<bool>();
    r.intervention_needed = doc.at("intervention_needed").get<bool>();
    r.intervention_requested = doc.at("intervention_requested").get<bool>();
    const Json& au = doc.at("autonomous");
    r.autonomous_final_chamfer = au.at("final_chamfer").get<double>();
    r.autonomous_success = au.at("success").get<bool>();
    r.autonomous_terminated_at_step = au.at("terminated_at_step").get<long>();
    return out;
  } catch (const Json::exception& e) {
    throw ParseError(path, line, e.what());
  }
}

/// One record per line, ordered by trial index, newline-terminated — append
/// is always safe.
inline void write_trials_jsonl(const std::vector<IndexedTrial>& trials,
                               const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  for (const IndexedTrial& t : trials) out << trial_to_json(t).dump() << "\n";
}

inline std::vector<IndexedTrial> read_trials_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<IndexedTrial> out;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json doc;
    try {
      doc = Json::parse(line);
    } catch (const Json::exception& e) {
      throw ParseError(path, line_no, e.what());
    }
    out.push_back(trial_from_json(doc, path, line_no));
  }
  return out;
}

/// Variance trace of one trial as CSV rows `t,var_p,var_r`.
inline void write_variance_trace_csv(const std::vector<StepRecord>& steps,
                                     const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "t,var_p,var_r\n";
  out.precision(17);
  for (const StepRecord& s : steps) out << s.t << "," << s.var_p << "," << s.var_r << "\n";
}

// ---------------------------------------------------------------------------
// Signal extraction and reporting

/// Per-trial scalar signals: the raw predictive variances at the first
/// observation (the standard uncertainty baseline, before any action is
/// taken) and the first variance slopes, var(1) - var(0), which is what the
/// gate thresholds. Trials that ended before step 1 carry no signal and are
/// skipped.
struct TrialSignals {
  long index = 0;
  ScenarioKind kind = ScenarioKind::InDistribution;
  bool needed = false;
  bool requested = false;
  double raw_p = 0.0;
  double raw_r = 0.0;
  double slope_p = 0.0;
  double slope_r = 0.0;
};

inline std::vector<TrialSignals> extract_signals(const std::vector<IndexedTrial>& trials) {
  std::vector<TrialSignals> out;
  for (const IndexedTrial& t : trials) {
    if (t.record.steps.size() < 2) continue;
    const StepRecord& s0 = t.record.steps[0];
    const StepRecord& s1 = t.record.steps[1];
    TrialSignals sig;
    sig.index = t.index;
    sig.kind = t.record.scenario.kind;
    sig.needed = t.record.intervention_needed;
    sig.requested = t.record.intervention_requested;
    sig.raw_p = s0.var_p;
    sig.raw_r = s0.var_r;
    sig.slope_p = s1.var_p - s0.var_p;
    sig.slope_r = s1.var_r - s0.var_r;
    out.push_back(sig);
  }
  return out;
}

inline std::vector<SlopeSample> slope_samples_from_signals(
    const std::vector<TrialSignals>& signals) {
  std::vector<SlopeSample> out;
  out.reserve(signals.size());
  for (const TrialSignals& s : signals) {
    out.push_back(SlopeSample{s.slope_p, s.slope_r, s.needed});
  }
  return out;
}

/// Which per-trial slope statistic a threshold is calibrated against:
/// the initial slope var(1) - var(0) (used with a fixed decision step), or
/// the peak step-to-step slope over the whole trace (used with continuous
/// monitoring, where the first violation at any step triggers).
enum class SlopeStatistic { Initial, Peak };

inline std::string to_string(SlopeStatistic s) {
  return s == SlopeStatistic::Initial ? "initial" : "peak";
}

inline SlopeStatistic slope_statistic_from_string(const std::string& s) {
  if (s == "initial") return SlopeStatistic::Initial;
  if (s == "peak") return SlopeStatistic::Peak;
  throw BadConfig("unknown slope statistic '" + s + "' (expected initial|peak)");
}

/// Per-trial calibration samples for the chosen statistic. Trials with fewer
/// than two recorded steps carry no slope and are skipped.
inline std::vector<SlopeSample> slope_samples_from_trials(
    const std::vector<IndexedTrial>& trials, SlopeStatistic statistic) {
  std::vector<SlopeSample> out;
  for (const IndexedTrial& t : trials) {
    const std::vector<StepRecord>& steps = t.record.steps;
    if (steps.size() < 2) continue;
    SlopeSample s;
    s.intervention_needed = t.record.intervention_needed;
    if (statistic == SlopeStatistic::Initial) {
      s.slope_p = steps[1].var_p - steps[0].var_p;
      s.slope_r = steps[1].var_r - steps[0].var_r;
    } else {
      s.slope_p = -std::numeric_limits<double>::infinity();
      s.slope_r = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 1; i < steps.size(); ++i) {
        s.slope_p = std::max(s.slope_p, steps[i].var_p - steps[i - 1].var_p);
        s.slope_r = std::max(s.slope_r, steps[i].var_r - steps[i - 1].var_r);
      }
    }
    out.push_back(s);
  }
  return out;
}

/// Distribution comparison of one scalar signal between the two label
/// classes; the KL direction is intervention-needed relative to not-needed.
struct SignalReport {
  DistributionSummary needed;
  DistributionSummary not_needed;
  double kl_gaussian = 0.0;
  double kl_histogram = 0.0;
};

namespace detail {

inline SignalReport signal_report(const std::vector<double>& needed,
                                  const std::vector<double>& not_needed, std::size_t bins) {
  SignalReport rep;
  rep.needed = DistributionSummary::fit(needed);
  rep.not_needed = DistributionSummary::fit(not_needed);
  rep.kl_gaussian = kl_divergence_gaussian(rep.needed, rep.not_needed);
  rep.kl_histogram = kl_divergence_histogram(rep.needed, rep.not_needed, bins);
  return rep;
}

}  // namespace detail

/// Class-separation block of a report: only computable when both label
/// classes are present.
struct SeparationReport {
  SignalReport raw_p, raw_r, slope_p, slope_r;
};

struct CampaignReport {
  std::size_t total_trials = 0;
  std::size_t trials_with_signal = 0;
  std::size_t needed_count = 0;      // among trials with signal
  std::size_t not_needed_count = 0;  // among trials with signal
  std::size_t successes = 0;
  double success_rate = 0.0;
  std::optional<SeparationReport> separation;  // absent with a single label class
  bool gated = false;
  ConfusionMatrix confusion;  // requested vs needed, all trials (gated runs)
  double accuracy = 0.0;
  std::optional<double> fpr;  // absent when a rate's denominator is zero
  std::optional<double> fnr;
  double autonomy_rate = 0.0;
};

inline constexpr std::size_t kReportHistogramBins = 16;

/// Computes the class-separation report (when both label classes appear) and,
/// for gated runs, the confusion block.
inline CampaignReport compute_report(const std::vector<IndexedTrial>& trials) {
  if (trials.empty()) throw EmptyInput("no trials to report on");
  CampaignReport rep;
  rep.total_trials = trials.size();

  const std::vector<TrialSignals> signals = extract_signals(trials);
  rep.trials_with_signal = signals.size();

  std::vector<double> raw_p_n, raw_p_s, raw_r_n, raw_r_s;
  std::vector<double> slope_p_n, slope_p_s, slope_r_n, slope_r_s;
  for (const TrialSignals& s : signals) {
    (s.needed ? raw_p_n : raw_p_s).push_back(s.raw_p);
    (s.needed ? raw_r_n : raw_r_s).push_back(s.raw_r);
    (s.needed ? slope_p_n : slope_p_s).push_back(s.slope_p);
    (s.needed ? slope_r_n : slope_r_s).push_back(s.slope_r);
  }
  rep.needed_count = raw_p_n.size();
  rep.not_needed_count = raw_p_s.size();
  if (rep.needed_count > 0 && rep.not_needed_count > 0) {
    SeparationReport sep;
    sep.raw_p = detail::signal_report(raw_p_n, raw_p_s, kReportHistogramBins);
    sep.raw_r = detail::signal_report(raw_r_n, raw_r_s, kReportHistogramBins);
    sep.slope_p = detail::signal_report(slope_p_n, slope_p_s, kReportHistogramBins);
    sep.slope_r = detail::signal_report(slope_r_n, slope_r_s, kReportHistogramBins);
    rep.separation = std::move(sep);
  }

  for (const IndexedTrial& t : trials) rep.successes += t.record.success ? 1 : 0;
  rep.success_rate = static_cast<double>(rep.successes) / trials.size();

  rep.gated = std::any_of(trials.begin(), trials.end(),
                          [](const IndexedTrial& t) { return t.record.gate.has_value(); });
  if (rep.gated) {
    std::vector<TrialLabel> labels;
    labels.reserve(trials.size());
    std::size_t requested = 0;
    for (const IndexedTrial& t : trials) {
      labels.push_back(TrialLabel{t.record.intervention_needed,
                                  t.record.intervention_requested});
      requested += t.record.intervention_requested ? 1 : 0;
    }
    rep.confusion = confusion(labels);
    const auto total = static_cast<double>(trials.size());
    rep.accuracy = (rep.confusion.tp + rep.confusion.tn) / total;
    if (rep.confusion.fp + rep.confusion.tn > 0) {
      rep.fpr = static_cast<double>(rep.confusion.fp) / (rep.confusion.fp + rep.confusion.tn);
    }
    if (rep.confusion.fn + rep.confusion.tp > 0) {
      rep.fnr = static_cast<double>(rep.confusion.fn) / (rep.confusion.fn + rep.confusion.tp);
    }
    rep.autonomy_rate = 1.0 - requested / total;
  }
  return rep;
}

inline Json report_to_json(const CampaignReport& rep) {
  auto signal = [](const SignalReport& s) {
    return Json{{"needed",
                 {{"mean", s.needed.fitted_mean},
                  {"variance", s.needed.fitted_variance},
                  {"count", s.needed.samples.size()}}},
                {"not_needed",
                 {{"mean", s.not_needed.fitted_mean},
                  {"variance", s.not_needed.fitted_variance},
                  {"count", s.not_needed.samples.size()}}},
                {"kl_gaussian", s.kl_gaussian},
                {"kl_histogram", s.kl_histogram}};
  };
  Json doc{{"schema", "report-v1"},
           {"total_trials", rep.total_trials},
           {"trials_with_signal", rep.trials_with_signal},
           {"needed_count", rep.needed_count},
           {"not_needed_count", rep.not_needed_count},
           {"successes", rep.successes},
           {"success_rate", rep.success_rate}};
  if (rep.separation.has_value()) {
    doc["signals"] = Json{{"raw_p", signal(rep.separation->raw_p)},
                          {"raw_r", signal(rep.separation->raw_r)},
                          {"slope_p", signal(rep.separation->slope_p)},
                          {"slope_r", signal(rep.separation->slope_r)}};
  } else {
    doc["signals"] = nullptr;
  }
  if (rep.gated) {
    doc["gate"] = Json{{"confusion",
                        {{"tp", rep.confusion.tp},
                         {"fn", rep.confusion.fn},
                         {"fp", rep.confusion.fp},
                         {"tn", rep.confusion.tn}}},
                       {"accuracy", rep.accuracy},
                       {"fpr", rep.fpr.has_value() ? Json(*rep.fpr) : Json(nullptr)},
                       {"fnr", rep.fnr.has_value() ? Json(*rep.fnr) : Json(nullptr)},
                       {"autonomy_rate", rep.autonomy_rate}};
  }
  return doc;
}

/// Plot-ready CSV of the per-trial signals.
inline void write_signals_csv(const std::vector<TrialSignals>& signals,
                              const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "trial,kind,needed,requested,raw_p,raw_r,slope_p,slope_r\n";
  out.precision(17);
  for (const TrialSignals& s : signals) {
    out << s.index << "," << to_string(s.kind) << "," << (s.needed ? 1 : 0) << ","
        << (s.requested ? 1 : 0) << "," << s.raw_p << "," << s.raw_r << "," << s.slope_p
        << "," << s.slope_r << "\n";
  }
}

/// Plot-ready histogram CSV: shared equal-width bins per signal, one row per
/// (signal, class, bin).
inline void write_histograms_csv(const std::vector<TrialSignals>& signals,
                                 const std::string& path, int bins = kReportHistogramBins) {
  if (bins < 1) throw BadCount("histogram bins must be >= 1");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "signal,class,bin_lo,bin_hi,count\n";
  out.precision(17);

  const char* names[4] = {"raw_p", "raw_r", "slope_p", "slope_r"};
  for (int which = 0; which < 4; ++which) {
    std::vector<double> needed, not_needed;
    for (const TrialSignals& s : signals) {
      const double v = which == 0 ? s.raw_p : which == 1 ? s.raw_r
                       : which == 2 ? s.slope_p : s.slope_r;
      (s.needed ? needed : not_needed).push_back(v);
    }
    std::vector<double> all = needed;
    all.insert(all.end(), not_needed.begin(), not_needed.end());
    if (all.empty()) continue;
    const auto [lo_it, hi_it] = std::minmax_element(all.begin(), all.end());
    double lo = *lo_it, hi = *hi_it;
    if (hi <= lo) hi = lo + 1e-12;
    const double width = (hi - lo) / bins;
    auto emit = [&](const char* cls, const std::vector<double>& vals) {
      std::vector<long> counts(bins, 0);
      for (double v : vals) {
        int b = static_cast<int>((v - lo) / width);
        b = std::clamp(b, 0, bins - 1);
        ++counts[b];
      }
      for (int b = 0; b < bins; ++b) {
        out << names[which] << "," << cls << "," << lo + b * width << ","
            << lo + (b + 1) * width << "," << counts[b] << "\n";
      }
    };
    emit("needed", needed);
    emit("not_needed", not_needed);
  }
}

}  // namespace servogate
