#include <servogate/gate.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

using namespace servogate;

namespace {

VarianceTrace trace_from(const std::vector<std::pair<double, double>>& values) {
  VarianceTrace trace;
  long t = 0;
  for (const auto& [vp, vr] : values) trace.push_back(VarianceEntry{t++, vp, vr});
  return trace;
}

bool requested(const GateDecision& d) {
  return d.action == GateAction::RequestIntervention;
}

}  // namespace

TEST(VarianceTrace, AcceptsCanonicalTrace) {
  EXPECT_NO_THROW(trace_from({{0.9, 0.5}, {0.5, 0.4}, {0.3, 0.3}}));
}

TEST(VarianceTrace, RejectsTraceNotStartingAtZero) {
  VarianceTrace trace;
  EXPECT_THROW(trace.push_back(VarianceEntry{1, 0.1, 0.1}), Error);
}

TEST(VarianceTrace, RejectsNonIncreasingSteps) {
  VarianceTrace trace;
  trace.push_back(VarianceEntry{0, 0.1, 0.1});
  EXPECT_THROW(trace.push_back(VarianceEntry{0, 0.2, 0.2}), Error);
}

TEST(VarianceTrace, RejectsNegativePositionalVariance) {
  VarianceTrace trace;
  EXPECT_THROW(trace.push_back(VarianceEntry{0, -0.1, 0.1}), Error);
}

TEST(VarianceTrace, RejectsRotationalVarianceAbovePi) {
  VarianceTrace trace;
  EXPECT_THROW(trace.push_back(VarianceEntry{0, 0.1, 3.2}), Error);
}

TEST(VarianceTrace, AtStepThrowsForAbsentStep) {
  const VarianceTrace trace = trace_from({{0.9, 0.5}, {0.5, 0.4}});
  EXPECT_THROW(trace.at_step(5), MissingStep);
}

TEST(UncertaintyVector, ComputesStepToStepDifference) {
  const VarianceTrace trace = trace_from({{0.9, 0.5}, {0.5, 0.4}});
  const UncertaintyVector u = uncertainty_vector(trace, 1);
  EXPECT_NEAR(u.d_var_p, -0.4, 1e-15);
  EXPECT_NEAR(u.d_var_r, -0.1, 1e-15);
}

TEST(UncertaintyVector, ConstantTraceGivesZeroSlope) {
  const VarianceTrace trace = trace_from({{0.3, 0.2}, {0.3, 0.2}, {0.3, 0.2}});
  for (long t = 1; t <= 2; ++t) {
    const UncertaintyVector u = uncertainty_vector(trace, t);
    EXPECT_EQ(u.d_var_p, 0.0);
    EXPECT_EQ(u.d_var_r, 0.0);
  }
}

TEST(UncertaintyVector, MatchesHandDifferencedEpisode) {
  // A short recorded episode, differenced by hand.
  const std::vector<std::pair<double, double>> episode{
      {0.80, 0.90}, {0.55, 0.70}, {0.60, 0.45}, {0.20, 0.44}};
  const VarianceTrace trace = trace_from(episode);
  for (long t = 1; t < static_cast<long>(episode.size()); ++t) {
    const UncertaintyVector u = uncertainty_vector(trace, t);
    EXPECT_NEAR(u.d_var_p, episode[t].first - episode[t - 1].first, 1e-15);
    EXPECT_NEAR(u.d_var_r, episode[t].second - episode[t - 1].second, 1e-15);
  }
}

TEST(UncertaintyVector, StepZeroHasNoPredecessor) {
  const VarianceTrace trace = trace_from({{0.9, 0.5}, {0.5, 0.4}});
  EXPECT_THROW(uncertainty_vector(trace, 0), MissingStep);
  EXPECT_THROW(uncertainty_vector(trace, 2), MissingStep);
}

TEST(GateConfig, DefaultsMatchDocumentedThresholds) {
  const GateConfig cfg;
  EXPECT_EQ(cfg.tau_p, -0.310);
  EXPECT_EQ(cfg.tau_r, -0.487);
  EXPECT_EQ(cfg.mode, GateMode::Position);
  EXPECT_EQ(cfg.decision_step, 1);
  EXPECT_FALSE(cfg.monitor_continuously);
  EXPECT_EQ(kDefaultTauP, -0.310);
  EXPECT_EQ(kDefaultTauR, -0.487);
}

TEST(EvaluateGate, SteepDropProceeds) {
  // Positional variance falls 0.9 -> 0.5; slope -0.4 is below the -0.310
  // threshold, so the episode continues autonomously.
  const VarianceTrace trace = trace_from({{0.9, 0.5}, {0.5, 0.4}});
  GateConfig cfg;
  cfg.mode = GateMode::Position;
  const GateDecision d = evaluate_gate(trace, cfg);
  EXPECT_EQ(d.action, GateAction::Proceed);
  EXPECT_TRUE(d.triggered_by.empty());
  EXPECT_EQ(d.at_step, 1);
  EXPECT_NEAR(d.u.d_var_p, -0.4, 1e-15);
}

TEST(EvaluateGate, ShallowDropRequestsIntervention) {
  // Slope -0.1 exceeds -0.310: the variance did not fall fast enough.
  const VarianceTrace trace = trace_from({{0.9, 0.5}, {0.8, 0.4}});
  GateConfig cfg;
  cfg.mode = GateMode::Position;
  const GateDecision d = evaluate_gate(trace, cfg);
  EXPECT_EQ(d.action, GateAction::RequestIntervention);
  ASSERT_EQ(d.triggered_by.size(), 1u);
  EXPECT_EQ(d.triggered_by[0], GateComponent::Position);
}

TEST(EvaluateGate, BothModeReportsOnlyTheViolatingComponent) {
  // Positional slope -0.5 passes (-0.5 <= -0.310); rotational slope -0.2
  // fails (-0.2 > -0.487): only Rotation triggers.
  const VarianceTrace trace = trace_from({{1.0, 1.0}, {0.5, 0.8}});
  GateConfig cfg;
  cfg.mode = GateMode::Both;
  const GateDecision d = evaluate_gate(trace, cfg);
  EXPECT_EQ(d.action, GateAction::RequestIntervention);
  ASSERT_EQ(d.triggered_by.size(), 1u);
  EXPECT_EQ(d.triggered_by[0], GateComponent::Rotation);
}

TEST(EvaluateGate, ThresholdComparisonIsStrict) {
  // A slope exactly at the threshold proceeds; one ulp past it violates.
  const VarianceTrace trace = trace_from({{0.9, 0.9}, {0.6, 0.5}});
  const UncertaintyVector u = uncertainty_vector(trace, 1);
  GateConfig cfg;
  cfg.mode = GateMode::Both;
  cfg.tau_p = u.d_var_p;
  cfg.tau_r = u.d_var_r;
  EXPECT_EQ(evaluate_gate(trace, cfg).action, GateAction::Proceed);
  cfg.tau_p = std::nextafter(u.d_var_p, -1.0);
  EXPECT_TRUE(requested(evaluate_gate(trace, cfg)));
}

TEST(EvaluateGate, RotationOnlyModeIgnoresPosition) {
  // Positional slope is violating, but Rotation mode never looks at it.
  const VarianceTrace trace = trace_from({{0.5, 1.0}, {0.6, 0.2}});
  GateConfig cfg;
  cfg.mode = GateMode::Rotation;
  EXPECT_EQ(evaluate_gate(trace, cfg).action, GateAction::Proceed);
  cfg.mode = GateMode::Position;
  EXPECT_TRUE(requested(evaluate_gate(trace, cfg)));
}

TEST(EvaluateGate, BothModeEqualsUnionOfSingleModes) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> var_p(0.0, 1.0);
  std::uniform_real_distribution<double> var_r(0.0, 3.0);
  std::uniform_real_distribution<double> tau(-0.6, 0.1);
  for (int rep = 0; rep < 500; ++rep) {
    const VarianceTrace trace =
        trace_from({{var_p(rng), var_r(rng)}, {var_p(rng), var_r(rng)}});
    GateConfig cfg;
    cfg.tau_p = tau(rng);
    cfg.tau_r = tau(rng);

    cfg.mode = GateMode::Position;
    const bool pos = requested(evaluate_gate(trace, cfg));
    cfg.mode = GateMode::Rotation;
    const bool rot = requested(evaluate_gate(trace, cfg));
    cfg.mode = GateMode::Both;
    const GateDecision both = evaluate_gate(trace, cfg);

    EXPECT_EQ(requested(both), pos || rot);
    const auto& tb = both.triggered_by;
    EXPECT_EQ(std::count(tb.begin(), tb.end(), GateComponent::Position) == 1, pos);
    EXPECT_EQ(std::count(tb.begin(), tb.end(), GateComponent::Rotation) == 1, rot);
  }
}

TEST(EvaluateGate, RaisingThresholdIsMonotone) {
  // Once a threshold is low enough to proceed, every lower threshold also
  // proceeds: the decision is monotone in tau.
  const VarianceTrace trace = trace_from({{0.9, 0.5}, {0.62, 0.4}});
  GateConfig cfg;
  cfg.mode = GateMode::Position;
  // A violation is slope > tau, so raising tau only ever turns requests into
  // proceeds: swept upward, decisions are a request-prefix then a
  // proceed-suffix with a single crossing at the observed slope.
  std::vector<bool> proceeds;
  for (int i = 0; i < 100; ++i) {
    cfg.tau_p = -0.6 + 0.006 * i;
    proceeds.push_back(!requested(evaluate_gate(trace, cfg)));
  }
  EXPECT_TRUE(std::is_sorted(proceeds.begin(), proceeds.end()));
  EXPECT_FALSE(proceeds.front());  // tau far below the slope: violation
  EXPECT_TRUE(proceeds.back());    // tau above the slope: proceed
}

TEST(EvaluateGate, DecisionStepSelectsTheSlope) {
  // Step 1 slope proceeds; step 2 slope violates.
  const VarianceTrace trace = trace_from({{0.9, 0.5}, {0.5, 0.4}, {0.49, 0.35}});
  GateConfig cfg;
  cfg.mode = GateMode::Position;
  cfg.decision_step = 1;
  EXPECT_FALSE(requested(evaluate_gate(trace, cfg)));
  cfg.decision_step = 2;
  EXPECT_TRUE(requested(evaluate_gate(trace, cfg)));
  EXPECT_EQ(evaluate_gate(trace, cfg).at_step, 2);
}

TEST(EvaluateGate, ContinuousMonitoringFindsFirstViolation) {
  // Steps 1 and 2 proceed; step 3 is the first violation.
  const VarianceTrace trace =
      trace_from({{2.0, 0.5}, {1.5, 0.4}, {1.0, 0.3}, {0.99, 0.25}});
  GateConfig cfg;
  cfg.mode = GateMode::Position;
  cfg.monitor_continuously = true;
  const GateDecision d = evaluate_gate(trace, cfg);
  EXPECT_TRUE(requested(d));
  EXPECT_EQ(d.at_step, 3);
}

TEST(EvaluateGate, ContinuousMonitoringProceedsWhenNoStepViolates) {
  const VarianceTrace trace = trace_from({{2.0, 2.0}, {1.5, 1.4}, {1.0, 0.8}});
  GateConfig cfg;
  cfg.mode = GateMode::Both;
  cfg.monitor_continuously = true;
  const GateDecision d = evaluate_gate(trace, cfg);
  EXPECT_FALSE(requested(d));
  EXPECT_EQ(d.at_step, 2);  // reported at the last checked step
}

TEST(EvaluateGate, ContinuousMonitoringImpliesSingleStepDecision) {
  // If the one-shot gate at step 1 violates, the monitor must also violate,
  // and never later than step 1.
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> var(0.0, 1.0);
  for (int rep = 0; rep < 200; ++rep) {
    const VarianceTrace trace =
        trace_from({{var(rng), var(rng)}, {var(rng), var(rng)}, {var(rng), var(rng)}});
    GateConfig cfg;
    cfg.mode = GateMode::Both;
    cfg.tau_p = -0.2;
    cfg.tau_r = -0.2;
    const bool one_shot = requested(evaluate_gate(trace, cfg));
    cfg.monitor_continuously = true;
    const GateDecision monitored = evaluate_gate(trace, cfg);
    if (one_shot) {
      EXPECT_TRUE(requested(monitored));
      EXPECT_EQ(monitored.at_step, 1);
    }
  }
}

TEST(EvaluateGate, MissingDecisionStepThrows) {
  const VarianceTrace trace = trace_from({{0.9, 0.5}, {0.5, 0.4}});
  GateConfig cfg;
  cfg.decision_step = 7;
  EXPECT_THROW(evaluate_gate(trace, cfg), MissingStep);
}

TEST(EvaluateGate, SingleObservationTraceCannotBeGated) {
  const VarianceTrace trace = trace_from({{0.9, 0.5}});
  GateConfig cfg;
  EXPECT_THROW(evaluate_gate(trace, cfg), MissingStep);
  cfg.monitor_continuously = true;
  EXPECT_THROW(evaluate_gate(trace, cfg), MissingStep);
}

TEST(EvaluateGate, NonPositiveDecisionStepRejected) {
  const VarianceTrace trace = trace_from({{0.9, 0.5}, {0.5, 0.4}});
  GateConfig cfg;
  cfg.decision_step = 0;
  EXPECT_THROW(evaluate_gate(trace, cfg), Error);
}

TEST(EvaluateGate, DeterministicAcrossRepeatedCalls) {
  const VarianceTrace trace = trace_from({{0.7, 1.2}, {0.6, 0.9}, {0.58, 0.88}});
  GateConfig cfg;
  cfg.mode = GateMode::Both;
  cfg.monitor_continuously = true;
  const GateDecision first = evaluate_gate(trace, cfg);
  for (int i = 0; i < 10; ++i) {
    const GateDecision again = evaluate_gate(trace, cfg);
    EXPECT_EQ(again.action, first.action);
    EXPECT_EQ(again.at_step, first.at_step);
    EXPECT_EQ(again.triggered_by, first.triggered_by);
    EXPECT_EQ(again.u.d_var_p, first.u.d_var_p);
    EXPECT_EQ(again.u.d_var_r, first.u.d_var_r);
  }
}
