#include <servogate/predictors.hpp>
#include <servogate/sim.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <vector>

#include "test_util.hpp"

using namespace servogate;

namespace {

PointCloud random_cloud(std::mt19937_64& rng, std::size_t n, double scale = 0.1) {
  PointCloud cloud;
  for (std::size_t i = 0; i < n; ++i) cloud.points.push_back(testutil::random_vec3(rng, scale));
  return cloud;
}

ShapeServoInput random_input(std::mt19937_64& rng) {
  ShapeServoInput input;
  input.current_cloud = random_cloud(rng, 40);
  input.goal_cloud = random_cloud(rng, 40);
  input.manipulation_point = input.current_cloud.points[rng() % 40];
  return input;
}

RigidTransform action_from_vector(const ActionVector& v) {
  return RigidTransform(Rotation3::exp(v.tail<3>()), v.head<3>());
}

// Tuples whose actions follow an exact linear map from the features.
std::vector<SupervisionTuple> linear_tuples(const WeightMatrix& w0, std::size_t n,
                                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<SupervisionTuple> data;
  data.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ShapeServoInput input = random_input(rng);
    const ActionVector a = w0 * featurize(input);
    data.push_back(SupervisionTuple{std::move(input), action_from_vector(a)});
  }
  return data;
}

}  // namespace

TEST(Featurize, HasFifteenDocumentedComponents) {
  EXPECT_EQ(kFeatureDim, 15);
  EXPECT_EQ(kActionDim, 6);
}

TEST(Featurize, GoalEqualToCurrentZeroesTheDeltaBlocks) {
  std::mt19937_64 rng(3);
  ShapeServoInput input;
  input.current_cloud = random_cloud(rng, 30);
  input.goal_cloud = input.current_cloud;
  input.manipulation_point = input.current_cloud.points[4];
  const FeatureVector f = featurize(input);
  EXPECT_LT(f.segment<3>(0).norm(), 1e-15);   // centroid displacement
  EXPECT_LT(f.segment<3>(3).norm(), 1e-15);   // extent delta
  EXPECT_LT(f.segment<3>(9).norm(), 1e-15);   // spread delta
  EXPECT_LT(f.segment<3>(12).norm(), 1e-15);  // cross term
  // the manipulation-point offset block is independent of the goal
  const Vec3 offset = input.manipulation_point - input.current_cloud.centroid();
  EXPECT_LT((f.segment<3>(6) - offset).norm(), 1e-15);
}

TEST(Featurize, TranslatedGoalShowsUpInTheDisplacementBlock) {
  std::mt19937_64 rng(13);
  ShapeServoInput input;
  input.current_cloud = random_cloud(rng, 30);
  input.goal_cloud = input.current_cloud;
  const Vec3 shift(0.01, 0.0, 0.0);
  for (Vec3& p : input.goal_cloud.points) p += shift;
  input.manipulation_point = input.current_cloud.points[0];
  const FeatureVector f = featurize(input);
  EXPECT_LT((f.segment<3>(0) - shift).norm(), 1e-12);
  EXPECT_LT(f.segment<3>(3).norm(), 1e-12);  // translation keeps extents
  EXPECT_LT(f.segment<3>(9).norm(), 1e-12);  // ... and spreads
  // cross block is offset x displacement by construction
  const Vec3 offset = input.manipulation_point - input.current_cloud.centroid();
  EXPECT_LT((f.segment<3>(12) - offset.cross(shift)).norm(), 1e-12);
}

TEST(Featurize, EmptyCloudThrows) {
  ShapeServoInput input;
  input.goal_cloud.points.push_back(Vec3::Zero());
  EXPECT_THROW(featurize(input), EmptyCloud);
}

TEST(ShapeServoInput, ValidateAcceptsPointInsideInflatedBounds) {
  ShapeServoInput input;
  input.current_cloud.points = {Vec3(0, 0, 0), Vec3(1, 1, 1)};
  input.goal_cloud = input.current_cloud;
  input.manipulation_point = Vec3(1.05, 0.5, 0.5);  // inside the 10% margin
  EXPECT_NO_THROW(input.validate());
}

TEST(ShapeServoInput, ValidateRejectsPointOutsideInflatedBounds) {
  ShapeServoInput input;
  input.current_cloud.points = {Vec3(0, 0, 0), Vec3(1, 1, 1)};
  input.goal_cloud = input.current_cloud;
  input.manipulation_point = Vec3(1.2, 0.5, 0.5);  // past the 10% margin
  EXPECT_THROW(input.validate(), Error);
}

TEST(ShapeServoInput, ValidateRejectsEmptyClouds) {
  ShapeServoInput input;
  input.manipulation_point = Vec3::Zero();
  EXPECT_THROW(input.validate(), EmptyCloud);
}

TEST(FitMember, RecoversAnExactLinearMap) {
  std::mt19937_64 rng(23);
  WeightMatrix w0;
  for (int r = 0; r < kActionDim; ++r) {
    for (int c = 0; c < kFeatureDim; ++c) {
      w0(r, c) = 0.02 * std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
    }
  }
  const std::vector<SupervisionTuple> data = linear_tuples(w0, 400, 31);
  const MemberModel model = fit_member(data, /*seed=*/7, /*ridge_lambda=*/1e-12);
  EXPECT_LT((model.weights - w0).norm(), 1e-6);

  // and the fitted policy reproduces the actions
  std::mt19937_64 eval_rng(41);
  for (int i = 0; i < 10; ++i) {
    const ShapeServoInput input = random_input(eval_rng);
    const FeatureVector f = featurize(input);
    EXPECT_LT((model.predict_raw(f) - w0 * f).norm(), 1e-7);
  }
}

TEST(FitMember, RepeatedTupleMatchesNormalEquationsOracle) {
  // Every bootstrap draw of a single repeated tuple is that tuple, so the
  // fit solves (n phi phi' + lambda I) W' = n phi a' exactly.
  std::mt19937_64 rng(43);
  const ShapeServoInput input = random_input(rng);
  const RigidTransform action(Rotation3::about_z(0.3), Vec3(0.01, -0.02, 0.005));
  const std::size_t n = 20;
  const std::vector<SupervisionTuple> data(n, SupervisionTuple{input, action});

  const double lambda = 1.0;
  const MemberModel model = fit_member(data, /*seed=*/99, lambda);

  const FeatureVector f = featurize(input);
  const ActionVector a = action_to_vector(action);
  const Eigen::Matrix<double, kFeatureDim, kFeatureDim> gram =
      static_cast<double>(n) * (f * f.transpose()) +
      lambda * Eigen::Matrix<double, kFeatureDim, kFeatureDim>::Identity();
  const Eigen::Matrix<double, kFeatureDim, kActionDim> moment =
      static_cast<double>(n) * (f * a.transpose());
  const WeightMatrix oracle = gram.fullPivLu().solve(moment).transpose();

  EXPECT_LT((model.weights - oracle).norm(), 1e-9 * std::max(1.0, oracle.norm()));
}

TEST(FitMember, DifferentSeedsGiveDifferentWeights) {
  std::mt19937_64 rng(53);
  std::vector<SupervisionTuple> data;
  for (int i = 0; i < 60; ++i) {
    ShapeServoInput input = random_input(rng);
    data.push_back(SupervisionTuple{input, testutil::random_transform(rng, 0.01)});
  }
  const MemberModel a = fit_member(data, 1, 1e-6);
  const MemberModel b = fit_member(data, 2, 1e-6);
  EXPECT_GT((a.weights - b.weights).norm(), 1e-8);
  // same seed reproduces the same member bit for bit
  const MemberModel a2 = fit_member(data, 1, 1e-6);
  EXPECT_EQ((a.weights - a2.weights).norm(), 0.0);
}

TEST(FitMember, TooFewTuplesRejected) {
  std::mt19937_64 rng(63);
  std::vector<SupervisionTuple> data;
  for (int i = 0; i < kFeatureDim - 1; ++i) {
    data.push_back(SupervisionTuple{random_input(rng), RigidTransform::identity()});
  }
  EXPECT_THROW(fit_member(data, 1, 1e-6), EmptyInput);
}

TEST(FitMember, NegativeLambdaRejected) {
  std::mt19937_64 rng(73);
  std::vector<SupervisionTuple> data;
  for (int i = 0; i < 20; ++i) {
    data.push_back(SupervisionTuple{random_input(rng), RigidTransform::identity()});
  }
  EXPECT_THROW(fit_member(data, 1, -1e-9), Error);
}

TEST(FitMember, NonFiniteSupervisionRejected) {
  // A NaN in the supervision poisons the solve; the fit must refuse to hand
  // back a model with non-finite weights.
  std::mt19937_64 rng(83);
  const ShapeServoInput input = random_input(rng);
  const Vec3 bad(std::numeric_limits<double>::quiet_NaN(), 0.0, 0.0);
  const std::vector<SupervisionTuple> data(
      20, SupervisionTuple{input, RigidTransform(Rotation3::identity(), bad)});
  EXPECT_THROW(fit_member(data, 5, 1e-6), RankDeficient);
}

TEST(FitEnsemble, MembersDifferAndCountIsRespected) {
  std::mt19937_64 rng(93);
  std::vector<SupervisionTuple> data;
  for (int i = 0; i < 80; ++i) {
    data.push_back(SupervisionTuple{random_input(rng), testutil::random_transform(rng, 0.01)});
  }
  const EnsemblePredictor ens = fit_ensemble(data, 5, 1000, 1e-6);
  EXPECT_EQ(ens.size(), 5u);
  for (std::size_t i = 1; i < ens.members.size(); ++i) {
    EXPECT_GT((ens.members[i].weights - ens.members[0].weights).norm(), 1e-10);
  }
  EXPECT_THROW(fit_ensemble(data, 1, 1000, 1e-6), TooFewMembers);
}

TEST(PredictEnsemble, IdenticalMembersHaveZeroSpread) {
  std::mt19937_64 rng(103);
  std::vector<SupervisionTuple> data;
  for (int i = 0; i < 40; ++i) {
    data.push_back(SupervisionTuple{random_input(rng), testutil::random_transform(rng, 0.01)});
  }
  const MemberModel member = fit_member(data, 4, 1e-6);
  const EnsemblePredictor ens(std::vector<MemberModel>{member, member, member});
  const ShapeServoInput probe = random_input(rng);
  const AggregateResult agg = aggregate(predict_ensemble(ens, probe));
  EXPECT_EQ(agg.var_p, 0.0);
  EXPECT_LT(agg.var_r, 1e-7);
}

TEST(PredictEnsemble, AllZeroFeaturesPredictTheIdentityAction) {
  // P_g = P_c and the manipulation point at the centroid zero every feature,
  // and a linear policy has no bias term to fall back on.
  std::mt19937_64 rng(113);
  std::vector<SupervisionTuple> data;
  for (int i = 0; i < 40; ++i) {
    data.push_back(SupervisionTuple{random_input(rng), testutil::random_transform(rng, 0.01)});
  }
  const EnsemblePredictor ens = fit_ensemble(data, 3, 2000, 1e-6);

  ShapeServoInput probe;
  probe.current_cloud = random_cloud(rng, 25);
  probe.goal_cloud = probe.current_cloud;
  probe.manipulation_point = probe.current_cloud.centroid();
  const EnsembleOutputs outputs = predict_ensemble(ens, probe);
  for (const RigidTransform& t : outputs.members) {
    EXPECT_LT(t.translation.norm(), 1e-12);
    EXPECT_LT(geodesic_distance(t.rotation, Rotation3::identity()), 1e-7);
  }
}

TEST(PredictEnsemble, FamiliarInputsScoreLowerVarianceThanNovelOnes) {
  // Train on simulator-generated tuples, then compare predictive variance on
  // fresh in-range inputs against inputs with goals far outside the
  // training displacement range.
  SimParams sim;
  const std::vector<SupervisionTuple> data = generate_training_tuples(400, 777, sim);
  const EnsemblePredictor ens = fit_ensemble(data, 5, 31337, 1e-6);

  std::mt19937_64 rng(123);
  std::vector<double> familiar, novel;
  for (int i = 0; i < 100; ++i) {
    const SupervisionTuple& t = data[rng() % data.size()];
    familiar.push_back(aggregate(predict_ensemble(ens, t.input)).var_p);

    ShapeServoInput far = t.input;
    const Vec3 big_shift(0.4, 0.3, 0.25);  // far beyond any training action
    for (Vec3& p : far.goal_cloud.points) p += big_shift;
    novel.push_back(aggregate(predict_ensemble(ens, far)).var_p);
  }
  std::sort(familiar.begin(), familiar.end());
  std::sort(novel.begin(), novel.end());
  EXPECT_LT(familiar[familiar.size() / 2], novel[novel.size() / 2]);
}

TEST(PredictStochastic, SameSeedReproducesEverySample) {
  std::mt19937_64 rng(133);
  std::vector<SupervisionTuple> data;
  for (int i = 0; i < 40; ++i) {
    data.push_back(SupervisionTuple{random_input(rng), testutil::random_transform(rng, 0.01)});
  }
  const StochasticPredictor sp(fit_member(data, 3, 1e-6), 0.25, 64);
  const ShapeServoInput probe = random_input(rng);
  const EnsembleOutputs a = predict_stochastic(sp, probe, 42);
  const EnsembleOutputs b = predict_stochastic(sp, probe, 42);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ((a.members[i].translation - b.members[i].translation).norm(), 0.0);
    EXPECT_EQ((a.members[i].rotation.matrix() - b.members[i].rotation.matrix()).norm(), 0.0);
  }
  const EnsembleOutputs c = predict_stochastic(sp, probe, 43);
  EXPECT_GT(position_variance(a) + position_variance(c), 0.0);
}

TEST(PredictStochastic, VanishingDropoutRateCollapsesTheSpread) {
  std::mt19937_64 rng(143);
  std::vector<SupervisionTuple> data;
  for (int i = 0; i < 40; ++i) {
    data.push_back(SupervisionTuple{random_input(rng), testutil::random_transform(rng, 0.01)});
  }
  const StochasticPredictor sp(fit_member(data, 3, 1e-6), 1e-9, 100);
  const ShapeServoInput probe = random_input(rng);
  const AggregateResult agg = aggregate(predict_stochastic(sp, probe, 7));
  EXPECT_LT(agg.var_p, 1e-12);
}

TEST(PredictStochastic, EmpiricalVarianceTracksClosedForm) {
  // With masks m_j ~ Bernoulli(1-r) scaled by 1/(1-r), the positional
  // predictive variance is sum_j r/(1-r) * ||W_pos col j||^2 phi_j^2.
  std::mt19937_64 rng(153);
  std::vector<SupervisionTuple> data;
  for (int i = 0; i < 60; ++i) {
    data.push_back(SupervisionTuple{random_input(rng), testutil::random_transform(rng, 0.01)});
  }
  const MemberModel base = fit_member(data, 11, 1e-6);
  const double rate = 0.3;
  const StochasticPredictor sp(base, rate, 100);

  int within = 0;
  const int fixtures = 20;
  for (int i = 0; i < fixtures; ++i) {
    const ShapeServoInput probe = random_input(rng);
    const FeatureVector f = featurize(probe);
    double closed = 0.0;
    for (int j = 0; j < kFeatureDim; ++j) {
      closed += rate / (1.0 - rate) *
                base.weights.block<3, 1>(0, j).squaredNorm() * f[j] * f[j];
    }
    const double empirical =
        position_variance(predict_stochastic(sp, probe, 5000 + i));
    if (std::abs(empirical - closed) <= 0.15 * closed) ++within;
  }
  // Monte Carlo noise at K=100 leaves a little slack; the bulk must agree.
  EXPECT_GE(within, fixtures - 3);
}

TEST(PredictStochastic, RejectsBadConstruction) {
  std::mt19937_64 rng(163);
  std::vector<SupervisionTuple> data;
  for (int i = 0; i < 20; ++i) {
    data.push_back(SupervisionTuple{random_input(rng), RigidTransform::identity()});
  }
  const MemberModel base = fit_member(data, 3, 1e-6);
  EXPECT_THROW(StochasticPredictor(base, 0.0, 100), Error);
  EXPECT_THROW(StochasticPredictor(base, 1.0, 100), Error);
  EXPECT_THROW(StochasticPredictor(base, 0.5, 1), TooFewMembers);
}

TEST(MemberIo, SaveLoadRoundTripsTheModel) {
  testutil::ScratchDir dir("member");
  std::mt19937_64 rng(173);
  std::vector<SupervisionTuple> data;
  for (int i = 0; i < 40; ++i) {
    data.push_back(SupervisionTuple{random_input(rng), testutil::random_transform(rng, 0.01)});
  }
  const MemberModel model = fit_member(data, 17, 1e-6);
  const std::string path = dir.file("member.txt");
  save_member(model, path);
  const MemberModel back = load_member(path);
  EXPECT_EQ(back.seed, model.seed);
  EXPECT_EQ(back.ridge_lambda, model.ridge_lambda);
  EXPECT_LT((back.weights - model.weights).norm(), 1e-15 * std::max(1.0, model.weights.norm()));

  // identical predictions after the round trip
  const ShapeServoInput probe = random_input(rng);
  const FeatureVector f = featurize(probe);
  EXPECT_EQ((back.predict_raw(f) - model.predict_raw(f)).norm(), 0.0);
}

TEST(MemberIo, VersionedHeaderIsWritten) {
  testutil::ScratchDir dir("memberhdr");
  MemberModel model;
  const std::string path = dir.file("member.txt");
  save_member(model, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "servogate-member v1");
}

TEST(MemberIo, BadMagicRejectedWithLine) {
  testutil::ScratchDir dir("badmember");
  const std::string path = dir.file("bad.txt");
  {
    std::ofstream out(path);
    out << "some-other-format v9\n";
  }
  try {
    load_member(path);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 1u);
  }
}

TEST(MemberIo, MissingFileThrowsIoError) {
  EXPECT_THROW(load_member("/nonexistent/member.txt"), IoError);
}

TEST(MemberIo, TruncatedWeightsRejected) {
  testutil::ScratchDir dir("shortmember");
  const std::string path = dir.file("short.txt");
  {
    std::ofstream out(path);
    out << "servogate-member v1\nfeature_dim 15\naction_dim 6\n"
           "ridge_lambda 1e-06\nseed 9\n"
           "0 0 0\n";  // far fewer than 15 weights on the first row
  }
  EXPECT_THROW(load_member(path), ParseError);
}
