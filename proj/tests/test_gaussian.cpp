#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include "test_util.hpp"

using namespace gsocc;
using namespace gsocc::testing;

namespace {

Mat3 angle_axis(double angle, const Vec3& axis) { return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix(); }

}  // namespace

TEST(QuatToRotation, IdentityQuaternion) {
  EXPECT_TRUE(quat_to_rotation(identity_quat()).isApprox(Mat3::Identity(), 0.0));
}

TEST(QuatToRotation, HalfTurnAboutZ) {
  const Mat3 r = quat_to_rotation(Quat(0, 0, 0, 1));
  const Mat3 expected = Vec3(-1, -1, 1).asDiagonal();
  EXPECT_LE((r - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(QuatToRotation, QuarterTurnAboutZMatchesAxisAngle) {
  const Mat3 r = quat_to_rotation(Quat(0.7071, 0, 0, 0.7071));
  EXPECT_LE((r * Vec3(1, 0, 0) - Vec3(0, 1, 0)).norm(), 1e-6);
  EXPECT_LE((r - angle_axis(std::numbers::pi / 2, Vec3::UnitZ())).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(QuatToRotation, RandomMatchesAxisAngleOracle) {
  Engine e(11);
  for (int t = 0; t < 200; ++t) {
    const Vec3 axis = rand_vec(e, -1, 1);
    const double angle = uni(e, -3.1, 3.1);
    const Quat q(std::cos(angle / 2), std::sin(angle / 2) * axis.normalized()[0],
                 std::sin(angle / 2) * axis.normalized()[1], std::sin(angle / 2) * axis.normalized()[2]);
    EXPECT_LE((quat_to_rotation(q) - angle_axis(angle, axis)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(QuatToRotation, OrthonormalWithUnitDeterminant) {
  Engine e(3);
  for (int t = 0; t < 200; ++t) {
    const Quat q = rand_quat(e) * uni(e, 0.1, 10.0);
    const Mat3 r = quat_to_rotation(q);
    EXPECT_LE((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_NEAR(r.determinant(), 1.0, 1e-10);
  }
}

TEST(QuatToRotation, DoubleCover) {
  Engine e(5);
  for (int t = 0; t < 100; ++t) {
    const Quat q = rand_quat(e);
    EXPECT_LE((quat_to_rotation(q) - quat_to_rotation(-q)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(QuatToRotation, ZeroQuaternionThrows) { EXPECT_THROW(quat_to_rotation(Quat::Zero()), InvalidParameter); }

TEST(GaussianPrimitive, NormalizesQuaternion) {
  const GaussianPrimitive g(Vec3::Zero(), Vec3::Ones(), Quat(2, 0, 0, 0), 1.0, {0.0});
  EXPECT_NEAR(g.rotation().norm(), 1.0, 1e-12);
}

TEST(GaussianPrimitive, FloorsTinyScales) {
  const GaussianPrimitive g(Vec3::Zero(), Vec3(1e-9, 1, 1), identity_quat(), 1.0, {0.0});
  EXPECT_EQ(g.scale()[0], kMinScale);
}

TEST(GaussianPrimitive, RejectsInvalidFields) {
  EXPECT_THROW(GaussianPrimitive(Vec3::Zero(), Vec3(0, 1, 1), identity_quat(), 1.0, {0.0}), InvalidParameter);
  EXPECT_THROW(GaussianPrimitive(Vec3::Zero(), Vec3::Ones(), Quat::Zero(), 1.0, {0.0}), InvalidParameter);
  EXPECT_THROW(GaussianPrimitive(Vec3::Zero(), Vec3::Ones(), identity_quat(), -0.1, {0.0}), InvalidParameter);
  EXPECT_THROW(GaussianPrimitive(Vec3::Zero(), Vec3::Ones(), identity_quat(), 1.0, {}), InvalidParameter);
  EXPECT_THROW(GaussianPrimitive(Vec3(NAN, 0, 0), Vec3::Ones(), identity_quat(), 1.0, {0.0}), InvalidParameter);
}

TEST(GaussianSet, RejectsMismatchedClassCounts) {
  std::vector<GaussianPrimitive> prims{isotropic(Vec3::Zero(), 1, {0, 0}), isotropic(Vec3::Zero(), 1, {0, 0, 0})};
  EXPECT_THROW(GaussianSet(prims, 2), InvalidParameter);
  EXPECT_THROW(GaussianSet({}, 2), InvalidParameter);
}

TEST(BuildCovariance, UnitIsotropic) {
  const auto d = build_covariance(Vec3::Ones(), identity_quat());
  EXPECT_TRUE(d.covariance.isApprox(Mat3::Identity()));
  EXPECT_DOUBLE_EQ(d.det, 1.0);
}

TEST(BuildCovariance, AxisAlignedStretch) {
  const auto d = build_covariance(Vec3(2, 1, 1), identity_quat());
  EXPECT_LE((d.covariance - Mat3(Vec3(4, 1, 1).asDiagonal())).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_DOUBLE_EQ(d.det, 4.0);
}

TEST(BuildCovariance, RotatedStretchMatchesExplicitProduct) {
  const double h = std::sqrt(0.5);
  const auto d = build_covariance(Vec3(2, 1, 1), Quat(h, 0, 0, h));
  const Mat3 r = angle_axis(std::numbers::pi / 2, Vec3::UnitZ());
  const Mat3 s = Vec3(2, 1, 1).asDiagonal();
  const Mat3 oracle = r * s * s.transpose() * r.transpose();
  EXPECT_LE((d.covariance - oracle).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((d.covariance - Mat3(Vec3(1, 4, 1).asDiagonal())).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(BuildCovariance, RandomInvariants) {
  Engine e(17);
  for (int t = 0; t < 500; ++t) {
    const auto g = rand_gaussian(e, 2, 3.0, 0.01, 5.0);
    const auto d = build_covariance(g);
    const Mat3 s = g.scale().asDiagonal();
    EXPECT_LE((d.covariance - d.rotation * s * s.transpose() * d.rotation.transpose()).cwiseAbs().maxCoeff(),
              1e-10 * std::max(1.0, d.covariance.cwiseAbs().maxCoeff()));
    EXPECT_LE((d.covariance - d.covariance.transpose()).cwiseAbs().maxCoeff(), 1e-12 * d.covariance.norm());
    EXPECT_NEAR(d.det / d.covariance.determinant(), 1.0, 1e-8);
    EXPECT_LE((d.inverse * d.covariance - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-8);
    const Eigen::SelfAdjointEigenSolver<Mat3> eig(d.covariance);
    EXPECT_GT(eig.eigenvalues().minCoeff(), 0.0);
  }
}

TEST(BuildCovariance, InvariantToQuaternionSign) {
  Engine e(23);
  for (int t = 0; t < 100; ++t) {
    const Quat q = rand_quat(e);
    const Vec3 s = rand_vec(e, 0.1, 3.0);
    EXPECT_LE((build_covariance(s, q).covariance - build_covariance(s, -q).covariance).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(BuildCovariance, AxisPermutationMatchedByRotation) {
  // A quarter turn about z swaps the roles of the x and y scales.
  const double h = std::sqrt(0.5);
  const auto a = build_covariance(Vec3(0.5, 3.0, 1.2), Quat(h, 0, 0, h));
  const auto b = build_covariance(Vec3(3.0, 0.5, 1.2), identity_quat());
  EXPECT_LE((a.covariance - b.covariance).cwiseAbs().maxCoeff(), 1e-12);
  // A third of a turn about (1,1,1) cycles all three axes.
  const auto c = build_covariance(Vec3(0.5, 3.0, 1.2), Quat(0.5, 0.5, 0.5, 0.5));
  const auto d = build_covariance(Vec3(1.2, 0.5, 3.0), identity_quat());
  EXPECT_LE((c.covariance - d.covariance).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Mahalanobis, ZeroAtMean) {
  Engine e(29);
  const auto g = rand_gaussian(e, 3);
  EXPECT_EQ(mahalanobis_sq(g.mean(), g), 0.0);
}

TEST(Mahalanobis, EuclideanForIdentityCovariance) {
  const auto g = isotropic(Vec3(1, 1, 1), 1.0, {0.0});
  EXPECT_NEAR(mahalanobis_sq(Vec3(2, 3, 3), g), 9.0, 1e-14);
}

TEST(Mahalanobis, MatchesLinearSolve) {
  const GaussianPrimitive g(Vec3::Zero(), Vec3(2, 1, 1), identity_quat(), 1.0, {0.0});
  EXPECT_NEAR(mahalanobis_sq(Vec3(2, 0, 0), g), 1.0, 1e-14);

  Engine e(31);
  for (int t = 0; t < 300; ++t) {
    const auto r = rand_gaussian(e, 1, 3.0, 0.05, 4.0);
    const Vec3 x = rand_vec(e, -5, 5);
    const Vec3 diff = x - r.mean();
    const Vec3 sol = build_covariance(r).covariance.ldlt().solve(diff);
    const double oracle = diff.dot(sol);
    EXPECT_NEAR(mahalanobis_sq(x, r), oracle, 1e-9 * std::max(1.0, oracle));
    EXPECT_GT(mahalanobis_sq(x, r), 0.0);
  }
}
