#include <gtest/gtest.h>

#include <cmath>

#include "qmap/acquisition.hpp"

using qmap::AcquisitionScheme;
using qmap::BvalUnits;
using qmap::UsageError;

TEST(ParseBvalBvec, ConvertsSecondsPerMm2AndKeepsZeroDirection) {
    const auto s = qmap::parse_bval_bvec("0 1000 1000", "0 1 0\n0 0 1\n0 0 0\n");
    ASSERT_EQ(s.size(), 3u);
    EXPECT_EQ(s.bvalues(), (std::vector<double>{0.0, 1.0, 1.0}));
    EXPECT_EQ(s.direction(0), Eigen::Vector3d::Zero());
    EXPECT_EQ(s.direction(1), Eigen::Vector3d(1, 0, 0));
    EXPECT_EQ(s.direction(2), Eigen::Vector3d(0, 1, 0));
    EXPECT_TRUE(s.converted_from_s_per_mm2());
    EXPECT_FALSE(s.direction_free());
}

TEST(ParseBvalBvec, LengthMismatchIsAnError) {
    EXPECT_THROW(qmap::parse_bval_bvec("0 1000", "0 1 0\n0 0 1\n0 0 0"), UsageError);
}

TEST(ParseBvalBvec, RenormalizesDirections) {
    const auto s = qmap::parse_bval_bvec("0 1", "0 3\n0 0\n0 0");
    EXPECT_EQ(s.direction(1), Eigen::Vector3d(1, 0, 0));
    EXPECT_FALSE(s.converted_from_s_per_mm2());
}

TEST(ParseBvalBvec, RejectsBadInput) {
    EXPECT_THROW(qmap::parse_bval_bvec("0 abc", "0 1\n0 0\n0 0"), UsageError);
    EXPECT_THROW(qmap::parse_bval_bvec("0", "0\n0\n0"), UsageError);
    EXPECT_THROW(qmap::parse_bval_bvec("0 1", "0 1\n0 0"), UsageError);
    EXPECT_THROW(qmap::parse_bval_bvec("1 2", "1 1\n0 0\n0 0"), UsageError);  // no b=0
    EXPECT_THROW(qmap::parse_bval_bvec("0 -1", "0 1\n0 0\n0 0"), UsageError);
}

TEST(ParseBvalBvec, ExplicitUnitsOverrideDetection) {
    const auto ms = qmap::parse_bval_bvec("0 1000", "0 1\n0 0\n0 0", BvalUnits::ms_per_um2);
    EXPECT_EQ(ms.bvalue(1), 1000.0);
    const auto s = qmap::parse_bval_bvec("0 50", "0 1\n0 0\n0 0", BvalUnits::s_per_mm2);
    EXPECT_DOUBLE_EQ(s.bvalue(1), 0.05);
    EXPECT_TRUE(s.converted_from_s_per_mm2());
}

TEST(ParseBvalBvec, SnapsNearZeroBvaluesWhenAsked) {
    const auto s = qmap::parse_bval_bvec("5 1000 2000", "1 1 0\n0 0 1\n0 0 0", BvalUnits::auto_detect, 0.05);
    EXPECT_EQ(s.bvalue(0), 0.0);
    EXPECT_EQ(s.b0_indices(), (std::vector<std::size_t>{0}));
    EXPECT_THROW(qmap::parse_bval_bvec("5 1000 2000", "1 1 0\n0 0 1\n0 0 0"), UsageError);
}

TEST(ParseBvalBvec, AcceptsColumnBvalAndTrailingWhitespace) {
    const auto s = qmap::parse_bval_bvec("0\n1000\n2000\n", "  0 1 0 \n 0 0 1\n0 0 0\n\n");
    EXPECT_EQ(s.bvalues(), (std::vector<double>{0.0, 1.0, 2.0}));
}

TEST(ParseBvalBvec, SerializeParseRoundTrip) {
    const auto s = qmap::parse_bval_bvec("0 700 1000 2000 3000", "0 0.3 -0.2 0.99 0.1\n0 0.4 0.7 0.01 -0.5\n0 0.5 0.1 0.0 0.8");
    const auto back = qmap::parse_bval_bvec(s.to_bval_text(), s.to_bvec_text(), BvalUnits::ms_per_um2);
    ASSERT_EQ(back.size(), s.size());
    for (std::size_t t = 0; t < s.size(); ++t) {
        EXPECT_NEAR(back.bvalue(t), s.bvalue(t), 1e-9);
        EXPECT_LT((back.direction(t) - s.direction(t)).norm(), 1e-9);
    }
    const auto j = AcquisitionScheme::from_json(s.to_json());
    EXPECT_EQ(j.bvalues(), s.bvalues());
    for (std::size_t t = 0; t < s.size(); ++t) EXPECT_EQ(j.direction(t), s.direction(t));
}

TEST(ParseBvalBvec, StoredDirectionsAreUnitOrZero) {
    const auto s = qmap::parse_bval_bvec("0 1 1 1 1", "0 1e-3 5 -2 7\n0 2e-3 1 3 -1\n0 1e-3 2 1 0.5");
    for (const auto& g : s.directions()) {
        const double n = g.norm();
        EXPECT_TRUE(n == 0.0 || std::abs(n - 1.0) < 1e-6) << n;
    }
}

TEST(AcquisitionSchemeInvariants, ConstructorValidates) {
    using V = std::vector<Eigen::Vector3d>;
    EXPECT_THROW(AcquisitionScheme({0.0}, V{Eigen::Vector3d::Zero()}), UsageError);
    EXPECT_THROW(AcquisitionScheme({0.0, 1.0}, V{Eigen::Vector3d::Zero()}), UsageError);
    EXPECT_THROW(AcquisitionScheme({0.0, 1.0}, V{Eigen::Vector3d::Zero(), Eigen::Vector3d(1, 1, 0)}), UsageError);
    EXPECT_THROW(AcquisitionScheme({0.0, 1.0}, V{Eigen::Vector3d::Zero(), Eigen::Vector3d::Zero()}), UsageError);
    EXPECT_NO_THROW(AcquisitionScheme({0.0, 1.0}, V{Eigen::Vector3d::Zero(), Eigen::Vector3d(0, 0, 1)}));
}

TEST(SchemeForSimulation, DefaultGridIsDirectionFree) {
    const auto grid = std::vector<double>{0.0, 0.5, 1.0, 1.5, 2.0, 2.5};
    const auto s = qmap::scheme_for_simulation(grid);
    EXPECT_EQ(s.size(), 6u);
    EXPECT_TRUE(s.direction_free());
    for (const auto& g : s.directions()) EXPECT_EQ(g, Eigen::Vector3d::UnitZ());
    EXPECT_NO_THROW(qmap::scheme_for_simulation(qmap::default_simulation_bvalues()));
}

TEST(SchemeForSimulation, Errors) {
    EXPECT_THROW(qmap::scheme_for_simulation({}), UsageError);
    EXPECT_THROW(qmap::scheme_for_simulation({1.0}), UsageError);
}
