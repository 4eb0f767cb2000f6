#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "topforge/core.hpp"
#include "topforge/instance_gen.hpp"
#include "topforge/random.hpp"

using namespace topforge;

namespace {

Instance single_region_instance() {
  Instance inst;
  inst.coords = {{0.5, 0.9}};
  inst.prizes = {1.0};
  inst.depot_start = inst.depot_end = {0.5, 0.5};
  inst.t_max = 2.0;
  inst.m = 2;
  return inst;
}

Instance three_region_instance() {
  Instance inst;
  inst.coords = {{0.1, 0.1}, {0.2, 0.2}, {0.3, 0.3}};
  inst.prizes = {0.3, 0.5, 0.9};
  inst.depot_start = inst.depot_end = {0.0, 0.0};
  inst.t_max = 2.0;
  inst.m = 2;
  return inst;
}

}  // namespace

TEST(TravelTime, AxisAligned) { EXPECT_NEAR(travel_time({0.5, 0.5}, {0.5, 0.9}, 1.0), 0.4, 1e-15); }

TEST(TravelTime, Identity) { EXPECT_EQ(travel_time({0.2, 0.2}, {0.2, 0.2}, 1.0), 0.0); }

TEST(TravelTime, ThreeFourFiveWithSpeed) { EXPECT_DOUBLE_EQ(travel_time({0, 0}, {0.3, 0.4}, 2.0), 0.25); }

TEST(TravelTime, RejectsNonFinite) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(travel_time({nan, 0}, {0, 0}), InvalidArgument);
  EXPECT_THROW(travel_time({0, 0}, {std::numeric_limits<double>::infinity(), 0}), InvalidArgument);
  EXPECT_THROW(travel_time({0, 0}, {1, 1}, 0.0), InvalidArgument);
}

TEST(TravelTime, SymmetricAndZeroOnlyOnIdentity) {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    Point a{rng.uniform(), rng.uniform()}, b{rng.uniform(), rng.uniform()};
    EXPECT_EQ(travel_time(a, b), travel_time(b, a));
    EXPECT_GT(travel_time(a, b), 0.0);
  }
}

TEST(RouteDuration, EmptyTourWithCoincidentDepots) {
  Instance inst = single_region_instance();
  EXPECT_EQ(route_duration({0, 2}, inst), 0.0);
}

TEST(RouteDuration, OutAndBack) {
  Instance inst = single_region_instance();
  EXPECT_NEAR(route_duration({0, 1, 2}, inst), 0.8, 1e-15);
}

TEST(RouteDuration, MatchesNaivePairwiseSum) {
  GenConfig cfg;
  cfg.n = 5;
  cfg.seed = 11;
  const Instance inst = generate_instance(cfg, 0);
  const Route r{0, 3, 1, 5, 2, 4, 6};
  // Independent recomputation from raw coordinates.
  std::vector<Point> pts{inst.depot_start};
  pts.insert(pts.end(), inst.coords.begin(), inst.coords.end());
  pts.push_back(inst.depot_end);
  double naive = 0.0;
  for (std::size_t i = 0; i + 1 < r.size(); ++i) {
    const double dx = pts[r[i]].x - pts[r[i + 1]].x, dy = pts[r[i]].y - pts[r[i + 1]].y;
    naive += std::sqrt(dx * dx + dy * dy);
  }
  EXPECT_NEAR(route_duration(r, inst), naive, 1e-12);
}

TEST(RouteDuration, OutOfRangeIndex) {
  Instance inst = single_region_instance();
  EXPECT_THROW(route_duration({0, 5, 2}, inst), InvalidRoute);
  EXPECT_THROW(route_duration({-1, 2}, inst), InvalidRoute);
}

TEST(RouteDuration, EmptyTourEqualsDepotToDepot) {
  Instance inst = single_region_instance();
  inst.depot_end = {0.1, 0.2};
  EXPECT_EQ(route_duration({0, 2}, inst), travel_time(inst.depot_start, inst.depot_end, inst.speed));
}

TEST(Feasibility, EmptyToursAreFeasible) {
  Instance inst = three_region_instance();
  const auto rep = check_feasibility(Solution{{{0, 4}, {0, 4}}}, inst);
  EXPECT_TRUE(rep.ok);
  EXPECT_TRUE(rep.violations.empty());
}

TEST(Feasibility, RegionVisitedByTwoAgents) {
  Instance inst = three_region_instance();
  const auto rep = check_feasibility(Solution{{{0, 3, 4}, {0, 3, 4}}}, inst);
  EXPECT_FALSE(rep.ok);
  ASSERT_TRUE(rep.has(ViolationKind::RepeatedAcross));
  const auto& v = rep.violations.front();
  EXPECT_EQ(v.node, 3);
  EXPECT_NE(v.message.find("region 3 visited twice"), std::string::npos);
}

TEST(Feasibility, RegionVisitedTwiceBySameAgentIsDistinctKind) {
  Instance inst = three_region_instance();
  const auto rep = check_feasibility(Solution{{{0, 2, 1, 2, 4}, {0, 4}}}, inst);
  EXPECT_FALSE(rep.ok);
  EXPECT_TRUE(rep.has(ViolationKind::RepeatedInRoute));
  EXPECT_FALSE(rep.has(ViolationKind::RepeatedAcross));
}

TEST(Feasibility, TimeBudgetExceeded) {
  Instance inst = single_region_instance();
  inst.t_max = 0.7;  // out-and-back takes 0.8
  const auto rep = check_feasibility(Solution{{{0, 1, 2}, {0, 2}}}, inst);
  EXPECT_FALSE(rep.ok);
  ASSERT_TRUE(rep.has(ViolationKind::TimeBudget));
  EXPECT_EQ(rep.violations.front().agent, 0);
  EXPECT_NE(rep.violations.front().message.find("time budget exceeded, agent 0"), std::string::npos);
}

TEST(Feasibility, TieWithinToleranceAccepted) {
  Instance inst = single_region_instance();
  inst.t_max = route_duration({0, 1, 2}, inst);
  EXPECT_TRUE(check_feasibility(Solution{{{0, 1, 2}}}, inst).ok);
  inst.t_max -= 1e-8;
  EXPECT_FALSE(check_feasibility(Solution{{{0, 1, 2}}}, inst).ok);
}

TEST(Feasibility, WrongEndpointsAndIndices) {
  Instance inst = three_region_instance();
  EXPECT_TRUE(check_feasibility(Solution{{{1, 4}}}, inst).has(ViolationKind::BadStart));
  EXPECT_TRUE(check_feasibility(Solution{{{0, 1}}}, inst).has(ViolationKind::BadEnd));
  EXPECT_TRUE(check_feasibility(Solution{{{0, 9, 4}}}, inst).has(ViolationKind::BadIndex));
  EXPECT_TRUE(check_feasibility(Solution{{{0, 4, 1, 4}}}, inst).has(ViolationKind::BadIndex));
  EXPECT_TRUE(check_feasibility(Solution{}, inst).has(ViolationKind::NoAgents));
}

TEST(TotalReward, NothingVisited) {
  Instance inst = three_region_instance();
  EXPECT_EQ(total_reward(Solution{{{0, 4}, {0, 4}}}, inst), 0.0);
}

TEST(TotalReward, UnitPrizesCountRegions) {
  Instance inst = three_region_instance();
  inst.prizes = {1, 1, 1};
  EXPECT_EQ(total_reward(Solution{{{0, 1, 2, 4}, {0, 3, 4}}}, inst), 3.0);
}

TEST(TotalReward, MixedPrizes) {
  Instance inst = three_region_instance();
  EXPECT_DOUBLE_EQ(total_reward(Solution{{{0, 1, 4}, {0, 3, 4}}}, inst), 1.2);
}

TEST(TotalReward, InvalidIndex) {
  Instance inst = three_region_instance();
  EXPECT_THROW(total_reward(Solution{{{0, 7, 4}}}, inst), InvalidRoute);
}

// Random feasible solutions: shuffled regions dealt to agents, each route
// truncated to fit the budget.
TEST(TotalRewardProperty, PermutationInvarianceAndBounds) {
  GenConfig cfg;
  cfg.n = 12;
  cfg.m = 3;
  cfg.t_max = 1.5;
  for (int scheme = 0; scheme < 3; ++scheme) {
    cfg.prize_scheme = static_cast<PrizeScheme>(scheme);
    for (std::uint64_t s = 0; s < 50; ++s) {
      cfg.seed = s;
      const Instance inst = generate_instance(cfg, s);
      Rng rng(s, 99);
      std::vector<int> order(inst.n());
      std::iota(order.begin(), order.end(), 1);
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      Solution sol{std::vector<Route>(3, Route{0})};
      for (std::size_t i = 0; i < order.size(); ++i) {
        Route& r = sol.routes[i % 3];
        Route trial = r;
        trial.push_back(order[i]);
        trial.push_back(inst.end_node());
        if (route_duration(trial, inst) <= inst.t_max) r.push_back(order[i]);
      }
      for (auto& r : sol.routes) r.push_back(inst.end_node());
      ASSERT_TRUE(check_feasibility(sol, inst).ok);

      const double reward = total_reward(sol, inst);
      Solution rotated = sol;
      std::rotate(rotated.routes.begin(), rotated.routes.begin() + 1, rotated.routes.end());
      EXPECT_EQ(total_reward(rotated, inst), reward);
      EXPECT_LE(reward, sum_of_prizes(inst) + 1e-12);
      if (cfg.prize_scheme == PrizeScheme::Constant)
        EXPECT_EQ(reward, static_cast<double>(regions_visited(sol, inst)));
    }
  }
}
