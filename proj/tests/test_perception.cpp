#include <catch2/catch_amalgamated.hpp>

#include "hoi/perception.hpp"

using namespace hoi;

namespace {

perception::CandidatePair pair_with(int human, int object, double r) {
  perception::CandidatePair p;
  p.human_index = human;
  p.object_index = object;
  p.r_k = r;
  return p;
}

}  // namespace

TEST_CASE("roi pool reference values") {
  Eigen::MatrixXd ch(2, 2);
  ch << 1, 2, 3, 4;
  std::vector<Eigen::MatrixXd> fmap{ch};

  auto full = perception::roi_pool(fmap, {0, 0, 2, 2}, 1, 1);
  REQUIRE(full.size() == 1);
  REQUIRE_THAT(full(0), Catch::Matchers::WithinAbs(2.5, 1e-12));

  auto left = perception::roi_pool(fmap, {0, 0, 1, 2}, 1, 1);
  REQUIRE_THAT(left(0), Catch::Matchers::WithinAbs(2.0, 1e-12));

  auto grid = perception::roi_pool(fmap, {0, 0, 2, 2}, 2, 2);
  REQUIRE(grid.size() == 4);
  REQUIRE_THAT(grid(0), Catch::Matchers::WithinAbs(1.0, 1e-12));
  REQUIRE_THAT(grid(1), Catch::Matchers::WithinAbs(2.0, 1e-12));
  REQUIRE_THAT(grid(2), Catch::Matchers::WithinAbs(3.0, 1e-12));
  REQUIRE_THAT(grid(3), Catch::Matchers::WithinAbs(4.0, 1e-12));
}

TEST_CASE("roi pool clips, validates and orders channels") {
  Eigen::MatrixXd c0 = Eigen::MatrixXd::Constant(4, 4, 1.0);
  Eigen::MatrixXd c1 = Eigen::MatrixXd::Constant(4, 4, 2.0);
  std::vector<Eigen::MatrixXd> fmap{c0, c1};

  auto out = perception::roi_pool(fmap, {-5, -5, 10, 10}, 1, 1);  // clipped to the map
  REQUIRE(out.size() == 2);
  REQUIRE_THAT(out(0), Catch::Matchers::WithinAbs(1.0, 1e-12));
  REQUIRE_THAT(out(1), Catch::Matchers::WithinAbs(2.0, 1e-12));

  REQUIRE_THROWS_AS(perception::roi_pool(fmap, {10, 10, 20, 20}, 1, 1), std::invalid_argument);
  REQUIRE_THROWS_AS(perception::roi_pool({}, {0, 0, 1, 1}, 1, 1), std::invalid_argument);
  std::vector<Eigen::MatrixXd> ragged{c0, Eigen::MatrixXd::Zero(3, 4)};
  REQUIRE_THROWS_AS(perception::roi_pool(ragged, {0, 0, 1, 1}, 1, 1), std::invalid_argument);
  REQUIRE_THROWS_AS(perception::roi_pool(fmap, {0, 0, 1, 1}, 0, 1), std::invalid_argument);
}

TEST_CASE("roi pool over the full map with one bin is the exact mean") {
  nn::Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Eigen::MatrixXd> fmap{nn::randn(rng, 8, 8), nn::randn(rng, 8, 8)};
    auto out = perception::roi_pool(fmap, {0, 0, 8, 8}, 1, 1);
    REQUIRE_THAT(out(0), Catch::Matchers::WithinAbs(fmap[0].mean(), 1e-12));
    REQUIRE_THAT(out(1), Catch::Matchers::WithinAbs(fmap[1].mean(), 1e-12));
  }
}

TEST_CASE("perception model shapes and scene-actor transformer equivariance") {
  perception::PerceptionConfig cfg;
  nn::ParamStore ps;
  nn::Rng rng(3);
  perception::PerceptionModel model(ps, rng, cfg);

  const long n = 4;
  nn::Var Z(nn::randn(rng, n, cfg.d_z));
  nn::Var A(nn::randn(rng, n, cfg.d_a));
  nn::Var F = model.fuse_entities(Z, A);
  REQUIRE(F.rows() == n);
  REQUIRE(F.cols() == cfg.d_e);
  REQUIRE_THROWS_AS(model.fuse_entities(A, Z), std::invalid_argument);

  std::vector<long> humans{0, 0, 1}, objects{2, 3, 2};
  Eigen::MatrixXd G = nn::randn(rng, 3, 8);
  nn::Var U = model.build_candidate_tokens(F, humans, objects, G);
  REQUIRE(U.rows() == 3);
  REQUIRE(U.cols() == cfg.d_model);
  // Pairs sharing a human read identical fused rows.
  nn::Var U2 = model.build_candidate_tokens(F, {0, 0}, {2, 2}, Eigen::MatrixXd::Zero(2, 8));
  REQUIRE((U2.val().row(0) - U2.val().row(1)).norm() == 0.0);

  nn::Var T = model.sat_forward(U);
  REQUIRE(T.rows() == 3);
  REQUIRE(T.cols() == cfg.d_model);

  // Permuting candidate tokens permutes the output identically.
  Eigen::MatrixXd perm(3, cfg.d_model);
  perm.row(0) = U.val().row(2);
  perm.row(1) = U.val().row(0);
  perm.row(2) = U.val().row(1);
  nn::Var Tp = model.sat_forward(nn::Var(perm));
  REQUIRE((Tp.val().row(0) - T.val().row(2)).norm() < 1e-9);
  REQUIRE((Tp.val().row(1) - T.val().row(0)).norm() < 1e-9);
  REQUIRE((Tp.val().row(2) - T.val().row(1)).norm() < 1e-9);

  nn::Var s = model.salience_scores(T);
  REQUIRE(s.rows() == 3);
  REQUIRE(s.cols() == 1);
  for (long i = 0; i < 3; ++i) {
    REQUIRE(s.val()(i, 0) > 0.0);
    REQUIRE(s.val()(i, 0) < 1.0);
  }

  // Empty candidate set passes through.
  nn::Var empty(Eigen::MatrixXd(0, cfg.d_model));
  REQUIRE(model.sat_forward(empty).rows() == 0);
}

TEST_CASE("orchestration gate") {
  REQUIRE_THAT(perception::orchestration_gate(0.8, 0.9, 0.5, 0.6),
               Catch::Matchers::WithinAbs(0.68, 1e-12));
  REQUIRE_THAT(perception::orchestration_gate(0.3, 0.2, 0.7, 0.0),
               Catch::Matchers::WithinAbs(0.2, 1e-12));
  REQUIRE_THAT(perception::orchestration_gate(0.3, 0.2, 0.7, 1.0),
               Catch::Matchers::WithinAbs(0.3, 1e-12));
  REQUIRE_THROWS_AS(perception::orchestration_gate(0.5, 0.5, 0.5, 1.2), std::invalid_argument);
}

TEST_CASE("candidate selection quota") {
  perception::PerceptionConfig cfg;
  cfg.quota = 2;
  cfg.max_candidates = 16;
  std::vector<perception::CandidatePair> pairs{
      pair_with(0, 1, 0.9), pair_with(0, 2, 0.8), pair_with(0, 3, 0.7), pair_with(1, 1, 0.6)};
  auto sel = perception::select_candidates(pairs, cfg);
  // Human 0 keeps its best two, human 1 keeps its only pair.
  REQUIRE(sel == std::vector<std::size_t>{0, 1, 3});
}

TEST_CASE("candidate selection coverage under a tight cap") {
  perception::PerceptionConfig cfg;
  cfg.quota = 3;
  cfg.max_candidates = 2;
  std::vector<perception::CandidatePair> pairs{pair_with(0, 1, 0.9), pair_with(0, 2, 0.8),
                                               pair_with(1, 1, 0.6)};
  auto sel = perception::select_candidates(pairs, cfg);
  // Coverage guarantees human 1 a slot, evicting human 0's second-best pair.
  REQUIRE(sel == std::vector<std::size_t>{0, 2});
}

TEST_CASE("candidate selection tie breaking and output order") {
  perception::PerceptionConfig cfg;
  cfg.quota = 2;
  cfg.max_candidates = 3;
  std::vector<perception::CandidatePair> pairs{pair_with(0, 5, 0.5), pair_with(0, 2, 0.5),
                                               pair_with(0, 2, 0.5), pair_with(1, 9, 0.4)};
  auto sel = perception::select_candidates(pairs, cfg);
  // Equal r: lower object index first, then earlier construction order. The
  // quota keeps pairs 1 and 2 for human 0; output is sorted by rank.
  REQUIRE(sel == std::vector<std::size_t>{1, 2, 3});

  // Cap smaller than the number of humans keeps the best heads only.
  cfg.max_candidates = 1;
  auto tight = perception::select_candidates(pairs, cfg);
  REQUIRE(tight == std::vector<std::size_t>{1});

  REQUIRE(perception::select_candidates({}, cfg).empty());
}

TEST_CASE("box jitter stays near the clean box and in bounds") {
  nn::Rng rng(17);
  core::BoundingBox clean{10, 20, 42, 90};
  for (int i = 0; i < 200; ++i) {
    auto b = perception::jitter_box(clean, 128, 128, rng);
    REQUIRE(b.valid());
    REQUIRE(b.x2 <= 128.0);
    REQUIRE(b.y2 <= 128.0);
    REQUIRE(std::abs(b.x1 - clean.x1) <= 0.05 * clean.width() + 1e-12);
    REQUIRE(std::abs(b.y2 - clean.y2) <= 0.05 * clean.height() + 1e-12);
    REQUIRE(core::iou(b, clean) > 0.7);
  }
  // Deterministic for a fixed stream.
  nn::Rng r1(9), r2(9);
  auto a = perception::jitter_box(clean, 128, 128, r1);
  auto c = perception::jitter_box(clean, 128, 128, r2);
  REQUIRE(a.x1 == c.x1);
  REQUIRE(a.y2 == c.y2);
}

TEST_CASE("perception config validation") {
  perception::PerceptionConfig cfg;
  REQUIRE_NOTHROW(cfg.validate());
  cfg.alpha = 1.5;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.alpha = 0.6;
  cfg.d_model = 30;  // not divisible by heads
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.d_model = 32;
  cfg.quota = 0;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
}
