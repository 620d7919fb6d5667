#include <catch2/catch_amalgamated.hpp>

#include "hoi/steering.hpp"

using namespace hoi;

namespace {

steering::SteeringConfig small_cfg() {
  steering::SteeringConfig cfg;
  cfg.kernel_length = 4;
  cfg.d = 16;
  cfg.d_model = 12;
  cfg.d_g = 6;
  cfg.heads = 4;
  return cfg;
}

generator::ToyGenerator small_gen() {
  generator::ToyGeneratorConfig gcfg;
  gcfg.d = 16;
  gcfg.layers = 1;
  gcfg.heads = 4;
  return generator::ToyGenerator({"what", "is", "the", "person", "doing", "with", "object",
                                  "hold", generator::kEosWord},
                                 gcfg);
}

}  // namespace

TEST_CASE("scene token is the patch mean") {
  Eigen::MatrixXd patches(3, 4);
  patches << 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12;
  Eigen::RowVectorXd t = steering::scene_token(patches);
  REQUIRE_THAT(t(0), Catch::Matchers::WithinAbs(5.0, 1e-12));
  REQUIRE_THAT(t(3), Catch::Matchers::WithinAbs(8.0, 1e-12));
  REQUIRE_THROWS_AS(steering::scene_token(Eigen::MatrixXd(0, 4)), std::invalid_argument);
}

TEST_CASE("kernel shapes across modes") {
  for (auto mode : {steering::KernelMode::kFull, steering::KernelMode::kDirect,
                    steering::KernelMode::kMlp}) {
    auto cfg = small_cfg();
    cfg.mode = mode;
    nn::ParamStore ps;
    nn::Rng rng(2);
    steering::SteeringModel model(ps, rng, cfg);
    nn::Var v(nn::randn(rng, 1, cfg.d_model));
    nn::Var g(nn::randn(rng, 1, cfg.d_g));
    nn::Var Q = model.kernel(v, g);
    REQUIRE(Q.rows() == cfg.kernel_length);
    REQUIRE(Q.cols() == cfg.d);
    REQUIRE(Q.val().allFinite());
  }
}

TEST_CASE("single-token memory makes attention scores irrelevant") {
  auto cfg = small_cfg();
  nn::ParamStore ps;
  nn::Rng rng(4);
  steering::SteeringModel model(ps, rng, cfg);
  nn::Var e(nn::randn(rng, 1, cfg.d));

  Eigen::MatrixXd before = model.kernel_from_evidence(e).val();
  // With one key/value token the softmax weight is exactly 1 whatever the
  // scores are, so the query and key projections cannot influence the output.
  model.mhca.wq.W.val_mut().setRandom();
  model.mhca.wk.W.val_mut().setRandom();
  Eigen::MatrixXd after = model.kernel_from_evidence(e).val();
  REQUIRE((before - after).norm() == 0.0);
}

TEST_CASE("zero evidence silences the attention branch") {
  auto cfg = small_cfg();
  nn::ParamStore ps;
  nn::Rng rng(6);
  steering::SteeringModel model(ps, rng, cfg);

  // Freshly built value/output projections have zero bias, and layer norm of
  // the zero row is the zero row, so the attended update vanishes exactly.
  nn::Var zero(Eigen::MatrixXd::Zero(1, cfg.d));
  nn::Var att = model.mhca(model.ln_q(model.slots), model.ln_kv(zero));
  REQUIRE(att.val().norm() == 0.0);

  // The kernel then reduces to the slot/feed-forward path.
  nn::Var h = model.slots;
  nn::Var f = model.ff2(nn::gelu(model.ff1(model.ln_ff(h))));
  Eigen::MatrixXd expect = h.val() + f.val();
  REQUIRE((model.kernel_from_evidence(zero).val() - expect).norm() < 1e-12);
}

TEST_CASE("residual flag switches the kernel wiring") {
  auto cfg = small_cfg();
  nn::ParamStore ps1, ps2;
  nn::Rng r1(8), r2(8);
  steering::SteeringModel with_res(ps1, r1, cfg);
  cfg.vkf_residual = false;
  steering::SteeringModel without(ps2, r2, cfg);

  nn::Rng re(9);
  Eigen::MatrixXd ev = nn::randn(re, 1, cfg.d);
  Eigen::MatrixXd a = with_res.kernel_from_evidence(nn::Var(ev)).val();
  Eigen::MatrixXd b = without.kernel_from_evidence(nn::Var(ev)).val();
  REQUIRE((a - b).norm() > 1e-9);
  REQUIRE(b.allFinite());
}

TEST_CASE("evidence ablations zero out one branch") {
  auto cfg = small_cfg();
  cfg.zero_vk = true;
  nn::ParamStore ps;
  nn::Rng rng(10);
  steering::SteeringModel model(ps, rng, cfg);
  nn::Rng rv(11);
  nn::Var v1(nn::randn(rv, 1, cfg.d_model)), v2(nn::randn(rv, 1, cfg.d_model));
  nn::Var g(nn::randn(rv, 1, cfg.d_g));
  // Local evidence is dropped, so different candidate tokens cannot matter.
  REQUIRE((model.evidence(v1, g).val() - model.evidence(v2, g).val()).norm() == 0.0);

  cfg.zero_vk = false;
  cfg.zero_fglobal = true;
  nn::ParamStore ps2;
  nn::Rng rng2(10);
  steering::SteeringModel m2(ps2, rng2, cfg);
  nn::Var g2(nn::randn(rv, 1, cfg.d_g));
  REQUIRE((m2.evidence(v1, g).val() - m2.evidence(v1, g2).val()).norm() == 0.0);
  REQUIRE((m2.evidence(v1, g).val() - m2.evidence(v2, g).val()).norm() > 1e-12);
}

TEST_CASE("direct mode maps the candidate token alone") {
  auto cfg = small_cfg();
  cfg.mode = steering::KernelMode::kDirect;
  nn::ParamStore ps;
  nn::Rng rng(12);
  steering::SteeringModel model(ps, rng, cfg);
  nn::Rng rv(13);
  nn::Var v(nn::randn(rv, 1, cfg.d_model));
  nn::Var ga(nn::randn(rv, 1, cfg.d_g)), gb(nn::randn(rv, 1, cfg.d_g));
  REQUIRE((model.kernel(v, ga).val() - model.kernel(v, gb).val()).norm() == 0.0);
}

TEST_CASE("prefix assembly is a bit-exact concatenation") {
  auto gen = small_gen();
  auto cfg = small_cfg();
  nn::ParamStore ps;
  nn::Rng rng(14);
  steering::SteeringModel model(ps, rng, cfg);
  nn::Rng rv(15);
  nn::Var Q = model.kernel(nn::Var(nn::randn(rv, 1, cfg.d_model)),
                           nn::Var(nn::randn(rv, 1, cfg.d_g)));

  auto text_ids = gen.tokenizer().encode("what is the person doing");
  nn::Var X = steering::assemble_prefix(Q, text_ids, gen);
  const long L = cfg.kernel_length;
  REQUIRE(X.rows() == L + static_cast<long>(text_ids.size()));
  REQUIRE((X.val().topRows(L) - Q.val()).norm() == 0.0);
  REQUIRE((X.val().bottomRows(static_cast<long>(text_ids.size())) - gen.embed_text(text_ids))
              .norm() == 0.0);

  REQUIRE_THROWS_AS(steering::assemble_prefix(Q, {}, gen), std::invalid_argument);

  // Zero-length kernel degenerates to the raw inquiry embedding.
  nn::Var empty(Eigen::MatrixXd(0, cfg.d));
  nn::Var T = steering::assemble_prefix(empty, text_ids, gen);
  REQUIRE((T.val() - gen.embed_text(text_ids)).norm() == 0.0);
}

TEST_CASE("kernel gradients reach the slots") {
  auto cfg = small_cfg();
  nn::ParamStore ps;
  nn::Rng rng(16);
  steering::SteeringModel model(ps, rng, cfg);
  nn::Rng rv(17);
  nn::Var v(nn::randn(rv, 1, cfg.d_model), true);
  nn::Var g(nn::randn(rv, 1, cfg.d_g));
  nn::Var loss = nn::sum_all(model.kernel(v, g));
  nn::backward(loss);
  REQUIRE(model.slots.grad().norm() > 0.0);
  REQUIRE(v.grad().norm() > 0.0);
}

TEST_CASE("steering config validation") {
  auto cfg = small_cfg();
  REQUIRE_NOTHROW(cfg.validate());
  cfg.heads = 3;  // does not divide d = 16
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = small_cfg();
  cfg.kernel_length = -1;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
}
