#include <catch2/catch_amalgamated.hpp>

#include "qml/verify.hpp"

using namespace qml;

namespace {

VerifyOptions quick_options() {
  VerifyOptions opt;
  opt.loss_instances = 8;
  opt.episode_instances = 6;
  opt.mining_batches = 25;
  opt.memory_steps = 150;
  opt.metric_runs = 12;
  opt.identity_trials = 6;
  return opt;
}

}  // namespace

TEST_CASE("verification suite passes on a clean build") {
  auto checks = run_verification(quick_options());
  REQUIRE(checks.size() == 14);
  for (const auto& c : checks) {
    INFO(c.name << ": " << c.detail);
    CHECK(c.pass);
  }
  REQUIRE(all_passed(checks));

  std::string table = verification_table(checks);
  CHECK(table.find("op_gradients") != std::string::npos);
  CHECK(table.find("loss_gradients_raqua") != std::string::npos);
  CHECK(table.find("mining_oracle") != std::string::npos);
  CHECK(table.find("fault_selftest") != std::string::npos);
  CHECK(table.find("FAIL") == std::string::npos);
}

TEST_CASE("an injected gradient fault is caught and attributed") {
  VerifyOptions opt = quick_options();
  opt.loss_instances = 3;
  GradFault saved = g_grad_fault;
  g_grad_fault = {"softmax_cross_entropy", 1e-3};
  CheckResult c = check_loss_gradients(Variant::RaQua, opt);
  g_grad_fault = saved;

  REQUIRE_FALSE(c.pass);
  CHECK(c.max_err > opt.grad_tol);
  CHECK(c.detail.find("injected gradient fault on op 'softmax_cross_entropy'") !=
        std::string::npos);
}

TEST_CASE("the fault self-test reports failure when detection is broken") {
  // With an absurdly loose tolerance the planted perturbation goes unnoticed,
  // which the self-test must surface as its own failure.
  VerifyOptions opt = quick_options();
  opt.grad_tol = 1e6;
  CheckResult c = check_fault_selftest(opt);
  REQUIRE_FALSE(c.pass);
  CHECK(c.detail.find("NOT detected") != std::string::npos);
}
