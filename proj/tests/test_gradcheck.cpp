// Gradient-verification harness: target selection, pass/fail reporting, and
// the corrupted negative control. The heavy numerical coverage (20 seeds per
// target) lives in the acceptance suite; here we keep seed counts small and
// test the harness itself.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <histonet/errors.hpp>
#include <histonet/gradcheck.hpp>

#include "test_util.hpp"

using namespace histonet;

TEST_CASE("gradcheck: single target passes and reports its identity") {
  gradcheck::Report r = gradcheck::run("cbam", 5, 2);
  REQUIRE(r.targets.size() == 1);
  CHECK(r.targets[0].target == "cbam");
  CHECK(r.targets[0].seeds == 2);
  CHECK(r.targets[0].pass);
  CHECK(r.targets[0].max_rel_err < r.tolerance);
  CHECK(r.all_pass());
}

TEST_CASE("gradcheck: 'all' covers every target in a fixed order") {
  gradcheck::Report r = gradcheck::run("all", 9, 1);
  REQUIRE(r.targets.size() == 6);
  const char* expected[] = {"cbam", "self", "deformable", "se", "mbconv", "model"};
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(r.targets[i].target == expected[i]);
    CHECK(r.targets[i].pass);
  }
  CHECK(r.all_pass());
}

TEST_CASE("gradcheck: invalid requests are configuration errors") {
  CHECK_THROWS_AS(gradcheck::run("bogus", 1), ConfigError);
  CHECK_THROWS_AS(gradcheck::run("cbam", 1, 0), ConfigError);
  CHECK_THROWS_AS(gradcheck::run("cbam", 1, 2, 0.0), ConfigError);
}

TEST_CASE("gradcheck: the corrupted control is caught") {
  gradcheck::Report r = gradcheck::run_corrupted(3);
  CHECK(!r.all_pass());
  REQUIRE(!r.targets.empty());
  CHECK(r.targets[0].max_rel_err > r.tolerance);
}

TEST_CASE("gradcheck: table output carries the header and one row per target") {
  gradcheck::Report r = gradcheck::run("se", 4, 1);
  std::string table = r.to_table();
  CHECK(table.find("target") != std::string::npos);
  CHECK(table.find("max_rel_err") != std::string::npos);
  CHECK(table.find("se") != std::string::npos);
  CHECK(table.find("pass") != std::string::npos);

  gradcheck::Report bad = gradcheck::run_corrupted(3);
  CHECK(bad.to_table().find("FAIL") != std::string::npos);
}
