#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tttseg/cli_config.hpp"
#include "tttseg/gradcheck_suite.hpp"

using namespace tttseg;

TEST_CASE("override parsing: numbers, bools, strings, dotted paths") {
  nlohmann::json c = nlohmann::json::object();
  cli::apply_override(c, "epochs=50");
  cli::apply_override(c, "lr=0.01");
  cli::apply_override(c, "val_split=true");
  cli::apply_override(c, "preset=synthetic64");
  cli::apply_override(c, "nested.deep.key=7");
  CHECK(c["epochs"] == 50);
  CHECK(c["lr"] == 0.01);
  CHECK(c["val_split"] == true);
  CHECK(c["preset"] == "synthetic64");
  CHECK(c["nested"]["deep"]["key"] == 7);
  CHECK_THROWS_AS(cli::apply_override(c, "novalue"), ConfigError);
  CHECK_THROWS_AS(cli::apply_override(c, "=5"), ConfigError);
  CHECK_THROWS_AS(cli::apply_override(c, "epochs..x=5"), ConfigError);
}

TEST_CASE("unknown keys are rejected by name") {
  nlohmann::json c = {{"out", "d"}, {"bogus_key", 1}};
  CHECK_THROWS_WITH_AS(cli::require_known_keys(c, {"out", "seed"}, "gen-data"),
                       doctest::Contains("bogus_key"), ConfigError);
  CHECK_NOTHROW(cli::require_known_keys(nlohmann::json{{"out", "d"}}, {"out"}, "gen-data"));
}

TEST_CASE("typed getters validate types") {
  nlohmann::json c = {{"n", 3}, {"x", 0.5}, {"s", "str"}, {"b", false}};
  CHECK(cli::get_int(c, "n", 0) == 3);
  CHECK(cli::get_num(c, "x", 0.0) == 0.5);
  CHECK(cli::get_str(c, "s", "") == "str");
  CHECK(cli::get_bool(c, "b", true) == false);
  CHECK(cli::get_int(c, "missing", 9) == 9);
  CHECK_THROWS_AS(cli::get_int(c, "x", 0), ConfigError);
  CHECK_THROWS_AS(cli::get_str(c, "n", ""), ConfigError);
  CHECK_THROWS_WITH_AS(cli::require_str(c, "absent", "cmd"), doctest::Contains("absent"), ConfigError);
}

TEST_CASE("gradcheck suite: filter and perturbation hook") {
  SuiteOptions opts;
  opts.only = "matmul";
  auto checks = run_gradcheck_suite(opts);
  REQUIRE(checks.size() == 1);
  CHECK(checks[0].name == "matmul");
  CHECK(checks[0].passed);

  opts.perturb = "matmul";
  auto broken = run_gradcheck_suite(opts);
  REQUIRE(broken.size() == 1);
  CHECK_FALSE(broken[0].passed);
  CHECK(broken[0].max_rel_error > 1e-5);
}

TEST_CASE("gradcheck suite: fast subset is green") {
  SuiteOptions opts;
  opts.only = "conv2d";  // conv2d and conv2d_strided
  auto checks = run_gradcheck_suite(opts);
  REQUIRE(checks.size() == 2);
  for (const auto& c : checks) {
    CAPTURE(c.name);
    CHECK(c.passed);
  }
}
