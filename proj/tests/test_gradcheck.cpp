#include <doctest.h>

#include <chrono>

#include "support/gradcheck_suite.hpp"

using dualpath::testing::gradcheck_suite;

TEST_CASE("every differentiable op matches central differences") {
  const auto start = std::chrono::steady_clock::now();
  const auto results = gradcheck_suite(20);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  for (const auto& r : results) {
    INFO(r.op);
    CHECK(r.cases == 20);
    CHECK(r.worst < 1e-4);
  }
  CHECK(seconds < 60.0);
}
