#include <cstdio>

#include "appt/selftest.hpp"

int main() {
  using namespace appt::selftest;
  std::size_t failed = 0;
  run_all(Level::full, [&](const Check& c) {
    if (!c.passed) ++failed;
    std::printf("[%s] %2d %s: %s (%.1f s)\n", c.passed ? "PASS" : "FAIL", c.id, c.name.c_str(), c.detail.c_str(),
                c.seconds);
    std::fflush(stdout);
  });
  std::printf("%zu of 12 criteria failed\n", failed);
  return failed ? 1 : 0;
}
