#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace metartl {

struct GradSuiteEntry {
  std::string name;
  std::size_t points = 0;
  double max_rel_error = 0.0;
};

struct GradSuiteReport {
  std::vector<GradSuiteEntry> entries;
  double tolerance = 1e-4;
  double seconds = 0.0;
  bool passed() const;
};

// Finite-difference checks of the encoder, the scoring head and three chained
// policy steps, each at `points` random parameter settings.
GradSuiteReport run_gradient_suite(std::size_t points = 100, std::uint64_t seed = 0, double tolerance = 1e-4);

}  // namespace metartl
