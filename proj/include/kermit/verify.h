#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace kermit {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
};

// Finite-difference checks of every differentiable building block (linear
// layer, softmax, attention, block and extended block attention, CTC and
// insertion losses) and of the joint training loss on a small random model
// at lambda 0, 0.5 and 1 and at several BBT levels. Every parameter
// coordinate is checked.
std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed, double epsilon = 1e-5);

}  // namespace kermit
