#pragma once

#include <string>

#include "kermit/config.h"
#include "kermit/matrix.h"
#include "kermit/tape.h"

namespace kermit::testing {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = scale * rng.normal();
  return m;
}

inline void add_param(ParamSet& ps, const std::string& name, Matrix m) {
  ps.emplace(name, ParamTensor(name, std::move(m)));
}

}  // namespace kermit::testing
