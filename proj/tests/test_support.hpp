// SPDX-License-Identifier: Apache-2.0
//
// Helpers shared by the test binaries: random tensors, a central-difference
// gradient oracle and a tiny bundled vocabulary.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "cdistill/random.hpp"
#include "cdistill/tensor.hpp"

namespace cdtest {

using namespace cdistill;

inline Tensor random_tensor(Rng& rng, Shape shape, double stddev = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// |a - n| / max(|a|, |n|, floor); the floor keeps near-zero coordinates from
// producing meaningless ratios.
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

/// Compares backward() against central differences for every coordinate of
/// every tensor in `params`. `loss` must rebuild the graph on each call.
inline GradCheckResult check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                                       double h = 1e-4, double floor = 1e-8) {
  const Gradients grads = backward(loss());
  GradCheckResult result;
  for (auto& p : params) {
    const auto& g = grads.of(p);
    auto values = p.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      double plus, minus;
      {
        NoGradGuard no_grad;
        values[i] = saved + h;
        plus = loss().item();
        values[i] = saved - h;
        minus = loss().item();
      }
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      result.max_rel_error = std::max(result.max_rel_error, relative_error(g[i], numeric, floor));
      ++result.coordinates;
    }
  }
  return result;
}

// Reduces any tensor to a scalar with fixed random weights so every output
// coordinate receives a distinct upstream gradient.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed = 5) {
  Rng rng(seed);
  return sum(mul(y, random_tensor(rng, y.shape(), 1.0, false)));
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::filesystem::path source_dir() { return CDISTILL_SOURCE_DIR; }

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cdistill-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace cdtest
