// Copyright (c) 2026 UVDT contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "uvdt/rng.hpp"
#include "uvdt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

namespace testutil {

// |a-b| scaled by max(1, |a|, |b|): behaves like relative error for O(1)
// magnitudes and absolute error near zero.
inline double scaled_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Central finite differences against reverse-mode gradients.
// `build` must construct the loss graph from the current parameter values.
// Returns the max scaled error over every element of every `wrt` tensor.
inline double max_grad_error(const std::function<uvdt::Tensor()>& build,
                             std::vector<uvdt::Tensor> wrt, double h = 1e-5) {
  for (auto& t : wrt) t.zero_grad();
  uvdt::Tensor loss = build();
  uvdt::backward(loss);

  auto eval = [&]() {
    uvdt::NoGradGuard ng;
    return static_cast<double>(build().item());
  };

  double worst = 0.0;
  for (auto& t : wrt) {
    const std::vector<uvdt::real> g_auto = t.grad();
    for (size_t i = 0; i < t.values().size(); ++i) {
      const uvdt::real orig = t.values()[i];
      t.values()[i] = orig + static_cast<uvdt::real>(h);
      const double fp = eval();
      t.values()[i] = orig - static_cast<uvdt::real>(h);
      const double fm = eval();
      t.values()[i] = orig;
      const double g_fd = (fp - fm) / (2.0 * h);
      worst = std::max(worst, scaled_err(static_cast<double>(g_auto[i]), g_fd));
    }
  }
  return worst;
}

inline uvdt::Tensor random_tensor(uvdt::Shape shape, uvdt::Rng& g, bool requires_grad = true,
                                  double scl = 1.0) {
  std::vector<uvdt::real> v(static_cast<size_t>(uvdt::shape_numel(shape)));
  for (auto& x : v) x = static_cast<uvdt::real>(uvdt::rand_normal(g) * scl);
  uvdt::Tensor t = uvdt::Tensor::from(std::move(shape), std::move(v));
  t.set_requires_grad(requires_grad);
  return t;
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

// Fresh scratch directory under the current working dir (the build tree).
inline std::string scratch_dir(const std::string& name) {
  namespace fs = std::filesystem;
  fs::path p = fs::current_path() / "scratch" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

}  // namespace testutil
