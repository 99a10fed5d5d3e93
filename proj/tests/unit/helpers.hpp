// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the unit tests: random tensors, a central-difference
// gradient checker and scratch directories.
#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "bdkit/core/seed.hpp"
#include "bdkit/nn/autograd.hpp"
#include "bdkit/nn/tensor.hpp"

namespace bdkit::testing {

inline nn::Tensor random_tensor(const nn::Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  nn::Tensor t(shape);
  for (auto& v : t.storage()) v = d(rng);
  return t;
}

inline double max_abs_diff(const nn::Tensor& a, const nn::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

using ScalarFn = std::function<nn::Var(const std::vector<nn::Var>&)>;

/// Norm-wise relative error ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||)
/// over all inputs, with central differences of step h. Both gradients tiny -> 0.
inline double gradient_relative_error(const ScalarFn& f, const std::vector<nn::Tensor>& inputs, double h = 1e-6) {
  std::vector<nn::Var> leaves;
  for (const auto& t : inputs) leaves.emplace_back(t, true);
  nn::backward(f(leaves));

  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const nn::Tensor analytic = leaves[k].grad();
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<nn::Var> probe;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          nn::Tensor t = inputs[j];
          if (j == k) t[i] += delta;
          probe.emplace_back(std::move(t), false);
        }
        return f(probe).value().item();
      };
      const double numeric = (eval(h) - eval(-h)) / (2.0 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
  }
  const double scale = std::sqrt(std::max(a2, n2));
  return scale < 1e-12 ? 0.0 : std::sqrt(diff2) / scale;
}

/// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = tag;
    if (info) name += std::string("-") + info->test_suite_name() + "-" + info->name();
    for (auto& c : name) {
      if (c == '/') c = '_';
    }
    path_ = std::filesystem::temp_directory_path() / ("bdkit-test-" + name);
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace bdkit::testing
