#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "advmtl/autodiff.hpp"

namespace testing_support {

inline advmtl::Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng,
                                    double scale = 1.0) {
  advmtl::Tensor t(std::move(shape));
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& v : t.values()) v = nd(rng);
  return t;
}

// Gradient that `op` sends back to its input for a given upstream gradient:
// loss = sum(op(x) * upstream).
template <class Op>
advmtl::Tensor input_gradient(const advmtl::Tensor& x, const advmtl::Tensor& upstream, Op op) {
  advmtl::Parameter p("x", x);
  advmtl::Tape tape;
  auto y = op(tape.parameter(p));
  auto loss = advmtl::sum(advmtl::mul(y, tape.constant(upstream)));
  tape.backward(loss);
  return p.grad;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("advmtl_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing_support
