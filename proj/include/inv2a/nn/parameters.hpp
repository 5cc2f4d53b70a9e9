#pragma once

#include "inv2a/nn/autograd.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace inv2a::nn {

// Ordered, named collection of trainable leaves.
class ParameterSet {
 public:
  void add(std::string name, Var param);
  std::vector<std::pair<std::string, Var>>& items() { return items_; }
  const std::vector<std::pair<std::string, Var>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t element_count() const;

  void set_requires_grad(bool on);
  void zero_grad();
  std::vector<Var> vars() const;

  // Snapshot of all values, used for freeze-contract checks.
  std::vector<Matrix> snapshot() const;
  bool bit_identical(const std::vector<Matrix>& snap) const;

  std::map<std::string, Matrix> to_map() const;
  void load_map(const std::map<std::string, Matrix>& tensors);

 private:
  std::vector<std::pair<std::string, Var>> items_;
};

// Binary tensor container: "INV2ATEN", u32 version, u32 count, then per
// tensor u32 name length, name bytes, u32 rows, u32 cols, row-major f64.
void write_tensors(const std::filesystem::path& path, const std::map<std::string, Matrix>& tensors);
std::map<std::string, Matrix> read_tensors(const std::filesystem::path& path);

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  double clip_norm = 1.0;  // <= 0 disables global-norm clipping
};

class AdamW {
 public:
  AdamW(std::vector<Var> params, AdamWConfig config);

  // Applies one update from the accumulated gradients, then clears them.
  void step();
  void zero_grad();
  const AdamWConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  long step_count() const { return t_; }

 private:
  std::vector<Var> params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  AdamWConfig config_;
  long t_ = 0;
};

}  // namespace inv2a::nn
