#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "docgeo/nn/tensor.hpp"
#include "json.hpp"

namespace docgeo::nn {

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

std::size_t parameter_count(const ParamList& params);
void zero_grad(const ParamList& params);
/// Scales gradients so their global L2 norm is at most max_norm; returns the
/// norm before scaling.
double clip_grad_norm(const ParamList& params, double max_norm);

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // decoupled; 0 gives plain Adam
};

class AdamW {
 public:
  AdamW(ParamList params, AdamWOptions opt);
  void step();
  void set_lr(double lr) { opt_.lr = lr; }
  double lr() const { return opt_.lr; }
  std::int64_t steps() const { return t_; }
  const ParamList& params() const { return params_; }

  // State access for checkpoints.
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  ParamList params_;
  AdamWOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

/// Binary checkpoint: "DGCK", u32 version, u64 header length, JSON header
/// (meta, parameter names/shapes, optimizer step), then little-endian
/// float64 parameter data followed by optional Adam moments.
void save_checkpoint(const std::filesystem::path& path, const ParamList& params,
                     AdamW* optimizer, const nlohmann::json& meta);

/// Loads values into `params` (names and shapes must match) and the
/// optimizer state when both the file and `optimizer` carry it. Returns meta.
nlohmann::json load_checkpoint(const std::filesystem::path& path, const ParamList& params,
                               AdamW* optimizer = nullptr);

/// Header only.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

}  // namespace docgeo::nn
