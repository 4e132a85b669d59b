#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

#include "neuromhe/types.hpp"
#include "neuromhe/weights.hpp"

namespace neuromhe {

// Two hidden ReLU layers: out = Ao relu(A2 relu(A1 y + b1) + b2) + bo.
struct MlpParams {
  Matrix A1;
  Vector b1;
  Matrix A2;
  Vector b2;
  Matrix Ao;
  Vector bo;

  static MlpParams zeros(int input, int hidden1, int hidden2, int output);
  // Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer; the output layer
  // is additionally multiplied by output_scale.
  static MlpParams init_uniform(int input, int hidden1, int hidden2, int output, std::uint64_t seed,
                                double output_scale = 1.0);

  int input_dim() const { return static_cast<int>(A1.cols()); }
  int hidden1() const { return static_cast<int>(A1.rows()); }
  int hidden2() const { return static_cast<int>(A2.rows()); }
  int output_dim() const { return static_cast<int>(Ao.rows()); }
  int size() const;

  // Concatenation of A1, b1, A2, b2, Ao, bo (matrices column-major).
  Vector flatten() const;
  void unflatten(const Vector& v);
  // Throws ConfigError on inconsistent shapes or non-finite entries.
  void validate() const;
};

// Optional per-channel input standardization (y - mean) / scale.
struct Standardizer {
  Vector mean;
  Vector scale;

  static Standardizer fit(const VectorSeq& samples, double min_scale = 1e-6);
  Vector apply(const Vector& y) const;
};

struct MlpCache {
  Vector input;
  Vector z1, a1, z2, a2;
  Vector output;
};

Vector mlp_forward(const MlpParams& params, const Vector& y, MlpCache* cache = nullptr);
// Reverse-mode gradient of upstream^T out with respect to every parameter
// block, evaluated at the cached forward pass. relu'(0) is taken as 0.
MlpParams mlp_backward(const MlpParams& params, const MlpCache& cache, const Vector& upstream);

// theta from raw network output Theta: squared entries plus the floor for the
// diagonals, sigmoids for the two forgetting factors. The sigmoid is clamped
// to the largest double below 1 so the factors stay inside (0, 1). The
// trainable measurement weights use r_floor instead (negative: same as floor).
WeightSpec map_to_weights(const Vector& raw, const WeightLayout& layout, double floor = 1e-4, double r_fixed = 100.0,
                          double r_floor = -1.0);
// Diagonal of d theta / d Theta (the map is elementwise).
Vector weights_jacobian(const Vector& raw, const WeightLayout& layout);
// A raw output whose image under map_to_weights is `weights` (nonnegative roots, logits).
Vector weights_to_raw(const WeightSpec& weights, double floor = 1e-4, double r_floor = -1.0);

struct Checkpoint {
  MlpParams params;
  std::uint64_t seed = 0;
  std::optional<Standardizer> standardizer;
  // A fixed-weight policy stores its raw vector in params.bo; the other
  // blocks are zero.
  bool fixed = false;
  double floor = 1e-4;
  double r_fixed = 100.0;
  double r_floor = -1.0;
};

// Plain-text layout, one token group per line:
//   neuromhe-mlp 2
//   policy neural|fixed
//   map <floor> <r_fixed> <r_floor>
//   seed <u64>
//   dims <input> <hidden1> <hidden2> <output>
//   standardizer 0|1   (followed by "mean ..." and "scale ..." lines when 1)
//   <name> <rows> <cols> then the entries row by row, for A1 b1 A2 b2 Ao bo
// Numbers are written with 17 significant digits so reloading is exact.
// Version 1 files (no policy and map lines) load with the defaults.
void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& is);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace neuromhe
