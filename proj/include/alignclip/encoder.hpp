#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "alignclip/geometry.hpp"
#include "alignclip/objectives.hpp"

namespace alignclip {

enum class Sharing { shared, unshared };

std::string to_string(Sharing s);
Sharing sharing_from_string(const std::string& s);

// One transformer trunk serves both modalities. `sharing` selects whether the
// trunk and output projection are a single set of tensors fed by both input
// stems, or duplicated per modality.
struct SharedEncoderConfig {
  size_t layers = 2;
  size_t heads = 4;
  size_t model_dim = 64;
  size_t proj_dim = 32;
  size_t image_size = 16;
  size_t patch_size = 4;
  size_t vocab_size = 64;
  size_t max_seq_len = 16;
  Sharing sharing = Sharing::shared;

  void validate() const;
  size_t patches_per_side() const { return image_size / patch_size; }
  size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  size_t image_tokens() const { return num_patches() + 1; }  // leading [CLS] slot
  size_t mlp_dim() const { return 4 * model_dim; }
  size_t head_dim() const { return model_dim / heads; }

  static SharedEncoderConfig toy();
  static SharedEncoderConfig paper_scale();

  bool operator==(const SharedEncoderConfig&) const = default;
};

enum class Owner : uint8_t { shared = 0, image = 1, text = 2 };

struct NamedTensor {
  std::string name;
  Owner owner = Owner::shared;
  bool weight_decay = false;
  std::vector<size_t> shape;
  std::vector<double> v;

  size_t size() const { return v.size(); }
};

// Tensor indices for one trunk instance; in shared mode the image and text
// layouts hold identical indices, so both modality paths read and accumulate
// into the same storage.
struct TrunkLayout {
  struct Layer {
    int ln1_g, ln1_b;
    int wq, bq, wk, bk, wv, bv, wo, bo;
    int ln2_g, ln2_b;
    int w1, b1, w2, b2;
  };
  std::vector<Layer> layers;
  int lnf_g = -1;
  int lnf_b = -1;
};

struct SharedEncoderParams {
  SharedEncoderConfig cfg;
  std::vector<NamedTensor> tensors;

  // input stems
  int patch_w = -1, patch_b = -1, cls = -1, img_pos = -1;
  int tok_embed = -1, txt_pos = -1;
  // trunks + projections (identical indices in shared mode)
  TrunkLayout image_trunk, text_trunk;
  int proj_image = -1, proj_text = -1;
  int temp_idx = -1;

  size_t parameter_count() const;
  double temperature_log_scale() const { return tensors[temp_idx].v[0]; }
  void set_temperature_log_scale(double t) { tensors[temp_idx].v[0] = t; }
  Temperature temperature() const { return Temperature{temperature_log_scale(), 100.0}; }

  int find(const std::string& name) const;  // -1 if absent
};

// Scalar counts for one trunk / one projection at a given config; the
// parameter-count gap between unshared and shared is exactly their sum.
size_t trunk_parameter_count(const SharedEncoderConfig& cfg);
size_t projection_parameter_count(const SharedEncoderConfig& cfg);

// Weights drawn N(0, 0.02) from the seed in a fixed tensor order; biases
// zero, layernorm gains one. Identical seeds give bit-identical tensors.
SharedEncoderParams init_params(const SharedEncoderConfig& cfg, uint64_t seed);

// Grayscale images in [0, 1], row-major [count, image_size, image_size].
struct ImageBatch {
  size_t count = 0;
  size_t image_size = 0;
  std::vector<double> pixels;

  const double* image(size_t i) const { return pixels.data() + i * image_size * image_size; }
  double* image(size_t i) { return pixels.data() + i * image_size * image_size; }
};

// Token index rows plus a validity mask; every row needs at least one valid
// position. Invalid positions never influence valid outputs.
struct TokenBatch {
  size_t count = 0;
  size_t seq_len = 0;
  std::vector<uint32_t> tokens;
  std::vector<uint8_t> valid;

  const uint32_t* row(size_t i) const { return tokens.data() + i * seq_len; }
  const uint8_t* mask(size_t i) const { return valid.data() + i * seq_len; }
};

EmbeddingBatch encode_image(const ImageBatch& images, const SharedEncoderParams& params);
EmbeddingBatch encode_text(const TokenBatch& tokens, const SharedEncoderParams& params);

// Gradient arrays parallel to params.tensors; shared tensors accumulate
// contributions from both modality paths.
struct ParamGrads {
  std::vector<std::vector<double>> g;

  static ParamGrads zeros_like(const SharedEncoderParams& p);
  void zero();
};

struct EncoderGradients {
  ParamGrads grads;
  LossBreakdown breakdown;
};

// Opaque reusable activation storage; passing the same workspace across steps
// avoids reallocation. A default-constructed workspace is always valid.
struct EncoderWorkspace;
EncoderWorkspace* workspace_create();
void workspace_destroy(EncoderWorkspace* ws);

struct WorkspaceHandle {
  WorkspaceHandle() : ws(workspace_create()) {}
  ~WorkspaceHandle() { workspace_destroy(ws); }
  WorkspaceHandle(const WorkspaceHandle&) = delete;
  WorkspaceHandle& operator=(const WorkspaceHandle&) = delete;
  EncoderWorkspace* ws;
};

// Full forward + backward for one paired batch: encodes both modalities,
// applies the combined objective, and backpropagates into every parameter
// tensor (including the temperature).
EncoderGradients encoder_gradients(const ImageBatch& images, const TokenBatch& tokens,
                                   const Matrix& semantics, const SharedEncoderParams& params,
                                   const LossConfig& loss_cfg, EncoderWorkspace* ws = nullptr,
                                   size_t threads = 1);

}  // namespace alignclip
