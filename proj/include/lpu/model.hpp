#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lpu/half.hpp"

namespace lpu {

enum class PosEncoding { Learned, Rotary };
enum class NormKind { LayerNorm, RmsNorm };
enum class Activation { Relu, Gelu, Silu };

struct ModelConfig {
  std::string name;
  int num_layers = 0;
  int d_model = 0;
  int num_heads = 1;
  int ffn_dim = 0;
  int vocab_size = 0;
  int max_seq = 2048;
  PosEncoding pos_encoding = PosEncoding::Learned;
  NormKind norm_kind = NormKind::LayerNorm;
  Activation activation = Activation::Relu;
  bool tie_embeddings = true;
  bool has_bias = true;
  int eos_token = -1;  // -1 disables end-of-sequence stopping
  double rope_theta = 10000.0;

  int head_dim() const { return d_model / num_heads; }
  /// Throws InvalidConfig.
  void validate() const;
};

enum class TensorRole {
  Embed, Pos, Q, K, V, O, Fc1, Fc2,
  QBias, KBias, VBias, OBias, Fc1Bias, Fc2Bias,
  Norm1, Norm2, NormFinal, LmHead,
};

const char* role_name(TensorRole r);

/// Logical (unpartitioned) tensor. Matrices are stored row-major as
/// [rows = input dim][cols = output dim] so that y = x * W.
struct Tensor {
  TensorRole role;
  int layer = -1;  // -1 for model-level tensors
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<Half> data;

  std::int64_t numel() const { return rows * cols; }
  Half at(std::int64_t r, std::int64_t c) const { return data[static_cast<std::size_t>(r * cols + c)]; }
};

/// Shape of one tensor as implied by the config; payload-free.
struct TensorShape {
  TensorRole role;
  int layer;
  std::int64_t rows;
  std::int64_t cols;
};

std::vector<TensorShape> tensor_shapes(const ModelConfig& cfg);

class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(ModelConfig cfg, std::vector<Tensor> tensors);

  const ModelConfig& config() const { return config_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  /// Throws UnmappedTensor if absent.
  const Tensor& get(TensorRole role, int layer = -1) const;
  const Tensor* find(TensorRole role, int layer = -1) const;
  /// The matrix streamed by the LM head ([d][vocab]); the transposed embedding when tied.
  Tensor lm_head_matrix() const;

 private:
  ModelConfig config_;
  std::vector<Tensor> tensors_;
};

struct KvCacheSpec {
  int num_layers;
  int max_seq;
  int d_model;
  std::int64_t bytes() const { return static_cast<std::int64_t>(num_layers) * 2 * max_seq * d_model * 2; }
};

std::int64_t param_count(const ModelConfig& cfg);
/// FP16 footprint: 2 bytes per parameter.
std::int64_t model_bytes(const ModelConfig& cfg);
std::int64_t kv_bytes(const ModelConfig& cfg, std::int64_t seq_len);
KvCacheSpec kv_cache_spec(const ModelConfig& cfg);

/// Deterministic synthetic FP16 parameters, |x| <= 0.25.
ParamStore synth_params(const ModelConfig& cfg, std::uint64_t seed);

ModelConfig model_config_from_json(const std::string& text);
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig load_model_config(const std::filesystem::path& file);
ModelConfig model_preset(const std::string& name);
std::vector<std::string> model_preset_names();

}  // namespace lpu
