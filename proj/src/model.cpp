#include "lpu/model.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "lpu/arch.hpp"
#include "lpu/error.hpp"

namespace lpu {

const char* role_name(TensorRole r) {
  switch (r) {
    case TensorRole::Embed: return "embed";
    case TensorRole::Pos: return "pos";
    case TensorRole::Q: return "q";
    case TensorRole::K: return "k";
    case TensorRole::V: return "v";
    case TensorRole::O: return "o";
    case TensorRole::Fc1: return "fc1";
    case TensorRole::Fc2: return "fc2";
    case TensorRole::QBias: return "q_bias";
    case TensorRole::KBias: return "k_bias";
    case TensorRole::VBias: return "v_bias";
    case TensorRole::OBias: return "o_bias";
    case TensorRole::Fc1Bias: return "fc1_bias";
    case TensorRole::Fc2Bias: return "fc2_bias";
    case TensorRole::Norm1: return "norm1";
    case TensorRole::Norm2: return "norm2";
    case TensorRole::NormFinal: return "norm_final";
    case TensorRole::LmHead: return "lmhead";
  }
  return "?";
}

void ModelConfig::validate() const {
  auto fail = [&](const std::string& why) { throw Error(ErrorKind::InvalidConfig, "model '" + name + "': " + why); };
  if (num_layers < 0) fail("num_layers must be >= 0");
  if (d_model <= 0 || num_heads <= 0 || vocab_size <= 0 || max_seq <= 0) fail("dimensions must be positive");
  if (num_layers > 0 && ffn_dim <= 0) fail("ffn_dim must be positive");
  if (d_model % num_heads != 0) fail("d_model must be divisible by num_heads");
  if (pos_encoding == PosEncoding::Rotary && head_dim() % 2 != 0) fail("rotary embedding needs an even head_dim");
  if (d_model > 65535 || vocab_size > 65535 || ffn_dim > 65535 || max_seq > 65535)
    fail("dimension exceeds the 16-bit instruction size fields");
}

std::vector<TensorShape> tensor_shapes(const ModelConfig& cfg) {
  const std::int64_t d = cfg.d_model;
  const std::int64_t f = cfg.ffn_dim;
  const std::int64_t norm_rows = cfg.norm_kind == NormKind::LayerNorm ? 2 : 1;
  std::vector<TensorShape> out;
  out.push_back({TensorRole::Embed, -1, cfg.vocab_size, d});
  if (cfg.pos_encoding == PosEncoding::Learned) out.push_back({TensorRole::Pos, -1, cfg.max_seq, d});
  for (int l = 0; l < cfg.num_layers; ++l) {
    out.push_back({TensorRole::Norm1, l, norm_rows, d});
    out.push_back({TensorRole::Q, l, d, d});
    out.push_back({TensorRole::K, l, d, d});
    out.push_back({TensorRole::V, l, d, d});
    out.push_back({TensorRole::O, l, d, d});
    out.push_back({TensorRole::Norm2, l, norm_rows, d});
    out.push_back({TensorRole::Fc1, l, d, f});
    out.push_back({TensorRole::Fc2, l, f, d});
    if (cfg.has_bias) {
      out.push_back({TensorRole::QBias, l, 1, d});
      out.push_back({TensorRole::KBias, l, 1, d});
      out.push_back({TensorRole::VBias, l, 1, d});
      out.push_back({TensorRole::OBias, l, 1, d});
      out.push_back({TensorRole::Fc1Bias, l, 1, f});
      out.push_back({TensorRole::Fc2Bias, l, 1, d});
    }
  }
  out.push_back({TensorRole::NormFinal, -1, norm_rows, d});
  if (!cfg.tie_embeddings) out.push_back({TensorRole::LmHead, -1, d, cfg.vocab_size});
  return out;
}

std::int64_t param_count(const ModelConfig& cfg) {
  std::int64_t n = 0;
  for (const auto& s : tensor_shapes(cfg)) n += s.rows * s.cols;
  return n;
}

std::int64_t model_bytes(const ModelConfig& cfg) { return 2 * param_count(cfg); }

std::int64_t kv_bytes(const ModelConfig& cfg, std::int64_t seq_len) {
  return static_cast<std::int64_t>(cfg.num_layers) * 2 * seq_len * cfg.d_model * 2;
}

KvCacheSpec kv_cache_spec(const ModelConfig& cfg) { return {cfg.num_layers, cfg.max_seq, cfg.d_model}; }

ParamStore::ParamStore(ModelConfig cfg, std::vector<Tensor> tensors)
    : config_(std::move(cfg)), tensors_(std::move(tensors)) {}

const Tensor* ParamStore::find(TensorRole role, int layer) const {
  for (const auto& t : tensors_)
    if (t.role == role && t.layer == layer) return &t;
  return nullptr;
}

const Tensor& ParamStore::get(TensorRole role, int layer) const {
  if (const Tensor* t = find(role, layer)) return *t;
  throw Error(ErrorKind::UnmappedTensor, std::string("no tensor ") + role_name(role) + " layer " + std::to_string(layer));
}

Tensor ParamStore::lm_head_matrix() const {
  if (!config_.tie_embeddings) return get(TensorRole::LmHead);
  const Tensor& e = get(TensorRole::Embed);
  Tensor t{TensorRole::LmHead, -1, e.cols, e.rows, {}};
  t.data.resize(static_cast<std::size_t>(t.numel()));
  for (std::int64_t r = 0; r < e.rows; ++r)
    for (std::int64_t c = 0; c < e.cols; ++c) t.data[static_cast<std::size_t>(c * t.cols + r)] = e.at(r, c);
  return t;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

ParamStore synth_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::vector<Tensor> tensors;
  for (const auto& s : tensor_shapes(cfg)) {
    Tensor t{s.role, s.layer, s.rows, s.cols, {}};
    t.data.resize(static_cast<std::size_t>(t.numel()));
    std::uint64_t state = seed * 0x100000001B3ull ^ (static_cast<std::uint64_t>(s.role) << 40) ^
                          static_cast<std::uint64_t>(s.layer + 1);
    splitmix64(state);
    const bool is_gain = s.role == TensorRole::Norm1 || s.role == TensorRole::Norm2 || s.role == TensorRole::NormFinal;
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const double u = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;  // [0,1)
      double x = (u - 0.5) * 0.5;                                               // [-0.25, 0.25)
      // norm gains (first row) in [0, 0.25] keep the scale positive
      if (is_gain && i < s.cols) x = u * 0.25;
      t.data[static_cast<std::size_t>(i)] = Half(x);
    }
    tensors.push_back(std::move(t));
  }
  return ParamStore(cfg, std::move(tensors));
}

// --- JSON ------------------------------------------------------------------

using nlohmann::json;

namespace {

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> table, const char* what) {
  for (const auto& [k, v] : table)
    if (s == k) return v;
  throw Error(ErrorKind::InvalidConfig, std::string("unknown ") + what + " '" + s + "'");
}

const char* pos_name(PosEncoding p) { return p == PosEncoding::Learned ? "learned" : "rotary"; }
const char* norm_name(NormKind n) { return n == NormKind::LayerNorm ? "layernorm" : "rmsnorm"; }
const char* act_name(Activation a) {
  switch (a) {
    case Activation::Relu: return "relu";
    case Activation::Gelu: return "gelu";
    case Activation::Silu: return "silu";
  }
  return "?";
}

}  // namespace

ModelConfig model_config_from_json(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    c.name = j.value("name", std::string("custom"));
    c.num_layers = j.at("num_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq = j.value("max_seq", 2048);
    c.pos_encoding = parse_enum<PosEncoding>(j.value("pos_encoding", std::string("learned")),
                                             {{"learned", PosEncoding::Learned}, {"rotary", PosEncoding::Rotary}},
                                             "pos_encoding");
    c.norm_kind = parse_enum<NormKind>(j.value("norm_kind", std::string("layernorm")),
                                       {{"layernorm", NormKind::LayerNorm}, {"rmsnorm", NormKind::RmsNorm}}, "norm_kind");
    c.activation = parse_enum<Activation>(
        j.value("activation", std::string("relu")),
        {{"relu", Activation::Relu}, {"gelu", Activation::Gelu}, {"silu", Activation::Silu}}, "activation");
    c.tie_embeddings = j.value("tie_embeddings", true);
    c.has_bias = j.value("has_bias", true);
    c.eos_token = j.value("eos_token", -1);
    c.rope_theta = j.value("rope_theta", 10000.0);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string model_config_to_json(const ModelConfig& c) {
  json j = {{"name", c.name},
            {"num_layers", c.num_layers},
            {"d_model", c.d_model},
            {"num_heads", c.num_heads},
            {"ffn_dim", c.ffn_dim},
            {"vocab_size", c.vocab_size},
            {"max_seq", c.max_seq},
            {"pos_encoding", pos_name(c.pos_encoding)},
            {"norm_kind", norm_name(c.norm_kind)},
            {"activation", act_name(c.activation)},
            {"tie_embeddings", c.tie_embeddings},
            {"has_bias", c.has_bias},
            {"eos_token", c.eos_token},
            {"rope_theta", c.rope_theta}};
  return j.dump(2);
}

ModelConfig load_model_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorKind::UnknownPreset, "cannot open " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return model_config_from_json(ss.str());
}

ModelConfig model_preset(const std::string& name) {
  const auto file = preset_dir() / "model" / (name + ".json");
  if (!std::filesystem::exists(file)) throw Error(ErrorKind::UnknownPreset, "no model preset '" + name + "'");
  return load_model_config(file);
}

std::vector<std::string> model_preset_names() {
  std::vector<std::string> out;
  const auto dir = preset_dir() / "model";
  if (std::filesystem::is_directory(dir))
    for (const auto& e : std::filesystem::directory_iterator(dir))
      if (e.path().extension() == ".json") out.push_back(e.path().stem().string());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace lpu
