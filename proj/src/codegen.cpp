#include "lpu/codegen.hpp"

#include "lpu/error.hpp"

namespace lpu {

namespace {

Instruction make(Opcode op, std::uint16_t dst = kNoReg, std::uint16_t src0 = kNoReg, std::uint16_t src1 = kNoReg,
                 std::uint64_t imm = 0) {
  Instruction in;
  in.op = op;
  in.dst = dst;
  in.src0 = src0;
  in.src1 = src1;
  in.imm = imm & kImmMask;
  return in;
}

Instruction branch(std::uint16_t reg, BrCond cond, std::uint16_t cmp_reg, std::uint32_t value, std::uint32_t target) {
  BrImm b;
  b.target = target;
  b.cond = cond;
  b.use_imm = cmp_reg == kNoReg;
  b.value = value;
  return make(Opcode::Br, kNoReg, reg, cmp_reg, b.pack());
}

void patch_target(Program& p, std::uint32_t pc, std::uint32_t target) {
  auto b = BrImm::unpack(p.code[pc].imm);
  b.target = target;
  p.code[pc].imm = b.pack();
}

Opcode activation_op(Activation a) {
  switch (a) {
    case Activation::Relu: return Opcode::Relu;
    case Activation::Gelu: return Opcode::Gelu;
    case Activation::Silu: return Opcode::Silu;
  }
  return Opcode::Relu;
}

}  // namespace

BlockLibrary::BlockLibrary(const ModelConfig& model, const MemoryMap& map, const Partition& part)
    : model_(model), map_(map), part_(part) {
  const auto& dev = map.device_config();
  prog_.info.device_id = map.device();
  prog_.info.n_devices = part.n_devices;
  prog_.info.num_layers = model.num_layers;
  prog_.info.d_model = model.d_model;
  prog_.info.head_dim = model.head_dim();
  prog_.info.vocab_size = model.vocab_size;
  prog_.info.vector_dim = dev.vector_dim;
  prog_.info.mac_trees = dev.mac_trees;
  prog_.info.rope_theta = model.rope_theta;
  prog_.regions = map.regions();
  const std::int64_t local_attn = static_cast<std::int64_t>(map.slice().heads()) * model.head_dim();
  if (local_attn > kMaxVmmOffset)
    throw Error(ErrorKind::InvalidConfig, "per-device attention width " + std::to_string(local_attn) +
                                              " exceeds the VMM offset field");
}

const std::vector<std::string>& BlockLibrary::names() {
  static const std::vector<std::string> n = {"input_load", "token_embed", "decoder", "lmhead",
                                             "output_store", "sync", "hlt"};
  return n;
}

std::uint16_t BlockLibrary::new_vreg(std::uint32_t len) {
  if (next_vreg_ >= kScalarBit) throw Error(ErrorKind::RegisterPressureExceeded, "virtual register space exhausted");
  prog_.vreg_len.push_back(len);
  return vreg(next_vreg_++);
}

std::uint32_t BlockLibrary::emit(Instruction in) {
  prog_.code.push_back(in);
  return pc() - 1;
}

std::vector<Instruction> BlockLibrary::expand(const std::string& name, const BlockArgs& args) {
  const std::uint32_t begin = pc();
  if (name == "input_load") {
    input_load();
  } else if (name == "token_embed") {
    token_embed();
  } else if (name == "decoder") {
    decoder();
  } else if (name == "lmhead") {
    lmhead();
  } else if (name == "output_store") {
    output_store();
  } else if (name == "sync") {
    last_sync_ = sync(args.reg, args.len, args.mode);
  } else if (name == "hlt") {
    hlt();
  } else {
    throw Error(ErrorKind::UnknownBlock, "no block named '" + name + "'");
  }
  return {prog_.code.begin() + begin, prog_.code.end()};
}

void BlockLibrary::stream_weights(const Region& r, bool per_layer) {
  for (std::int64_t i = 0; i < r.grid.count(); ++i)
    emit(make(Opcode::RdWeight, kNoReg, static_cast<std::uint16_t>(r.id), per_layer ? ctl::LAYER : kNoReg,
              static_cast<std::uint64_t>(i)));
}

void BlockLibrary::read_vec(const Region& r, std::uint16_t index_reg, std::uint32_t len, std::uint32_t offset) {
  emit(make(Opcode::RdVec, kNoReg, static_cast<std::uint16_t>(r.id), index_reg, VecImm{len, offset}.pack()));
}

std::uint16_t BlockLibrary::norm(TensorRole role, std::uint16_t x) {
  const Region& r = map_.find(role);
  const auto d = static_cast<std::uint32_t>(model_.d_model);
  read_vec(r, r.per_layer ? ctl::LAYER : kNoReg, static_cast<std::uint32_t>(r.rows * r.cols));
  const std::uint16_t out = new_vreg(d);
  const Opcode op = model_.norm_kind == NormKind::LayerNorm ? Opcode::LayerNorm : Opcode::RmsNorm;
  emit(make(op, out, x, kNoReg, OpImm{d, 0}.pack()));
  return out;
}

std::uint16_t BlockLibrary::linear(TensorRole w, TensorRole bias, std::uint16_t x, std::uint32_t rows,
                                   std::uint32_t cols) {
  const Region& r = map_.find(w);
  stream_weights(r, r.per_layer);
  const Region* b = (model_.has_bias && w != TensorRole::LmHead) ? map_.try_find(bias) : nullptr;
  if (b != nullptr) read_vec(*b, ctl::LAYER, cols);
  const std::uint16_t out = new_vreg(cols);
  VmmImm m;
  m.rows = rows;
  m.cols = cols;
  emit(make(b != nullptr ? Opcode::VmmAcc : Opcode::Vmm, out, x, kNoReg, m.pack()));
  return out;
}

void BlockLibrary::input_load() {
  emit(make(Opcode::RdVec, ctl::TOKEN, static_cast<std::uint16_t>(map_.io_region(false).id), ctl::POS,
            VecImm{1, 0}.pack()));
}

void BlockLibrary::token_embed() {
  const auto d = static_cast<std::uint32_t>(model_.d_model);
  read_vec(map_.find(TensorRole::Embed), ctl::TOKEN, d);
  const bool learned = model_.pos_encoding == PosEncoding::Learned;
  if (learned) read_vec(map_.find(TensorRole::Pos), ctl::POS, d);
  if (x_ == kNoReg) x_ = new_vreg(d);
  emit(make(Opcode::Embed, x_, kNoReg, kNoReg, OpImm{d, learned ? 1u : 0u}.pack()));
}

void BlockLibrary::decoder() {
  const auto d = static_cast<std::uint32_t>(model_.d_model);
  const auto hd = static_cast<std::uint32_t>(model_.head_dim());
  const int heads = map_.slice().heads();
  const auto la = static_cast<std::uint32_t>(heads) * hd;
  const auto ffn = static_cast<std::uint32_t>(map_.slice().ffn());
  const auto seq = static_cast<std::uint32_t>(model_.max_seq);
  if (x_ == kNoReg) x_ = new_vreg(d);

  const std::uint16_t h = norm(TensorRole::Norm1, x_);
  const std::uint16_t q = linear(TensorRole::Q, TensorRole::QBias, h, d, la);
  const std::uint16_t k = linear(TensorRole::K, TensorRole::KBias, h, d, la);
  const std::uint16_t v = linear(TensorRole::V, TensorRole::VBias, h, d, la);
  if (model_.pos_encoding == PosEncoding::Rotary) {
    emit(make(Opcode::Rope, q, q, kNoReg, OpImm{la, hd}.pack()));
    emit(make(Opcode::Rope, k, k, kNoReg, OpImm{la, hd}.pack()));
  }
  for (int i = 0; i < heads; ++i) {
    const auto off = static_cast<std::uint64_t>(i) * hd;
    emit(make(Opcode::WrKv, k, static_cast<std::uint16_t>(map_.key_region(i).id), ctl::LAYER, off));
    emit(make(Opcode::WrKv, v, static_cast<std::uint16_t>(map_.value_region(i).id), ctl::LAYER, off));
  }
  const std::uint16_t ctx = new_vreg(la);
  for (int i = 0; i < heads; ++i) {
    const auto off = static_cast<std::uint32_t>(i) * hd;
    emit(make(Opcode::RdKv, kNoReg, static_cast<std::uint16_t>(map_.key_region(i).id), ctl::LAYER));
    const std::uint16_t s = new_vreg(seq);
    VmmImm score;
    score.rows = hd;
    score.cols = 0;
    score.offset = off;
    score.in_offset = true;
    emit(make(Opcode::Vmm, s, q, kNoReg, score.pack()));
    const std::uint16_t p = new_vreg(seq);
    emit(make(Opcode::Softmax, p, s, kNoReg, OpImm{0, hd}.pack()));
    emit(make(Opcode::RdKv, kNoReg, static_cast<std::uint16_t>(map_.value_region(i).id), ctl::LAYER));
    VmmImm mix;
    mix.rows = 0;
    mix.cols = hd;
    mix.offset = off;
    mix.out_offset = true;
    emit(make(Opcode::Vmm, ctx, p, kNoReg, mix.pack()));
  }
  std::uint16_t a = linear(TensorRole::O, TensorRole::OBias, ctx, la, d);
  a = sync(a, d, NetMode::Reduce);
  emit(make(Opcode::Add, x_, x_, a, OpImm{d, 0}.pack()));

  const std::uint16_t h2 = norm(TensorRole::Norm2, x_);
  const std::uint16_t f = linear(TensorRole::Fc1, TensorRole::Fc1Bias, h2, d, ffn);
  emit(make(activation_op(model_.activation), f, f, kNoReg, OpImm{ffn, 0}.pack()));
  std::uint16_t g = linear(TensorRole::Fc2, TensorRole::Fc2Bias, f, ffn, d);
  g = sync(g, d, NetMode::Reduce);
  emit(make(Opcode::Add, x_, x_, g, OpImm{d, 0}.pack()));
}

void BlockLibrary::lmhead() {
  if (x_ == kNoReg) x_ = new_vreg(static_cast<std::uint32_t>(model_.d_model));
  const auto d = static_cast<std::uint32_t>(model_.d_model);
  const auto vocab_local = static_cast<std::uint32_t>(map_.slice().vocab());
  const std::uint16_t hf = norm(TensorRole::NormFinal, x_);
  std::uint16_t logits = linear(TensorRole::LmHead, TensorRole::LmHead, hf, d, vocab_local);
  logits = sync(logits, vocab_local, NetMode::Gather);
  const auto eos = static_cast<std::uint32_t>(model_.eos_token + 1);
  emit(make(Opcode::Sample, ctl::TOKEN, logits, ctl::EOS, OpImm{static_cast<std::uint32_t>(model_.vocab_size), eos}.pack()));
}

void BlockLibrary::output_store() {
  emit(make(Opcode::WrVec, ctl::TOKEN, static_cast<std::uint16_t>(map_.io_region(true).id), ctl::COUNT,
            VecImm{1, 0}.pack()));
}

std::uint16_t BlockLibrary::sync(std::uint16_t reg, std::uint32_t len, NetMode mode) {
  if (part_.n_devices == 1) return reg;
  const auto imm = OpImm{len, static_cast<std::uint32_t>(mode)}.pack();
  emit(make(Opcode::TxPart, kNoReg, reg, kNoReg, imm));
  const std::uint32_t out_len = mode == NetMode::Gather ? len * static_cast<std::uint32_t>(part_.n_devices) : len;
  const std::uint16_t out = new_vreg(out_len);
  emit(make(Opcode::RxPart, out, reg, kNoReg, imm));
  return out;
}

void BlockLibrary::hlt() { emit(make(Opcode::Hlt)); }

// -----------------------------------------------------------------------------

namespace {

void layer_loop(BlockLibrary& lib, int num_layers) {
  if (num_layers == 0) return;
  lib.emit(make(Opcode::Movs, ctl::LAYER, kNoReg, kNoReg, 0));
  const std::uint32_t top = lib.pc();
  lib.expand("decoder");
  lib.emit(make(Opcode::Addi, ctl::LAYER, ctl::LAYER, kNoReg, 1));
  lib.emit(branch(ctl::LAYER, BrCond::Lt, kNoReg, static_cast<std::uint32_t>(num_layers), top));
}

}  // namespace

Program generate_program(const ModelConfig& model, const MemoryMap& map, const Partition& part,
                         const ClusterConfig& cluster) {
  if (partition_ring_size(cluster.partition) != part.n_devices)
    throw Error(ErrorKind::IllegalPartition, std::string("partition ") + partition_name(cluster.partition) +
                                                 " does not match " + std::to_string(part.n_devices) +
                                                 "-way model split");
  BlockLibrary lib(model, map, part);
  Program& p = lib.program();
  const int L = model.num_layers;

  p.entries.emplace_back("summarize", 0);
  lib.emit(make(Opcode::Movs, ctl::POS, kNoReg, kNoReg, 0));
  lib.emit(make(Opcode::Movs, ctl::COUNT, kNoReg, kNoReg, 0));
  lib.emit(make(Opcode::Movs, ctl::EOS, kNoReg, kNoReg, 0));
  const std::uint32_t skip = lib.emit(branch(ctl::NSUM, BrCond::Eq, kNoReg, 0, 0));

  // summarization: every prompt token but the last updates the KV cache only
  const std::uint32_t sum_top = lib.pc();
  lib.expand("input_load");
  lib.expand("token_embed");
  layer_loop(lib, L);
  lib.emit(make(Opcode::Addi, ctl::POS, ctl::POS, kNoReg, 1));
  lib.emit(branch(ctl::POS, BrCond::Lt, ctl::NSUM, 0, sum_top));

  patch_target(p, skip, lib.pc());
  lib.expand("input_load");

  // generation
  lib.set_residual(kNoReg);
  const std::uint32_t gen_top = lib.pc();
  p.entries.emplace_back("generate", gen_top);
  lib.expand("token_embed");
  layer_loop(lib, L);
  lib.expand("lmhead");
  lib.expand("output_store");
  lib.emit(make(Opcode::Addi, ctl::COUNT, ctl::COUNT, kNoReg, 1));
  lib.emit(make(Opcode::Addi, ctl::POS, ctl::POS, kNoReg, 1));
  const std::uint32_t eos_br = lib.emit(branch(ctl::EOS, BrCond::Ne, kNoReg, 0, 0));
  lib.emit(branch(ctl::COUNT, BrCond::Lt, ctl::NOUT, 0, gen_top));
  patch_target(p, eos_br, lib.pc());
  p.entries.emplace_back("halt", lib.pc());
  lib.expand("hlt");
  return std::move(p);
}

std::vector<Instruction> expand_decoder_block(int layer, const ModelConfig& model, const MemoryMap& map,
                                              const Partition& part) {
  if (layer < 0 || layer >= model.num_layers)
    throw Error(ErrorKind::IndexOutOfRange, "layer " + std::to_string(layer) + " of " +
                                                std::to_string(model.num_layers));
  BlockLibrary lib(model, map, part);
  return lib.expand("decoder");
}

}  // namespace lpu
