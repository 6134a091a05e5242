#pragma once

#include <string>
#include <vector>

#include "lpu/arch.hpp"
#include "lpu/isa.hpp"
#include "lpu/mapper.hpp"
#include "lpu/model.hpp"

namespace lpu {

/// Arguments for blocks that operate on a value produced elsewhere (sync).
struct BlockArgs {
  std::uint16_t reg = kNoReg;  // partial-result register for sync
  std::uint32_t len = 0;       // per-device element count
  NetMode mode = NetMode::Reduce;
};

/// The predefined instruction blocks the generator stitches together. Blocks
/// append to an internal program under construction and share its virtual
/// register namespace, so a residual register produced by token_embed is the
/// one decoder and lmhead read.
class BlockLibrary {
 public:
  BlockLibrary(const ModelConfig& model, const MemoryMap& map, const Partition& part);

  static const std::vector<std::string>& names();
  /// Appends the named block and returns the instructions it emitted.
  /// Throws UnknownBlock.
  std::vector<Instruction> expand(const std::string& name, const BlockArgs& args = {});
  /// Result register of the last sync (the block's dst).
  std::uint16_t last_sync_result() const { return last_sync_; }

  Program& program() { return prog_; }
  std::uint16_t new_vreg(std::uint32_t len);
  std::uint32_t emit(Instruction in);
  std::uint32_t pc() const { return static_cast<std::uint32_t>(prog_.code.size()); }
  /// Residual stream register of the current stage.
  std::uint16_t residual() const { return x_; }
  void set_residual(std::uint16_t r) { x_ = r; }

 private:
  void input_load();
  void token_embed();
  void decoder();
  void lmhead();
  void output_store();
  std::uint16_t sync(std::uint16_t reg, std::uint32_t len, NetMode mode);
  void hlt();
  void stream_weights(const Region& r, bool per_layer);
  void read_vec(const Region& r, std::uint16_t index_reg, std::uint32_t len, std::uint32_t offset = 0);
  std::uint16_t norm(TensorRole role, std::uint16_t x);
  std::uint16_t linear(TensorRole w, TensorRole bias, std::uint16_t x, std::uint32_t rows, std::uint32_t cols);

  const ModelConfig& model_;
  const MemoryMap& map_;
  const Partition& part_;
  Program prog_;
  std::uint16_t x_ = kNoReg;
  std::uint16_t last_sync_ = kNoReg;
  std::uint16_t next_vreg_ = 0;
};

/// Full two-stage program: a summarization loop over the prompt followed by a
/// generation loop, each iterating one decoder body over the layers.
/// Entry points: "summarize" (pc 0), "generate" and "halt".
Program generate_program(const ModelConfig& model, const MemoryMap& map, const Partition& part,
                         const ClusterConfig& cluster);

/// One decoder layer as emitted inside the layer loop. Throws IndexOutOfRange
/// if `layer` is not a layer of the model.
std::vector<Instruction> expand_decoder_block(int layer, const ModelConfig& model, const MemoryMap& map,
                                              const Partition& part);

}  // namespace lpu
