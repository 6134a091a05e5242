#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lpu/mapper.hpp"

namespace lpu {

enum class Group : std::uint8_t { Mem = 0, Comp = 1, Net = 2, Ctrl = 3 };
constexpr int kNumGroups = 4;

enum class Opcode : std::uint8_t {
  // MEM
  RdWeight = 0x01, RdKv = 0x02, WrKv = 0x03, RdVec = 0x04, WrVec = 0x05,
  // COMP
  Vmm = 0x10, VmmAcc = 0x11, Softmax = 0x12, LayerNorm = 0x13, RmsNorm = 0x14, Add = 0x15, Mul = 0x16,
  Gelu = 0x17, Relu = 0x18, Silu = 0x19, Rope = 0x1A, Embed = 0x1B, Sample = 0x1C,
  // NET
  TxPart = 0x20, RxPart = 0x21,
  // CTRL
  Br = 0x30, Jmp = 0x31, Addi = 0x32, Movs = 0x33, Hlt = 0x34,
};

const char* group_name(Group g);
const char* opcode_name(Opcode op);
Group opcode_group(Opcode op);
bool is_valid_opcode(std::uint8_t raw);
/// Engine that executes a COMP opcode: true for the SXE (streamed VMMs,
/// rotary and activation functions), false for the VXE.
bool runs_on_sxe(Opcode op);

// --- register references ------------------------------------------------------
// 16-bit operand. Bit 15 selects the scalar bank; 0xFFFF means "no operand".

constexpr std::uint16_t kNoReg = 0xFFFF;
constexpr std::uint16_t kScalarBit = 0x8000;

constexpr std::uint16_t vreg(int i) { return static_cast<std::uint16_t>(i); }
constexpr std::uint16_t sreg(int i) { return static_cast<std::uint16_t>(kScalarBit | i); }
constexpr bool is_reg(std::uint16_t r) { return r != kNoReg; }
constexpr bool is_scalar(std::uint16_t r) { return r != kNoReg && (r & kScalarBit) != 0; }
constexpr bool is_vector(std::uint16_t r) { return r != kNoReg && (r & kScalarBit) == 0; }
constexpr int reg_index(std::uint16_t r) { return r & 0x7FFF; }

/// Control registers of the ICP. They live at fixed scalar slots and are
/// never renamed by the allocator.
namespace ctl {
constexpr std::uint16_t POS = sreg(0);    // KV position of the token being processed
constexpr std::uint16_t LAYER = sreg(1);  // decoder layer counter
constexpr std::uint16_t TOKEN = sreg(2);  // current token id
constexpr std::uint16_t EOS = sreg(3);    // end-of-sequence flag written by SAMPLE
constexpr std::uint16_t COUNT = sreg(4);  // generated token counter
constexpr std::uint16_t NSUM = sreg(5);   // prompt tokens summarized before generation (host-set)
constexpr std::uint16_t NOUT = sreg(6);   // maximum generated tokens (host-set)
constexpr int kReserved = 8;
/// Engines may only write these scalars; everything else is written by CTRL at dispatch.
constexpr bool engine_writable(std::uint16_t r) { return r == TOKEN || r == EOS; }
}  // namespace ctl

// --- instruction --------------------------------------------------------------

struct Instruction {
  Opcode op = Opcode::Hlt;
  std::uint16_t dst = kNoReg;
  std::uint16_t src0 = kNoReg;
  std::uint16_t src1 = kNoReg;
  std::uint64_t imm = 0;  // 48 bits
  std::uint8_t wait = 0;  // scoreboard token waited on (0 = none)
  std::uint8_t set = 0;   // scoreboard token set on completion (0 = none)

  Group group() const { return opcode_group(op); }
  friend bool operator==(const Instruction&, const Instruction&) = default;
};

/// Register operands read and written by one instruction (explicit fields only;
/// POS is read implicitly by KV accesses, dynamic VMMs, SOFTMAX and ROPE).
struct RegAccess {
  std::array<std::uint16_t, 3> uses{kNoReg, kNoReg, kNoReg};
  std::array<std::uint16_t, 2> defs{kNoReg, kNoReg};
};
RegAccess reg_access(const Instruction& in);
/// True if the instruction reads POS without naming it.
bool reads_pos(const Instruction& in);

// --- immediate layouts ----------------------------------------------------------

constexpr std::uint64_t kImmMask = (std::uint64_t{1} << 48) - 1;

struct VmmImm {
  std::uint32_t rows = 0;  // 0 = POS + 1
  std::uint32_t cols = 0;  // 0 = POS + 1
  std::uint32_t offset = 0;
  bool out_offset = false;  // offset selects the output slice in dst
  bool in_offset = false;   // offset selects the input slice of src0
  std::uint64_t pack() const;
  static VmmImm unpack(std::uint64_t imm);
};
constexpr std::uint32_t kMaxVmmOffset = (1u << 14) - 1;

/// RD_VEC / WR_VEC: [len:16][offset:32] in elements.
struct VecImm {
  std::uint32_t len = 0;
  std::uint32_t offset = 0;
  std::uint64_t pack() const { return (std::uint64_t{len} & 0xFFFF) | (std::uint64_t{offset} << 16); }
  static VecImm unpack(std::uint64_t imm) {
    return {static_cast<std::uint32_t>(imm & 0xFFFF), static_cast<std::uint32_t>((imm >> 16) & 0xFFFFFFFFu)};
  }
};

/// Generic COMP immediate: [len:16][aux:32]; len 0 means POS + 1.
struct OpImm {
  std::uint32_t len = 0;
  std::uint32_t aux = 0;
  std::uint64_t pack() const { return (std::uint64_t{len} & 0xFFFF) | (std::uint64_t{aux} << 16); }
  static OpImm unpack(std::uint64_t imm) {
    return {static_cast<std::uint32_t>(imm & 0xFFFF), static_cast<std::uint32_t>((imm >> 16) & 0xFFFFFFFFu)};
  }
};

enum class NetMode : std::uint32_t { Reduce = 0, Gather = 1 };

enum class BrCond : std::uint32_t { Lt = 0, Ge = 1, Eq = 2, Ne = 3 };

/// BR: [target:24][cond:3][use_imm:1][value:16]
struct BrImm {
  std::uint32_t target = 0;
  BrCond cond = BrCond::Lt;
  bool use_imm = false;
  std::uint32_t value = 0;
  std::uint64_t pack() const;
  static BrImm unpack(std::uint64_t imm);
};

// --- program ----------------------------------------------------------------------

struct ProgramInfo {
  int device_id = 0;
  int n_devices = 1;
  int num_layers = 0;
  int d_model = 0;
  int head_dim = 0;
  int vocab_size = 0;
  int vector_dim = 64;
  int mac_trees = 32;
  double rope_theta = 10000.0;
  friend bool operator==(const ProgramInfo&, const ProgramInfo&) = default;
};

struct Program {
  ProgramInfo info;
  std::vector<Instruction> code;
  std::vector<Region> regions;
  std::vector<std::pair<std::string, std::uint32_t>> entries;
  /// Length (FP16 elements) of every vector register, indexed by register id.
  std::vector<std::uint32_t> vreg_len;
  bool allocated = false;

  std::uint32_t entry(const std::string& name) const;
  std::size_t count(Group g) const;
  std::size_t count(Opcode op) const;
};

/// One line per instruction: `chain:group opcode dst, src0, src1, imm`.
std::string format_instruction(const Instruction& in);
std::string to_assembly(const Program& p);

}  // namespace lpu
