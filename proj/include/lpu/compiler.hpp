#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lpu/arch.hpp"
#include "lpu/isa.hpp"

namespace lpu {

// --- control flow ------------------------------------------------------------------

struct BasicBlock {
  std::uint32_t begin = 0;  // first pc
  std::uint32_t end = 0;    // one past the last pc
  std::vector<int> succ;
};

std::vector<BasicBlock> build_cfg(const Program& p);

// --- register allocation -----------------------------------------------------------

struct LiveInterval {
  int vreg = 0;  // register index within its bank
  bool scalar = false;
  std::uint32_t start = 0;
  std::uint32_t end = 0;  // inclusive
};

struct Allocation {
  std::vector<LiveInterval> intervals;  // virtual-register hulls, before renaming
  std::vector<int> vector_map;          // virtual -> physical (-1 if unused)
  std::vector<int> scalar_map;
  int vector_used = 0;
  int scalar_used = 0;
};

/// Linear scan over live-range hulls, one pass per bank. Control registers keep
/// their fixed scalar slots. Throws RegisterPressureExceeded when a bank runs out
/// or a vector does not fit one register (lmu_bytes / vector_registers).
Allocation allocate_registers(Program& p, int vector_registers, int scalar_registers, double lmu_bytes);
Allocation allocate_registers(Program& p, const DeviceConfig& dev);

// --- chaining ----------------------------------------------------------------------

struct ChainSet {
  Program program;  // in dispatch order, tags filled in
  std::array<std::vector<std::uint32_t>, kNumGroups> chains;
  const std::vector<std::uint32_t>& chain(Group g) const { return chains[static_cast<std::size_t>(g)]; }
};

constexpr int kNumTokens = 63;

/// A dependency the generator requires beyond register hazards (producer pc, consumer pc).
using ExplicitDep = std::pair<std::uint32_t, std::uint32_t>;

/// Splits the program into per-group chains and turns every cross-chain hazard
/// into a scoreboard token: the producer sets it, the consumer waits for all
/// earlier setters of it. Throws CyclicDependency.
ChainSet chain_instructions(const Program& p, const std::vector<ExplicitDep>& extra = {});

/// Dependencies that needed a token, as (producer pc, consumer pc); exposed for tests.
std::vector<ExplicitDep> cross_chain_dependencies(const Program& p);

// --- binary ---------------------------------------------------------------------------

constexpr std::uint32_t kBinaryVersion = 1;

std::vector<std::uint8_t> emit_binary(const ChainSet& cs);
/// Throws MalformedBinary.
ChainSet disassemble(const std::vector<std::uint8_t>& bytes);

/// 16-byte instruction word, little-endian.
std::array<std::uint8_t, 16> encode_instruction(const Instruction& in);
Instruction decode_instruction(const std::uint8_t* word);

/// Convenience: allocate, chain.
ChainSet compile(Program p, const DeviceConfig& dev);

}  // namespace lpu
