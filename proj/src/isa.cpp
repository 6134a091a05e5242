#include "lpu/isa.hpp"

#include <cstdio>
#include <sstream>

#include "lpu/error.hpp"

namespace lpu {

const char* group_name(Group g) {
  switch (g) {
    case Group::Mem: return "MEM";
    case Group::Comp: return "COMP";
    case Group::Net: return "NET";
    case Group::Ctrl: return "CTRL";
  }
  return "?";
}

const char* opcode_name(Opcode op) {
  switch (op) {
    case Opcode::RdWeight: return "RD_WEIGHT";
    case Opcode::RdKv: return "RD_KV";
    case Opcode::WrKv: return "WR_KV";
    case Opcode::RdVec: return "RD_VEC";
    case Opcode::WrVec: return "WR_VEC";
    case Opcode::Vmm: return "VMM";
    case Opcode::VmmAcc: return "VMM_ACC";
    case Opcode::Softmax: return "SOFTMAX";
    case Opcode::LayerNorm: return "LAYERNORM";
    case Opcode::RmsNorm: return "RMSNORM";
    case Opcode::Add: return "ADD";
    case Opcode::Mul: return "MUL";
    case Opcode::Gelu: return "GELU";
    case Opcode::Relu: return "RELU";
    case Opcode::Silu: return "SILU";
    case Opcode::Rope: return "ROPE";
    case Opcode::Embed: return "EMBED";
    case Opcode::Sample: return "SAMPLE";
    case Opcode::TxPart: return "TX_PART";
    case Opcode::RxPart: return "RX_PART";
    case Opcode::Br: return "BR";
    case Opcode::Jmp: return "JMP";
    case Opcode::Addi: return "ADDI";
    case Opcode::Movs: return "MOVS";
    case Opcode::Hlt: return "HLT";
  }
  return "?";
}

Group opcode_group(Opcode op) {
  const auto v = static_cast<std::uint8_t>(op);
  if (v < 0x10) return Group::Mem;
  if (v < 0x20) return Group::Comp;
  if (v < 0x30) return Group::Net;
  return Group::Ctrl;
}

bool is_valid_opcode(std::uint8_t v) {
  return (v >= 0x01 && v <= 0x05) || (v >= 0x10 && v <= 0x1C) || (v >= 0x20 && v <= 0x21) ||
         (v >= 0x30 && v <= 0x34);
}

bool runs_on_sxe(Opcode op) {
  switch (op) {
    case Opcode::Vmm:
    case Opcode::VmmAcc:
    case Opcode::Rope:
    case Opcode::Gelu:
    case Opcode::Relu:
    case Opcode::Silu: return true;
    default: return false;
  }
}

RegAccess reg_access(const Instruction& in) {
  RegAccess a;
  auto use = [&](int i, std::uint16_t r) {
    if (is_reg(r)) a.uses[static_cast<std::size_t>(i)] = r;
  };
  auto def = [&](int i, std::uint16_t r) {
    if (is_reg(r)) a.defs[static_cast<std::size_t>(i)] = r;
  };
  switch (in.op) {
    case Opcode::RdWeight:
    case Opcode::RdKv: use(1, in.src1); break;
    case Opcode::WrKv:
    case Opcode::WrVec:
      use(0, in.dst);
      use(1, in.src1);
      break;
    case Opcode::RdVec:
      def(0, in.dst);
      use(1, in.src1);
      break;
    case Opcode::Vmm:
    case Opcode::VmmAcc:
      def(0, in.dst);
      use(0, in.src0);
      if (VmmImm::unpack(in.imm).out_offset) use(1, in.dst);  // partial write keeps the rest
      break;
    case Opcode::Softmax:
    case Opcode::LayerNorm:
    case Opcode::RmsNorm:
    case Opcode::Gelu:
    case Opcode::Relu:
    case Opcode::Silu:
    case Opcode::Rope:
    case Opcode::RxPart:
      def(0, in.dst);
      use(0, in.src0);
      break;
    case Opcode::Add:
    case Opcode::Mul:
      def(0, in.dst);
      use(0, in.src0);
      use(1, in.src1);
      break;
    case Opcode::Embed: def(0, in.dst); break;
    case Opcode::Sample:
      def(0, in.dst);
      def(1, in.src1);
      use(0, in.src0);
      break;
    case Opcode::TxPart: use(0, in.src0); break;
    case Opcode::Br:
      use(0, in.src0);
      use(1, in.src1);
      break;
    case Opcode::Addi:
      def(0, in.dst);
      use(0, in.src0);
      break;
    case Opcode::Movs: def(0, in.dst); break;
    case Opcode::Jmp:
    case Opcode::Hlt: break;
  }
  return a;
}

bool reads_pos(const Instruction& in) {
  switch (in.op) {
    case Opcode::RdKv:
    case Opcode::WrKv:
    case Opcode::Rope: return true;
    case Opcode::Vmm:
    case Opcode::VmmAcc: {
      const auto m = VmmImm::unpack(in.imm);
      return m.rows == 0 || m.cols == 0;
    }
    case Opcode::Softmax: return OpImm::unpack(in.imm).len == 0;
    default: return false;
  }
}

std::uint64_t VmmImm::pack() const {
  return (std::uint64_t{rows} & 0xFFFF) | ((std::uint64_t{cols} & 0xFFFF) << 16) |
         ((std::uint64_t{offset} & kMaxVmmOffset) << 32) | (std::uint64_t{out_offset} << 46) |
         (std::uint64_t{in_offset} << 47);
}

VmmImm VmmImm::unpack(std::uint64_t imm) {
  VmmImm m;
  m.rows = static_cast<std::uint32_t>(imm & 0xFFFF);
  m.cols = static_cast<std::uint32_t>((imm >> 16) & 0xFFFF);
  m.offset = static_cast<std::uint32_t>((imm >> 32) & kMaxVmmOffset);
  m.out_offset = ((imm >> 46) & 1u) != 0;
  m.in_offset = ((imm >> 47) & 1u) != 0;
  return m;
}

std::uint64_t BrImm::pack() const {
  return (std::uint64_t{target} & 0xFFFFFF) | ((static_cast<std::uint64_t>(cond) & 0x7) << 24) |
         (std::uint64_t{use_imm} << 27) | ((std::uint64_t{value} & 0xFFFF) << 28);
}

BrImm BrImm::unpack(std::uint64_t imm) {
  BrImm b;
  b.target = static_cast<std::uint32_t>(imm & 0xFFFFFF);
  b.cond = static_cast<BrCond>((imm >> 24) & 0x7);
  b.use_imm = ((imm >> 27) & 1u) != 0;
  b.value = static_cast<std::uint32_t>((imm >> 28) & 0xFFFF);
  return b;
}

std::uint32_t Program::entry(const std::string& name) const {
  for (const auto& [n, pc] : entries)
    if (n == name) return pc;
  throw Error(ErrorKind::IndexOutOfRange, "no entry point '" + name + "'");
}

std::size_t Program::count(Group g) const {
  std::size_t n = 0;
  for (const auto& in : code) n += in.group() == g;
  return n;
}

std::size_t Program::count(Opcode op) const {
  std::size_t n = 0;
  for (const auto& in : code) n += in.op == op;
  return n;
}

namespace {

std::string reg_text(std::uint16_t r) {
  if (!is_reg(r)) return "-";
  return (is_scalar(r) ? "s" : "v") + std::to_string(reg_index(r));
}

}  // namespace

std::string format_instruction(const Instruction& in) {
  const Group g = in.group();
  std::ostringstream os;
  os << static_cast<int>(g) << ':' << group_name(g) << ' ' << opcode_name(in.op) << ' ';
  const bool region = g == Group::Mem;
  os << reg_text(in.dst) << ", " << (region ? "r" + std::to_string(in.src0) : reg_text(in.src0)) << ", "
     << reg_text(in.src1);
  char buf[32];
  std::snprintf(buf, sizeof buf, ", 0x%012llx", static_cast<unsigned long long>(in.imm & kImmMask));
  os << buf;
  if (in.wait != 0 || in.set != 0) os << " ; wait " << int{in.wait} << " set " << int{in.set};
  return os.str();
}

std::string to_assembly(const Program& p) {
  std::ostringstream os;
  for (std::size_t pc = 0; pc < p.code.size(); ++pc) {
    for (const auto& [name, at] : p.entries)
      if (at == pc) os << name << ":\n";
    os << format_instruction(p.code[pc]) << '\n';
  }
  return os.str();
}

}  // namespace lpu
