#include "lpu/interp.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <memory>
#include <random>
#include <string>

#include "lpu/error.hpp"

namespace lpu {

namespace {

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

const Region& region_of(const Program& p, std::uint16_t id) {
  if (id >= p.regions.size()) throw Error(ErrorKind::DecodeFault, "region " + std::to_string(id) + " out of range");
  return p.regions[id];
}

std::int64_t sign_extend48(std::uint64_t imm) {
  return static_cast<std::int64_t>(imm << 16) >> 16;
}

}  // namespace

VmmShape vmm_shape(const Instruction& in, std::int64_t pos, int v, int l) {
  const auto m = VmmImm::unpack(in.imm);
  VmmShape s;
  s.rows = dyn_len(m.rows, pos);
  s.cols = dyn_len(m.cols, pos);
  s.row_tiles = ceil_div(s.rows, v);
  s.col_tiles = ceil_div(s.cols, l);
  return s;
}

std::int64_t kv_stream_tile(const Region& r, std::int64_t pos, std::int64_t j, int v, int l) {
  if (r.kind == RegionKind::KeyCache) return j;  // all rows, first ceil((pos+1)/l) column sets
  const std::int64_t rt = ceil_div(pos + 1, v);
  (void)l;
  return (j / rt) * r.grid.row_tiles + j % rt;
}

std::int64_t stream_pushes(const Program& p, const Instruction& in, std::int64_t pos) {
  const int v = p.info.vector_dim, l = p.info.mac_trees;
  switch (in.op) {
    case Opcode::RdWeight: return 1;
    case Opcode::RdVec: return is_scalar(in.dst) ? 0 : 1;
    case Opcode::RdKv: {
      const Region& r = region_of(p, in.src0);
      if (r.kind == RegionKind::KeyCache) return r.grid.row_tiles * ceil_div(pos + 1, l);
      return r.grid.col_tiles * ceil_div(pos + 1, v);
    }
    default: return 0;
  }
}

std::int64_t stream_pops(const Program& p, const Instruction& in, std::int64_t pos) {
  switch (in.op) {
    case Opcode::Vmm: return vmm_shape(in, pos, p.info.vector_dim, p.info.mac_trees).tiles();
    case Opcode::VmmAcc: return vmm_shape(in, pos, p.info.vector_dim, p.info.mac_trees).tiles() + 1;
    case Opcode::LayerNorm:
    case Opcode::RmsNorm: return 1;
    case Opcode::Embed: return (OpImm::unpack(in.imm).aux & 1u) ? 2 : 1;
    default: return 0;
  }
}

std::int64_t vec_address(const Region& r, std::int64_t index, std::uint32_t offset) {
  if (r.per_layer) return r.base_for(static_cast<int>(std::max<std::int64_t>(index, 0))) + offset * 2;
  if (r.kind == RegionKind::Io) return r.base + (std::max<std::int64_t>(index, 0) + offset) * 2;
  if (index >= 0) return r.base + (index * r.cols + offset) * 2;
  return r.base + std::int64_t{offset} * 2;
}

// --- ICP ------------------------------------------------------------------------------

Icp::Icp(const Program& p, std::uint32_t pc) : prog_(&p), pc_(pc) {
  if (pc >= p.code.size()) throw Error(ErrorKind::DecodeFault, "entry pc out of range");
}

bool Icp::dispatch_stalls() const {
  const Instruction& in = next();
  if (in.wait == 0) return false;
  if (in.group() == Group::Ctrl) return true;
  const auto a = reg_access(in);
  for (auto r : a.uses)
    if (r == ctl::TOKEN || r == ctl::EOS) return true;
  return false;
}

std::optional<DynInst> Icp::dispatch() {
  if (halted_) throw Error(ErrorKind::DecodeFault, "dispatch after HLT");
  const Program& p = *prog_;
  const Instruction& in = p.code.at(pc_);
  if (in.group() == Group::Ctrl) {
    ++ctrl_;
    std::uint32_t next_pc = pc_ + 1;
    switch (in.op) {
      case Opcode::Movs: set_scalar(in.dst, sign_extend48(in.imm)); break;
      case Opcode::Addi: set_scalar(in.dst, scalar(in.src0) + sign_extend48(in.imm)); break;
      case Opcode::Jmp: next_pc = static_cast<std::uint32_t>(in.imm & 0xFFFFFF); break;
      case Opcode::Br: {
        const auto b = BrImm::unpack(in.imm);
        const std::int64_t a = scalar(in.src0);
        const std::int64_t c = b.use_imm ? static_cast<std::int64_t>(b.value) : scalar(in.src1);
        bool taken = false;
        switch (b.cond) {
          case BrCond::Lt: taken = a < c; break;
          case BrCond::Ge: taken = a >= c; break;
          case BrCond::Eq: taken = a == c; break;
          case BrCond::Ne: taken = a != c; break;
        }
        if (taken) next_pc = b.target;
        break;
      }
      case Opcode::Hlt: halted_ = true; break;
      default: break;
    }
    if (!halted_ && next_pc >= p.code.size()) throw Error(ErrorKind::DecodeFault, "control flow left the program");
    pc_ = next_pc;
    return std::nullopt;
  }
  DynInst d;
  d.pc = pc_;
  d.seq = seq_++;
  d.pos = scalar(ctl::POS);
  const std::array<std::uint16_t, 3> ops{in.dst, in.src0, in.src1};
  for (std::size_t i = 0; i < 3; ++i)
    if (is_scalar(ops[i])) d.sval[i] = scalar(ops[i]);
  if (in.group() == Group::Mem) {
    d.stream_begin = pushes_;
    d.stream_count = stream_pushes(p, in, d.pos);
    pushes_ += d.stream_count;
  } else if (in.group() == Group::Comp) {
    d.stream_begin = pops_;
    d.stream_count = stream_pops(p, in, d.pos);
    pops_ += d.stream_count;
  } else if (in.op == Opcode::TxPart) {
    d.sync_seq = tx_++;
  } else {
    d.sync_seq = rx_++;
  }
  if (++pc_ >= p.code.size()) throw Error(ErrorKind::DecodeFault, "control flow left the program");
  return d;
}

// --- sync bus --------------------------------------------------------------------------

void SyncBus::post(int device, std::uint64_t seq, std::vector<Half> data) {
  Slot& s = slots_[seq];
  if (s.parts.empty()) s.parts.resize(static_cast<std::size_t>(n_));
  s.parts.at(static_cast<std::size_t>(device)) = std::move(data);
  ++s.posted;
}

bool SyncBus::ready(std::uint64_t seq) const {
  auto it = slots_.find(seq);
  return it != slots_.end() && it->second.posted == n_;
}

std::vector<Half> SyncBus::collect(std::uint64_t seq, NetMode mode, std::size_t len) {
  auto it = slots_.find(seq);
  if (it == slots_.end() || it->second.posted != n_) throw Error(ErrorKind::Deadlock, "sync collected before all parts");
  Slot& s = it->second;
  std::vector<Half> out;
  if (mode == NetMode::Reduce) {
    out.resize(len);
    for (std::size_t i = 0; i < len; ++i) {
      MacAccumulator acc;
      for (const auto& part : s.parts) acc.add(part.at(i));
      out[i] = acc.result();
    }
  } else {
    out.reserve(len * s.parts.size());
    for (const auto& part : s.parts) out.insert(out.end(), part.begin(), part.begin() + static_cast<std::ptrdiff_t>(len));
  }
  if (++s.collected == n_) slots_.erase(it);
  return out;
}

// --- functional device ---------------------------------------------------------------------

FuncDevice::FuncDevice(const Program& p, DeviceMemory image, const SamplingParams& sampling, int device)
    : prog_(&p), mem_(std::move(image)), sampler_(sampling), device_(device) {
  vregs_.resize(std::max<std::size_t>(64, p.vreg_len.size()));
}

bool FuncDevice::stream_ready(const DynInst& d) const { return d.stream_begin + d.stream_count <= pushed_; }

void FuncDevice::push(std::int64_t position, std::vector<Half> data) {
  stream_.emplace(position, std::move(data));
  pushed_ = std::max(pushed_, position + 1);
}

std::vector<Half> FuncDevice::pop(std::int64_t position) {
  auto it = stream_.find(position);
  if (it == stream_.end()) throw Error(ErrorKind::Deadlock, "stream item " + std::to_string(position) + " missing");
  auto v = std::move(it->second);
  stream_.erase(it);
  return v;
}

void FuncDevice::check(const std::vector<Half>& v, std::size_t n) {
  for (std::size_t i = 0; i < n && i < v.size(); ++i)
    if (!v[i].is_finite()) {
      nan_ = true;
      return;
    }
}

void FuncDevice::execute(const DynInst& d, Icp& icp, SyncBus* bus) {
  const Program& p = *prog_;
  const Instruction& in = p.code.at(d.pc);
  const int v = p.info.vector_dim, l = p.info.mac_trees;
  const std::int64_t tb = std::int64_t{v} * l * 2;
  const std::int64_t tile_elems = std::int64_t{v} * l;
  const int layer = is_scalar(in.src1) ? static_cast<int>(d.sval[2]) : 0;
  auto reg = [&](std::uint16_t r) -> std::vector<Half>& {
    if (!is_vector(r) || static_cast<std::size_t>(reg_index(r)) >= vregs_.size())
      throw Error(ErrorKind::DecodeFault, "bad vector register in " + format_instruction(in));
    return vregs_[static_cast<std::size_t>(reg_index(r))];
  };
  auto need = [&](const std::vector<Half>& x, std::int64_t n) {
    if (static_cast<std::int64_t>(x.size()) < n)
      throw Error(ErrorKind::DecodeFault, "operand shorter than " + std::to_string(n) + " in " + format_instruction(in));
  };
  auto read_block = [&](std::int64_t linear, std::int64_t n) {
    if (linear < 0 || linear + n * 2 > mem_.size())
      throw Error(ErrorKind::IndexOutOfRange, "read outside device memory in " + format_instruction(in));
    std::vector<Half> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = mem_.load(linear + 2 * i);
    return out;
  };
  auto set_out = [&](std::uint16_t r, std::vector<Half> x, std::size_t n) {
    check(x, n);
    reg(r) = std::move(x);
  };

  switch (in.op) {
    case Opcode::RdWeight: {
      const Region& r = region_of(p, in.src0);
      if (static_cast<std::int64_t>(in.imm) >= r.grid.count())
        throw Error(ErrorKind::IndexOutOfRange, "tile index past region " + r.name);
      push(d.stream_begin, read_block(r.base_for(layer) + static_cast<std::int64_t>(in.imm) * tb, tile_elems));
      break;
    }
    case Opcode::RdKv: {
      const Region& r = region_of(p, in.src0);
      if (d.pos >= (r.kind == RegionKind::KeyCache ? r.cols : r.rows))
        throw Error(ErrorKind::IndexOutOfRange, "position " + std::to_string(d.pos) + " past the KV cache");
      for (std::int64_t j = 0; j < d.stream_count; ++j)
        push(d.stream_begin + j, read_block(r.base_for(layer) + kv_stream_tile(r, d.pos, j, v, l) * tb, tile_elems));
      break;
    }
    case Opcode::WrKv: {
      const Region& r = region_of(p, in.src0);
      const bool key = r.kind == RegionKind::KeyCache;
      const std::int64_t hd = key ? r.rows : r.cols;
      if (d.pos >= (key ? r.cols : r.rows))
        throw Error(ErrorKind::IndexOutOfRange, "position " + std::to_string(d.pos) + " past the KV cache");
      const auto& x = reg(in.dst);
      const auto off = static_cast<std::int64_t>(in.imm);
      need(x, off + hd);
      for (std::int64_t e = 0; e < hd; ++e) {
        const std::int64_t at = key ? region_element_linear(r, layer, e, d.pos, v, l)
                                    : region_element_linear(r, layer, d.pos, e, v, l);
        mem_.store(at, x[static_cast<std::size_t>(off + e)]);
      }
      break;
    }
    case Opcode::RdVec: {
      const Region& r = region_of(p, in.src0);
      const auto vi = VecImm::unpack(in.imm);
      const std::int64_t index = is_scalar(in.src1) ? d.sval[2] : -1;
      if (!r.per_layer && r.kind != RegionKind::Io && index >= r.rows)
        throw Error(ErrorKind::IndexOutOfRange, "row " + std::to_string(index) + " of " + r.name);
      if (r.kind == RegionKind::Io && index + vi.offset + vi.len > r.cols)
        throw Error(ErrorKind::IndexOutOfRange, "position past " + r.name);
      const std::int64_t at = vec_address(r, index, vi.offset);
      if (is_scalar(in.dst)) {
        icp.set_scalar(in.dst, read_block(at, 1)[0].bits);
      } else {
        push(d.stream_begin, read_block(at, vi.len));
      }
      break;
    }
    case Opcode::WrVec: {
      const Region& r = region_of(p, in.src0);
      const auto vi = VecImm::unpack(in.imm);
      const std::int64_t index = is_scalar(in.src1) ? d.sval[2] : -1;
      if (r.kind == RegionKind::Io && index + vi.offset + vi.len > r.cols)
        throw Error(ErrorKind::IndexOutOfRange, "position past " + r.name);
      const std::int64_t at = vec_address(r, index, vi.offset);
      if (is_scalar(in.dst)) {
        mem_.store(at, Half::from_bits(static_cast<std::uint16_t>(d.sval[0])));
      } else {
        const auto& x = reg(in.dst);
        need(x, vi.len);
        for (std::uint32_t i = 0; i < vi.len; ++i) mem_.store(at + 2 * i, x[i]);
      }
      break;
    }
    case Opcode::Vmm:
    case Opcode::VmmAcc: {
      const auto m = VmmImm::unpack(in.imm);
      const auto s = vmm_shape(in, d.pos, v, l);
      const auto& x = reg(in.src0);
      const std::int64_t in_off = m.in_offset ? m.offset : 0;
      need(x, in_off + s.rows);
      std::vector<MacAccumulator> acc(static_cast<std::size_t>(s.cols));
      for (std::int64_t c = 0; c < s.col_tiles; ++c)
        for (std::int64_t rt = 0; rt < s.row_tiles; ++rt) {
          const auto tile = pop(d.stream_begin + c * s.row_tiles + rt);
          for (std::int64_t ci = 0; ci < l && c * l + ci < s.cols; ++ci) {
            auto& a = acc[static_cast<std::size_t>(c * l + ci)];
            for (std::int64_t ri = 0; ri < v && rt * v + ri < s.rows; ++ri)
              a.add_product(x[static_cast<std::size_t>(in_off + rt * v + ri)], tile[static_cast<std::size_t>(ci * v + ri)]);
          }
        }
      if (in.op == Opcode::VmmAcc) {
        const auto bias = pop(d.stream_begin + s.tiles());
        need(bias, s.cols);
        for (std::int64_t c = 0; c < s.cols; ++c) acc[static_cast<std::size_t>(c)].add(bias[static_cast<std::size_t>(c)]);
      }
      std::vector<Half> y(static_cast<std::size_t>(s.cols));
      for (std::size_t c = 0; c < y.size(); ++c) y[c] = acc[c].result();
      check(y, y.size());
      if (m.out_offset) {
        auto& dst = reg(in.dst);
        const auto end = static_cast<std::size_t>(m.offset + s.cols);
        if (dst.size() < end) dst.resize(end);
        std::copy(y.begin(), y.end(), dst.begin() + m.offset);
      } else {
        reg(in.dst) = std::move(y);
      }
      break;
    }
    case Opcode::Softmax: {
      const auto o = OpImm::unpack(in.imm);
      const std::int64_t n = dyn_len(o.len, d.pos);
      const auto& x = reg(in.src0);
      need(x, n);
      const double scale = o.aux > 0 ? 1.0 / std::sqrt(static_cast<double>(o.aux)) : 1.0;
      set_out(in.dst, vxe_softmax(x, static_cast<std::size_t>(n), scale), static_cast<std::size_t>(n));
      break;
    }
    case Opcode::LayerNorm:
    case Opcode::RmsNorm: {
      const auto o = OpImm::unpack(in.imm);
      const auto& x = reg(in.src0);
      need(x, o.len);
      const auto params = pop(d.stream_begin);
      need(params, in.op == Opcode::LayerNorm ? 2 * o.len : o.len);
      auto y = in.op == Opcode::LayerNorm ? vxe_layernorm(x, params.data(), params.data() + o.len, o.len)
                                          : vxe_rmsnorm(x, params.data(), o.len);
      set_out(in.dst, std::move(y), o.len);
      break;
    }
    case Opcode::Add:
    case Opcode::Mul: {
      const auto o = OpImm::unpack(in.imm);
      const auto& a = reg(in.src0);
      const auto& b = reg(in.src1);
      need(a, o.len);
      need(b, o.len);
      set_out(in.dst, in.op == Opcode::Add ? vxe_add(a, b, o.len) : vxe_mul(a, b, o.len), o.len);
      break;
    }
    case Opcode::Gelu:
    case Opcode::Relu:
    case Opcode::Silu: {
      const auto o = OpImm::unpack(in.imm);
      const auto& x = reg(in.src0);
      need(x, o.len);
      auto y = in.op == Opcode::Gelu ? vxe_gelu(x, o.len) : in.op == Opcode::Relu ? vxe_relu(x, o.len) : vxe_silu(x, o.len);
      set_out(in.dst, std::move(y), o.len);
      break;
    }
    case Opcode::Rope: {
      const auto o = OpImm::unpack(in.imm);
      const auto& x = reg(in.src0);
      need(x, o.len);
      set_out(in.dst, vxe_rope(x, o.len, static_cast<int>(o.aux), static_cast<int>(d.pos), p.info.rope_theta), o.len);
      break;
    }
    case Opcode::Embed: {
      const auto o = OpImm::unpack(in.imm);
      const auto tok = pop(d.stream_begin);
      need(tok, o.len);
      if (o.aux & 1u) {
        const auto posv = pop(d.stream_begin + 1);
        need(posv, o.len);
        set_out(in.dst, vxe_embed(tok, &posv, o.len), o.len);
      } else {
        set_out(in.dst, vxe_embed(tok, nullptr, o.len), o.len);
      }
      break;
    }
    case Opcode::Sample: {
      const auto o = OpImm::unpack(in.imm);
      const auto& x = reg(in.src0);
      need(x, o.len);
      if (capture_) logits_.emplace_back(x.begin(), x.begin() + o.len);
      const int tok = sampler_.sample(x, o.len);
      icp.set_scalar(in.dst, tok);
      if (is_scalar(in.src1)) icp.set_scalar(in.src1, (o.aux > 0 && tok == static_cast<int>(o.aux) - 1) ? 1 : 0);
      break;
    }
    case Opcode::TxPart: {
      if (bus == nullptr) throw Error(ErrorKind::DecodeFault, "TX_PART without a sync group");
      const auto o = OpImm::unpack(in.imm);
      const auto& x = reg(in.src0);
      need(x, o.len);
      bus->post(device_, d.sync_seq, {x.begin(), x.begin() + o.len});
      break;
    }
    case Opcode::RxPart: {
      if (bus == nullptr) throw Error(ErrorKind::DecodeFault, "RX_PART without a sync group");
      const auto o = OpImm::unpack(in.imm);
      auto y = bus->collect(d.sync_seq, static_cast<NetMode>(o.aux), o.len);
      const auto n = y.size();
      set_out(in.dst, std::move(y), n);
      break;
    }
    default: throw Error(ErrorKind::DecodeFault, "CTRL instruction reached an engine");
  }
}

// --- runs ---------------------------------------------------------------------------------

void prepare_run(const Program& p, DeviceMemory& mem, Icp& icp, const std::vector<int>& prompt, int max_new) {
  const Region* io = nullptr;
  for (const auto& r : p.regions)
    if (r.kind == RegionKind::Io && r.name == "io.input") io = &r;
  if (io == nullptr) throw Error(ErrorKind::UnmappedTensor, "program has no input region");
  if (prompt.empty()) throw Error(ErrorKind::InvalidConfig, "empty prompt");
  if (max_new < 1) throw Error(ErrorKind::InvalidConfig, "at least one output token is generated");
  if (static_cast<std::int64_t>(prompt.size()) + max_new - 1 > io->cols)
    throw Error(ErrorKind::IndexOutOfRange, std::to_string(prompt.size()) + " + " + std::to_string(max_new) +
                                                " tokens exceed the context of " + std::to_string(io->cols));
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    if (prompt[i] < 0 || prompt[i] >= p.info.vocab_size)
      throw Error(ErrorKind::IndexOutOfRange, "token id " + std::to_string(prompt[i]));
    mem.store(io->base + 2 * static_cast<std::int64_t>(i), Half::from_bits(static_cast<std::uint16_t>(prompt[i])));
  }
  icp.set_scalar(ctl::NSUM, static_cast<std::int64_t>(prompt.size()) - 1);
  icp.set_scalar(ctl::NOUT, max_new);
}

namespace {

struct Agent {
  const Program* prog;
  Icp icp;
  FuncDevice dev;
  std::array<std::deque<DynInst>, kNumGroups> queue;
  std::array<std::set<std::uint64_t>, 64> pending;  // incomplete setters per token
  std::array<std::uint64_t, kNumGroups> per_group{};

  Agent(const Program& p, DeviceMemory mem, const SamplingParams& s, int id)
      : prog(&p), icp(p, p.entry("summarize")), dev(p, std::move(mem), s, id) {}

  bool done() const {
    if (!icp.halted()) return false;
    for (const auto& q : queue)
      if (!q.empty()) return false;
    return true;
  }

  bool can_dispatch() const {
    if (icp.halted()) return false;
    if (!icp.dispatch_stalls()) return true;
    return pending[icp.next().wait].empty();
  }

  void dispatch() {
    const Instruction& in = icp.next();
    auto d = icp.dispatch();
    if (!d) return;
    ++per_group[static_cast<std::size_t>(in.group())];
    if (in.set != 0) pending[in.set].insert(d->seq);
    queue[static_cast<std::size_t>(in.group())].push_back(*d);
  }

  bool can_run(int g, const SyncBus* bus) const {
    const auto& q = queue[static_cast<std::size_t>(g)];
    if (q.empty()) return false;
    const DynInst& d = q.front();
    const Instruction& in = prog->code[d.pc];
    if (in.wait != 0) {
      const auto& s = pending[in.wait];
      if (!s.empty() && *s.begin() < d.seq) return false;
    }
    if (g == static_cast<int>(Group::Comp) && !dev.stream_ready(d)) return false;
    if (in.op == Opcode::RxPart && (bus == nullptr || !bus->ready(d.sync_seq))) return false;
    return true;
  }

  void run(int g, SyncBus* bus) {
    auto& q = queue[static_cast<std::size_t>(g)];
    const DynInst d = q.front();
    q.pop_front();
    dev.execute(d, icp, bus);
    const Instruction& in = prog->code[d.pc];
    if (in.set != 0) pending[in.set].erase(d.seq);
  }

  /// Oldest queued instruction, or -1.
  int oldest_group() const {
    int best = -1;
    std::uint64_t seq = 0;
    for (int g = 0; g < kNumGroups; ++g) {
      const auto& q = queue[static_cast<std::size_t>(g)];
      if (!q.empty() && (best < 0 || q.front().seq < seq)) {
        best = g;
        seq = q.front().seq;
      }
    }
    return best;
  }
};

}  // namespace

RunResult run_functional(const std::vector<const Program*>& programs, const std::vector<DeviceMemory>& images,
                         const std::vector<int>& prompt, const RunOptions& opt) {
  if (programs.empty() || programs.size() != images.size())
    throw Error(ErrorKind::InvalidDeviceCount, "one program and one image per device");
  validate_sampling(opt.sampling);
  const int n = static_cast<int>(programs.size());
  std::vector<std::unique_ptr<Agent>> agents;
  for (int i = 0; i < n; ++i) {
    agents.push_back(std::make_unique<Agent>(*programs[static_cast<std::size_t>(i)], images[static_cast<std::size_t>(i)],
                                             opt.sampling, i));
    auto& a = *agents.back();
    prepare_run(*a.prog, a.dev.memory(), a.icp, prompt, opt.max_new_tokens);
    a.dev.capture_logits(opt.capture_logits && i == 0);
  }
  SyncBus bus(n);
  SyncBus* busp = n > 1 ? &bus : nullptr;

  auto all_done = [&] {
    for (const auto& a : agents)
      if (!a->done()) return false;
    return true;
  };

  if (opt.schedule == Schedule::Sequential) {
    while (!all_done()) {
      bool progressed = false;
      for (auto& ap : agents) {
        Agent& a = *ap;
        while (!a.done()) {
          const int g = a.oldest_group();
          if (g >= 0) {
            if (!a.can_run(g, busp)) break;
            a.run(g, busp);
          } else {
            if (!a.can_dispatch()) break;
            a.dispatch();
          }
          progressed = true;
        }
      }
      if (!progressed) throw Error(ErrorKind::Deadlock, "no device can make progress");
    }
  } else {
    std::mt19937_64 rng(opt.schedule_seed);
    std::vector<std::pair<int, int>> enabled;  // (device, agent) with agent 4 = ICP
    while (!all_done()) {
      enabled.clear();
      for (int i = 0; i < n; ++i) {
        Agent& a = *agents[static_cast<std::size_t>(i)];
        if (a.can_dispatch()) enabled.emplace_back(i, kNumGroups);
        for (int g = 0; g < kNumGroups; ++g)
          if (a.can_run(g, busp)) enabled.emplace_back(i, g);
      }
      if (enabled.empty()) throw Error(ErrorKind::Deadlock, "no agent can make progress");
      const auto [dev, what] = enabled[static_cast<std::size_t>(rng() % enabled.size())];
      Agent& a = *agents[static_cast<std::size_t>(dev)];
      if (what == kNumGroups) {
        a.dispatch();
      } else {
        a.run(what, busp);
      }
    }
  }

  RunResult res;
  Agent& a0 = *agents[0];
  const Program& p0 = *a0.prog;
  const std::int64_t count = a0.icp.scalar(ctl::COUNT);
  for (const auto& r : p0.regions)
    if (r.kind == RegionKind::Io && r.name == "io.output")
      for (std::int64_t i = 0; i < count; ++i) res.tokens.push_back(a0.dev.memory().load(r.base + 2 * i).bits);
  for (const auto& a : agents) res.nan_detected = res.nan_detected || a->dev.nan_detected();
  res.logits = std::move(a0.dev.logits());
  res.per_group = a0.per_group;
  res.ctrl_instructions = a0.icp.ctrl_executed();
  res.per_group[static_cast<std::size_t>(Group::Ctrl)] = res.ctrl_instructions;
  res.dynamic_instructions = a0.icp.dispatched();
  return res;
}

RunResult interpret(const Program& p, const DeviceMemory& image, const std::vector<int>& prompt,
                    const RunOptions& opt) {
  return run_functional({&p}, {image}, prompt, opt);
}

}  // namespace lpu
