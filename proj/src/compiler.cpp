#include "lpu/compiler.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <limits>
#include <map>
#include <numeric>

#include "lpu/error.hpp"

namespace lpu {

// --- CFG ------------------------------------------------------------------------------

namespace {

bool ends_block(Opcode op) { return op == Opcode::Br || op == Opcode::Jmp || op == Opcode::Hlt; }

std::uint32_t branch_target(const Instruction& in) {
  return in.op == Opcode::Br ? BrImm::unpack(in.imm).target : static_cast<std::uint32_t>(in.imm & 0xFFFFFF);
}

}  // namespace

std::vector<BasicBlock> build_cfg(const Program& p) {
  const auto n = static_cast<std::uint32_t>(p.code.size());
  std::vector<std::uint32_t> leaders = {0};
  for (const auto& e : p.entries) leaders.push_back(e.second);
  for (std::uint32_t pc = 0; pc < n; ++pc) {
    const auto& in = p.code[pc];
    if (ends_block(in.op)) {
      if (pc + 1 < n) leaders.push_back(pc + 1);
      if (in.op != Opcode::Hlt) {
        const std::uint32_t t = branch_target(in);
        if (t >= n) throw Error(ErrorKind::DecodeFault, "branch target " + std::to_string(t) + " out of range");
        leaders.push_back(t);
      }
    }
  }
  std::sort(leaders.begin(), leaders.end());
  leaders.erase(std::unique(leaders.begin(), leaders.end()), leaders.end());
  leaders.erase(std::remove_if(leaders.begin(), leaders.end(), [&](std::uint32_t x) { return x >= n; }), leaders.end());

  std::vector<BasicBlock> blocks;
  for (std::size_t i = 0; i < leaders.size(); ++i)
    blocks.push_back({leaders[i], i + 1 < leaders.size() ? leaders[i + 1] : n, {}});
  auto block_of = [&](std::uint32_t pc) {
    return static_cast<int>(std::upper_bound(leaders.begin(), leaders.end(), pc) - leaders.begin()) - 1;
  };
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto& blk = blocks[b];
    const auto& last = p.code[blk.end - 1];
    if (last.op == Opcode::Hlt) continue;
    if (last.op == Opcode::Br || last.op == Opcode::Jmp) blk.succ.push_back(block_of(branch_target(last)));
    if (last.op != Opcode::Jmp && blk.end < n) blk.succ.push_back(static_cast<int>(b) + 1);
    std::sort(blk.succ.begin(), blk.succ.end());
    blk.succ.erase(std::unique(blk.succ.begin(), blk.succ.end()), blk.succ.end());
  }
  return blocks;
}

// --- register allocation ---------------------------------------------------------------

namespace {

/// Register fields of an instruction that hold register references (MEM src0 is a region id).
template <typename F>
void for_each_reg_field(Instruction& in, F&& f) {
  if (is_reg(in.dst)) f(in.dst);
  if (in.group() != Group::Mem && is_reg(in.src0)) f(in.src0);
  if (is_reg(in.src1)) f(in.src1);
}

struct Bits {
  std::vector<std::uint64_t> w;
  explicit Bits(std::size_t n = 0) : w((n + 63) / 64, 0) {}
  void set(std::size_t i) { w[i / 64] |= std::uint64_t{1} << (i % 64); }
  void reset(std::size_t i) { w[i / 64] &= ~(std::uint64_t{1} << (i % 64)); }
  bool test(std::size_t i) const { return (w[i / 64] >> (i % 64)) & 1u; }
  bool operator==(const Bits&) const = default;
  template <typename F>
  void each(F&& f) const {
    for (std::size_t k = 0; k < w.size(); ++k) {
      std::uint64_t x = w[k];
      while (x != 0) {
        const int b = std::countr_zero(x);
        f(k * 64 + static_cast<std::size_t>(b));
        x &= x - 1;
      }
    }
  }
};

}  // namespace

Allocation allocate_registers(Program& p, const DeviceConfig& dev) {
  return allocate_registers(p, dev.micro.vector_registers, dev.micro.scalar_registers, dev.lmu_bytes);
}

Allocation allocate_registers(Program& p, int vector_registers, int scalar_registers, double lmu_bytes) {
  Allocation out;
  if (p.allocated) throw Error(ErrorKind::InvalidConfig, "program is already register-allocated");
  int nv = static_cast<int>(p.vreg_len.size());
  int ns = ctl::kReserved;
  for (const auto& in : p.code) {
    const auto a = reg_access(in);
    for (auto r : a.uses)
      if (is_vector(r)) nv = std::max(nv, reg_index(r) + 1);
      else if (is_scalar(r)) ns = std::max(ns, reg_index(r) + 1);
    for (auto r : a.defs)
      if (is_vector(r)) nv = std::max(nv, reg_index(r) + 1);
      else if (is_scalar(r)) ns = std::max(ns, reg_index(r) + 1);
  }
  p.vreg_len.resize(static_cast<std::size_t>(nv), 0);
  const double reg_bytes = lmu_bytes / vector_registers;
  for (int i = 0; i < nv; ++i)
    if (2.0 * p.vreg_len[static_cast<std::size_t>(i)] > reg_bytes)
      throw Error(ErrorKind::RegisterPressureExceeded, "vector v" + std::to_string(i) + " of " +
                                                           std::to_string(p.vreg_len[static_cast<std::size_t>(i)]) +
                                                           " elements exceeds one LMU register");

  const std::size_t nres = static_cast<std::size_t>(nv + ns);
  auto res_of = [&](std::uint16_t r) -> std::size_t {
    return is_scalar(r) ? static_cast<std::size_t>(nv + reg_index(r)) : static_cast<std::size_t>(reg_index(r));
  };

  auto blocks = build_cfg(p);
  std::vector<Bits> use(blocks.size(), Bits(nres)), def(blocks.size(), Bits(nres));
  std::vector<Bits> live_in(blocks.size(), Bits(nres)), live_out(blocks.size(), Bits(nres));
  std::vector<std::uint32_t> first(nres, std::numeric_limits<std::uint32_t>::max()), last(nres, 0);
  std::vector<bool> seen(nres, false);
  auto touch = [&](std::size_t r, std::uint32_t pc) {
    seen[r] = true;
    first[r] = std::min(first[r], pc);
    last[r] = std::max(last[r], pc);
  };

  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (std::uint32_t pc = blocks[b].begin; pc < blocks[b].end; ++pc) {
      const auto a = reg_access(p.code[pc]);
      for (auto r : a.uses)
        if (is_reg(r)) {
          const auto k = res_of(r);
          if (!def[b].test(k)) use[b].set(k);
          touch(k, pc);
        }
      for (auto r : a.defs)
        if (is_reg(r)) {
          def[b].set(res_of(r));
          touch(res_of(r), pc);
        }
    }
  }
  for (bool changed = true; changed;) {
    changed = false;
    for (std::size_t bi = blocks.size(); bi-- > 0;) {
      Bits o(nres);
      for (int s : blocks[bi].succ)
        for (std::size_t k = 0; k < o.w.size(); ++k) o.w[k] |= live_in[static_cast<std::size_t>(s)].w[k];
      Bits in(nres);
      for (std::size_t k = 0; k < in.w.size(); ++k) in.w[k] = use[bi].w[k] | (o.w[k] & ~def[bi].w[k]);
      if (!(o == live_out[bi]) || !(in == live_in[bi])) {
        live_out[bi] = std::move(o);
        live_in[bi] = std::move(in);
        changed = true;
      }
    }
  }
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    live_in[b].each([&](std::size_t r) { touch(r, blocks[b].begin); });
    live_out[b].each([&](std::size_t r) { touch(r, blocks[b].end - 1); });
  }

  for (std::size_t r = 0; r < nres; ++r) {
    if (!seen[r]) continue;
    const bool scalar = r >= static_cast<std::size_t>(nv);
    const int idx = scalar ? static_cast<int>(r) - nv : static_cast<int>(r);
    out.intervals.push_back({idx, scalar, first[r], last[r]});
  }

  auto scan = [&](bool scalar, int capacity, int reserved, std::vector<int>& map, int n) {
    map.assign(static_cast<std::size_t>(n), -1);
    std::vector<const LiveInterval*> todo;
    for (const auto& iv : out.intervals)
      if (iv.scalar == scalar) {
        if (scalar && iv.vreg < reserved) map[static_cast<std::size_t>(iv.vreg)] = iv.vreg;
        else todo.push_back(&iv);
      }
    std::sort(todo.begin(), todo.end(), [](const LiveInterval* a, const LiveInterval* b) {
      return a->start != b->start ? a->start < b->start : a->vreg < b->vreg;
    });
    std::vector<std::uint32_t> busy_until(static_cast<std::size_t>(capacity), 0);
    std::vector<bool> busy(static_cast<std::size_t>(capacity), false);
    int used = scalar ? reserved : 0;
    for (const auto* iv : todo) {
      int pick = -1;
      for (int r = reserved; r < capacity; ++r) {
        const auto k = static_cast<std::size_t>(r);
        if (busy[k] && busy_until[k] < iv->start) busy[k] = false;  // closed intervals: touching ends conflict
        if (!busy[k] && pick < 0) pick = r;
      }
      if (pick < 0)
        throw Error(ErrorKind::RegisterPressureExceeded,
                    std::string(scalar ? "scalar" : "vector") + " bank exhausted at pc " + std::to_string(iv->start) +
                        " (" + std::to_string(capacity) + " registers)");
      busy[static_cast<std::size_t>(pick)] = true;
      busy_until[static_cast<std::size_t>(pick)] = iv->end;
      map[static_cast<std::size_t>(iv->vreg)] = pick;
      used = std::max(used, pick + 1);
    }
    return used;
  };
  out.vector_used = scan(false, vector_registers, 0, out.vector_map, nv);
  out.scalar_used = scan(true, scalar_registers, ctl::kReserved, out.scalar_map, ns);

  for (auto& in : p.code)
    for_each_reg_field(in, [&](std::uint16_t& r) {
      const int idx = reg_index(r);
      r = is_scalar(r) ? sreg(out.scalar_map[static_cast<std::size_t>(idx)])
                       : vreg(out.vector_map[static_cast<std::size_t>(idx)]);
    });
  std::vector<std::uint32_t> plen(static_cast<std::size_t>(out.vector_used), 0);
  for (int i = 0; i < nv; ++i) {
    const int ph = out.vector_map[static_cast<std::size_t>(i)];
    if (ph >= 0) plen[static_cast<std::size_t>(ph)] = std::max(plen[static_cast<std::size_t>(ph)], p.vreg_len[static_cast<std::size_t>(i)]);
  }
  p.vreg_len = std::move(plen);
  p.allocated = true;
  return out;
}

// --- chaining ---------------------------------------------------------------------------

namespace {

struct Access {
  std::vector<std::uint32_t> writers;
  std::vector<std::uint32_t> readers;
  bool operator==(const Access&) const = default;
};
using State = std::vector<Access>;

void merge_sorted(std::vector<std::uint32_t>& into, const std::vector<std::uint32_t>& from) {
  if (from.empty()) return;
  std::vector<std::uint32_t> out;
  out.reserve(into.size() + from.size());
  std::set_union(into.begin(), into.end(), from.begin(), from.end(), std::back_inserter(out));
  into.swap(out);
}

void insert_sorted(std::vector<std::uint32_t>& v, std::uint32_t x) {
  auto it = std::lower_bound(v.begin(), v.end(), x);
  if (it == v.end() || *it != x) v.insert(it, x);
}

/// Tracked resources: every vector register plus the engine-writable scalars.
struct Resources {
  int nv = 0;
  int index(std::uint16_t r) const {
    if (is_vector(r)) return reg_index(r);
    if (r == ctl::TOKEN) return nv;
    if (r == ctl::EOS) return nv + 1;
    return -1;
  }
  int count() const { return nv + 2; }
};

bool needs_tag(const Program& p, std::uint32_t prod, std::uint32_t cons, bool vector, int kind /*0 RAW 1 WAR 2 WAW*/) {
  const Group gp = p.code[prod].group();
  const Group gc = p.code[cons].group();
  if (vector) return gp != gc;
  // scalars: every reader samples its value at dispatch
  if (gp == Group::Ctrl) return false;  // written at dispatch too
  if (kind == 0) return true;
  if (kind == 1) return false;
  return gc == Group::Ctrl || gp != gc;
}

template <typename Emit>
void transfer(const Program& p, std::uint32_t pc, State& st, const Resources& res, Emit&& emit) {
  const auto& in = p.code[pc];
  const auto a = reg_access(in);
  if (in.group() != Group::Ctrl)
    for (auto r : a.defs)
      if (is_scalar(r) && !ctl::engine_writable(r))
        throw Error(ErrorKind::InvalidConfig, std::string(opcode_name(in.op)) + " at pc " + std::to_string(pc) +
                                                  " writes a control register from an engine");
  for (auto r : a.uses) {
    const int k = res.index(r);
    if (k < 0) continue;
    for (auto w : st[static_cast<std::size_t>(k)].writers)
      if (needs_tag(p, w, pc, is_vector(r), 0)) emit(w, pc);
  }
  for (auto r : a.defs) {
    const int k = res.index(r);
    if (k < 0) continue;
    for (auto u : st[static_cast<std::size_t>(k)].readers)
      if (u != pc && needs_tag(p, u, pc, is_vector(r), 1)) emit(u, pc);
    for (auto w : st[static_cast<std::size_t>(k)].writers)
      if (w != pc && needs_tag(p, w, pc, is_vector(r), 2)) emit(w, pc);
  }
  for (auto r : a.uses) {
    const int k = res.index(r);
    if (k >= 0) insert_sorted(st[static_cast<std::size_t>(k)].readers, pc);
  }
  for (auto r : a.defs) {
    const int k = res.index(r);
    if (k < 0) continue;
    st[static_cast<std::size_t>(k)].writers.assign(1, pc);
    st[static_cast<std::size_t>(k)].readers.clear();
  }
}

}  // namespace

std::vector<ExplicitDep> cross_chain_dependencies(const Program& p) {
  Resources res;
  for (const auto& in : p.code) {
    const auto a = reg_access(in);
    for (auto r : a.uses)
      if (is_vector(r)) res.nv = std::max(res.nv, reg_index(r) + 1);
    for (auto r : a.defs)
      if (is_vector(r)) res.nv = std::max(res.nv, reg_index(r) + 1);
  }
  const auto blocks = build_cfg(p);
  std::vector<int> preds_count(blocks.size(), 0);
  std::vector<std::vector<int>> preds(blocks.size());
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (int s : blocks[b].succ) preds[static_cast<std::size_t>(s)].push_back(static_cast<int>(b));

  const auto nres = static_cast<std::size_t>(res.count());
  std::vector<State> in_state(blocks.size(), State(nres)), out_state(blocks.size(), State(nres));
  auto noop = [](std::uint32_t, std::uint32_t) {};
  for (bool changed = true; changed;) {
    changed = false;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      State st(nres);
      for (int pr : preds[b])
        for (std::size_t k = 0; k < nres; ++k) {
          merge_sorted(st[k].writers, out_state[static_cast<std::size_t>(pr)][k].writers);
          merge_sorted(st[k].readers, out_state[static_cast<std::size_t>(pr)][k].readers);
        }
      in_state[b] = st;
      for (std::uint32_t pc = blocks[b].begin; pc < blocks[b].end; ++pc) transfer(p, pc, st, res, noop);
      if (!(st == out_state[b])) {
        out_state[b] = std::move(st);
        changed = true;
      }
    }
  }
  std::vector<ExplicitDep> deps;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    State st = in_state[b];
    for (std::uint32_t pc = blocks[b].begin; pc < blocks[b].end; ++pc)
      transfer(p, pc, st, res, [&](std::uint32_t prod, std::uint32_t cons) { deps.emplace_back(prod, cons); });
  }
  std::sort(deps.begin(), deps.end());
  deps.erase(std::unique(deps.begin(), deps.end()), deps.end());
  return deps;
}

namespace {

struct UnionFind {
  std::vector<std::uint32_t> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0u); }
  std::uint32_t find(std::uint32_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

void check_acyclic(const Program& p, const std::vector<ExplicitDep>& deps) {
  const auto n = p.code.size();
  const auto blocks = build_cfg(p);
  std::vector<int> block_of(n);
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (auto pc = blocks[b].begin; pc < blocks[b].end; ++pc) block_of[pc] = static_cast<int>(b);
  std::vector<std::vector<std::uint32_t>> adj(n);
  std::vector<int> indeg(n, 0);
  auto edge = [&](std::uint32_t a, std::uint32_t b) {
    adj[a].push_back(b);
    ++indeg[b];
  };
  for (const auto& blk : blocks) {
    std::array<std::int64_t, kNumGroups> prev{-1, -1, -1, -1};
    for (auto pc = blk.begin; pc < blk.end; ++pc) {
      auto& pr = prev[static_cast<std::size_t>(p.code[pc].group())];
      if (pr >= 0) edge(static_cast<std::uint32_t>(pr), pc);
      pr = pc;
    }
  }
  for (const auto& [a, b] : deps) edge(a, b);
  std::vector<std::uint32_t> q;
  for (std::uint32_t i = 0; i < n; ++i)
    if (indeg[i] == 0) q.push_back(i);
  std::size_t done = 0;
  while (!q.empty()) {
    const auto x = q.back();
    q.pop_back();
    ++done;
    for (auto y : adj[x])
      if (--indeg[y] == 0) q.push_back(y);
  }
  if (done != n) {
    std::uint32_t at = 0;
    while (indeg[at] == 0) ++at;
    throw Error(ErrorKind::CyclicDependency, "dependency cycle through pc " + std::to_string(at));
  }
}

}  // namespace

ChainSet chain_instructions(const Program& p, const std::vector<ExplicitDep>& extra) {
  for (const auto& [a, b] : extra)
    if (a >= p.code.size() || b >= p.code.size()) throw Error(ErrorKind::IndexOutOfRange, "explicit dependency out of range");
  auto deps = cross_chain_dependencies(p);
  // loop-carried hazards point backwards; only same-iteration ones form the DAG
  std::vector<ExplicitDep> dag;
  {
    const auto blocks = build_cfg(p);
    std::vector<int> block_of(p.code.size());
    for (std::size_t b = 0; b < blocks.size(); ++b)
      for (auto pc = blocks[b].begin; pc < blocks[b].end; ++pc) block_of[pc] = static_cast<int>(b);
    for (const auto& d : deps)
      if (block_of[d.first] == block_of[d.second] && d.first < d.second) dag.push_back(d);
  }
  for (const auto& d : extra) dag.push_back(d);
  check_acyclic(p, dag);
  deps.insert(deps.end(), extra.begin(), extra.end());
  std::sort(deps.begin(), deps.end());
  deps.erase(std::unique(deps.begin(), deps.end()), deps.end());

  ChainSet cs;
  cs.program = p;
  const auto n = p.code.size();
  UnionFind uf(n);
  std::vector<std::int64_t> first_prod(n, -1);  // any producer of each consumer
  std::vector<bool> is_prod(n, false);
  for (const auto& [prod, cons] : deps) {
    is_prod[prod] = true;
    if (first_prod[cons] < 0) first_prod[cons] = prod;
    else uf.unite(static_cast<std::uint32_t>(first_prod[cons]), prod);
  }
  std::map<std::uint32_t, std::uint8_t> token_of_class;
  auto token = [&](std::uint32_t pc) {
    const auto root = uf.find(pc);
    auto it = token_of_class.find(root);
    if (it != token_of_class.end()) return it->second;
    const auto t = static_cast<std::uint8_t>(token_of_class.size() % kNumTokens + 1);
    token_of_class.emplace(root, t);
    return t;
  };
  for (std::uint32_t pc = 0; pc < n; ++pc) {
    auto& in = cs.program.code[pc];
    in.set = is_prod[pc] ? token(pc) : 0;
    in.wait = first_prod[pc] >= 0 ? token(static_cast<std::uint32_t>(first_prod[pc])) : 0;
    cs.chains[static_cast<std::size_t>(in.group())].push_back(pc);
  }
  return cs;
}

ChainSet compile(Program p, const DeviceConfig& dev) {
  allocate_registers(p, dev);
  return chain_instructions(p);
}

// --- binary ------------------------------------------------------------------------------

namespace {

using u128 = unsigned __int128;

bool field_used(Opcode op, int field) {  // 0 dst, 1 src0, 2 src1
  switch (op) {
    case Opcode::RdWeight:
    case Opcode::RdKv: return field != 0;
    case Opcode::WrKv:
    case Opcode::RdVec:
    case Opcode::WrVec:
    case Opcode::Add:
    case Opcode::Mul:
    case Opcode::Sample:
    case Opcode::Br: return field != 0 || op != Opcode::Br;
    case Opcode::Vmm:
    case Opcode::VmmAcc:
    case Opcode::Softmax:
    case Opcode::LayerNorm:
    case Opcode::RmsNorm:
    case Opcode::Gelu:
    case Opcode::Relu:
    case Opcode::Silu:
    case Opcode::Rope:
    case Opcode::RxPart:
    case Opcode::Addi: return field != 2;
    case Opcode::Embed:
    case Opcode::Movs: return field == 0;
    case Opcode::TxPart: return field == 1;
    case Opcode::Jmp:
    case Opcode::Hlt: return false;
  }
  return false;
}

struct Writer {
  std::vector<std::uint8_t>& b;
  void u8(std::uint8_t x) { b.push_back(x); }
  void u16(std::uint16_t x) { for (int i = 0; i < 2; ++i) b.push_back(static_cast<std::uint8_t>(x >> (8 * i))); }
  void u32(std::uint32_t x) { for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(x >> (8 * i))); }
  void u64(std::uint64_t x) { for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(x >> (8 * i))); }
  void i32(std::int32_t x) { u32(static_cast<std::uint32_t>(x)); }
  void i64(std::int64_t x) { u64(static_cast<std::uint64_t>(x)); }
  void f64(double x) { u64(std::bit_cast<std::uint64_t>(x)); }
  void str(const std::string& s) {
    u16(static_cast<std::uint16_t>(s.size()));
    b.insert(b.end(), s.begin(), s.end());
  }
};

struct Reader {
  const std::vector<std::uint8_t>& b;
  std::size_t at = 0;
  void need(std::size_t n) {
    if (b.size() - at < n || at > b.size())
      throw Error(ErrorKind::MalformedBinary, "truncated at byte " + std::to_string(at));
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t x = 0;
    for (int i = 0; i < n; ++i) x |= std::uint64_t{b[at + static_cast<std::size_t>(i)]} << (8 * i);
    at += static_cast<std::size_t>(n);
    return x;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const auto n = u16();
    need(n);
    std::string s(b.begin() + static_cast<std::ptrdiff_t>(at), b.begin() + static_cast<std::ptrdiff_t>(at + n));
    at += n;
    return s;
  }
};

}  // namespace

std::array<std::uint8_t, 16> encode_instruction(const Instruction& in) {
  auto field = [&](int f, std::uint16_t v) -> u128 { return field_used(in.op, f) ? v : 0; };
  u128 w = 0;
  w |= static_cast<u128>(static_cast<std::uint8_t>(in.group()) & 0xF);
  w |= static_cast<u128>(static_cast<std::uint8_t>(in.op)) << 4;
  w |= field(0, in.dst) << 12;
  w |= field(1, in.src0) << 28;
  w |= field(2, in.src1) << 44;
  w |= static_cast<u128>(in.imm & kImmMask) << 60;
  w |= static_cast<u128>(static_cast<std::uint8_t>(in.group())) << 108;
  w |= static_cast<u128>(in.wait & 0x3F) << 116;
  w |= static_cast<u128>(in.set & 0x3F) << 122;
  std::array<std::uint8_t, 16> out{};
  for (int i = 0; i < 16; ++i) out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(w >> (8 * i));
  return out;
}

Instruction decode_instruction(const std::uint8_t* word) {
  u128 w = 0;
  for (int i = 0; i < 16; ++i) w |= static_cast<u128>(word[i]) << (8 * i);
  const auto group = static_cast<std::uint8_t>(w & 0xF);
  const auto raw_op = static_cast<std::uint8_t>((w >> 4) & 0xFF);
  if (!is_valid_opcode(raw_op)) throw Error(ErrorKind::MalformedBinary, "unknown opcode " + std::to_string(raw_op));
  Instruction in;
  in.op = static_cast<Opcode>(raw_op);
  if (group != static_cast<std::uint8_t>(in.group()))
    throw Error(ErrorKind::MalformedBinary, std::string("group field does not match opcode ") + opcode_name(in.op));
  const auto chain = static_cast<std::uint8_t>((w >> 108) & 0xFF);
  if (chain != group) throw Error(ErrorKind::MalformedBinary, "chain field does not match group");
  auto field = [&](int f, int shift) -> std::uint16_t {
    const auto v = static_cast<std::uint16_t>((w >> shift) & 0xFFFF);
    if (!field_used(in.op, f)) {
      if (v != 0) throw Error(ErrorKind::MalformedBinary, "unused operand field is not zero");
      return kNoReg;
    }
    return v;
  };
  in.dst = field(0, 12);
  in.src0 = field(1, 28);
  in.src1 = field(2, 44);
  in.imm = static_cast<std::uint64_t>((w >> 60) & kImmMask);
  in.wait = static_cast<std::uint8_t>((w >> 116) & 0x3F);
  in.set = static_cast<std::uint8_t>((w >> 122) & 0x3F);
  return in;
}

std::vector<std::uint8_t> emit_binary(const ChainSet& cs) {
  const Program& p = cs.program;
  std::vector<std::uint8_t> bytes;
  bytes.reserve(64 + p.code.size() * 20);
  Writer w{bytes};
  for (char c : std::string("LPUB")) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kBinaryVersion);
  w.u32(static_cast<std::uint32_t>(p.code.size()));
  w.u32(static_cast<std::uint32_t>(p.regions.size()));
  w.u32(static_cast<std::uint32_t>(p.entries.size()));
  w.u32(static_cast<std::uint32_t>(p.vreg_len.size()));
  const auto& info = p.info;
  for (int x : {info.device_id, info.n_devices, info.num_layers, info.d_model, info.head_dim, info.vocab_size,
                info.vector_dim, info.mac_trees})
    w.i32(x);
  w.f64(info.rope_theta);
  w.u8(p.allocated ? 1 : 0);
  for (const auto& [name, pc] : p.entries) {
    w.u32(pc);
    w.str(name);
  }
  for (const auto& r : p.regions) {
    w.i32(r.id);
    w.u8(static_cast<std::uint8_t>(r.kind));
    w.u8(static_cast<std::uint8_t>(r.role));
    w.u8(r.per_layer ? 1 : 0);
    w.i32(r.head);
    for (std::int64_t x : {r.base, r.layer_stride, r.rows, r.cols, r.grid.row_tiles, r.grid.col_tiles, r.bytes}) w.i64(x);
    w.str(r.name);
  }
  for (auto len : p.vreg_len) w.u32(len);
  for (const auto& in : p.code) {
    const auto word = encode_instruction(in);
    bytes.insert(bytes.end(), word.begin(), word.end());
  }
  for (const auto& chain : cs.chains) {
    w.u32(static_cast<std::uint32_t>(chain.size()));
    for (auto pc : chain) w.u32(pc);
  }
  return bytes;
}

ChainSet disassemble(const std::vector<std::uint8_t>& bytes) {
  Reader r{bytes};
  r.need(4);
  if (std::memcmp(bytes.data(), "LPUB", 4) != 0) throw Error(ErrorKind::MalformedBinary, "bad magic");
  r.at = 4;
  if (r.u32() != kBinaryVersion) throw Error(ErrorKind::MalformedBinary, "unsupported version");
  const auto n_code = r.u32();
  const auto n_regions = r.u32();
  const auto n_entries = r.u32();
  const auto n_vregs = r.u32();
  // each section element needs at least a few bytes; reject absurd counts before allocating
  const std::size_t remaining = bytes.size() - r.at;
  if (n_code > remaining / 16 || n_regions > remaining || n_entries > remaining || n_vregs > remaining / 4)
    throw Error(ErrorKind::MalformedBinary, "section counts exceed file size");
  ChainSet cs;
  Program& p = cs.program;
  auto& info = p.info;
  for (int* x : {&info.device_id, &info.n_devices, &info.num_layers, &info.d_model, &info.head_dim, &info.vocab_size,
                 &info.vector_dim, &info.mac_trees})
    *x = r.i32();
  info.rope_theta = r.f64();
  const auto alloc = r.u8();
  if (alloc > 1) throw Error(ErrorKind::MalformedBinary, "bad allocation flag");
  p.allocated = alloc == 1;
  for (std::uint32_t i = 0; i < n_entries; ++i) {
    const auto pc = r.u32();
    p.entries.emplace_back(r.str(), pc);
  }
  for (std::uint32_t i = 0; i < n_regions; ++i) {
    Region g;
    g.id = r.i32();
    const auto kind = r.u8();
    const auto role = r.u8();
    const auto per_layer = r.u8();
    if (kind > static_cast<std::uint8_t>(RegionKind::Io) || role > static_cast<std::uint8_t>(TensorRole::LmHead) ||
        per_layer > 1)
      throw Error(ErrorKind::MalformedBinary, "bad region descriptor");
    g.kind = static_cast<RegionKind>(kind);
    g.role = static_cast<TensorRole>(role);
    g.per_layer = per_layer == 1;
    g.head = r.i32();
    for (std::int64_t* x : {&g.base, &g.layer_stride, &g.rows, &g.cols, &g.grid.row_tiles, &g.grid.col_tiles, &g.bytes})
      *x = r.i64();
    g.name = r.str();
    if (g.id != static_cast<int>(i)) throw Error(ErrorKind::MalformedBinary, "region ids out of order");
    p.regions.push_back(std::move(g));
  }
  p.vreg_len.resize(n_vregs);
  for (auto& len : p.vreg_len) len = r.u32();
  r.need(static_cast<std::size_t>(n_code) * 16);
  p.code.reserve(n_code);
  for (std::uint32_t i = 0; i < n_code; ++i) {
    p.code.push_back(decode_instruction(bytes.data() + r.at));
    r.at += 16;
  }
  for (const auto& [name, pc] : p.entries)
    if (pc > n_code) throw Error(ErrorKind::MalformedBinary, "entry '" + name + "' out of range");
  std::vector<bool> placed(n_code, false);
  for (int g = 0; g < kNumGroups; ++g) {
    const auto n = r.u32();
    if (n > n_code) throw Error(ErrorKind::MalformedBinary, "chain longer than program");
    auto& chain = cs.chains[static_cast<std::size_t>(g)];
    chain.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
      const auto pc = r.u32();
      if (pc >= n_code || placed[pc] || static_cast<int>(p.code[pc].group()) != g ||
          (!chain.empty() && pc <= chain.back()))
        throw Error(ErrorKind::MalformedBinary, "inconsistent chain section");
      placed[pc] = true;
      chain.push_back(pc);
    }
  }
  if (std::find(placed.begin(), placed.end(), false) != placed.end())
    throw Error(ErrorKind::MalformedBinary, "instruction missing from chains");
  if (r.at != bytes.size()) throw Error(ErrorKind::MalformedBinary, "trailing bytes");
  for (const auto& in : p.code)
    if (in.op == Opcode::Br || in.op == Opcode::Jmp)
      if (branch_target(in) >= n_code) throw Error(ErrorKind::MalformedBinary, "branch target out of range");
  return cs;
}

}  // namespace lpu
