#include "lpu/timing.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "lpu/error.hpp"

namespace lpu {

const char* engine_name(Engine e) {
  switch (e) {
    case Engine::Sma: return "SMA";
    case Engine::Sxe: return "SXE";
    case Engine::Vxe: return "VXE";
    case Engine::Net: return "NET";
  }
  return "?";
}

const char* stall_cause_name(StallCause c) {
  switch (c) {
    case StallCause::Operand: return "operand";
    case StallCause::Scoreboard: return "scoreboard";
    case StallCause::Sync: return "sync";
    case StallCause::Dispatch: return "dispatch";
  }
  return "?";
}

double SimReport::stall_total(Engine e) const {
  double s = 0;
  for (double x : stall[static_cast<std::size_t>(e)]) s += x;
  return s;
}

double SimReport::idle(Engine e) const {
  return cycles - busy[static_cast<std::size_t>(e)] - stall_total(e);
}

namespace {

constexpr std::size_t idx(Engine e) { return static_cast<std::size_t>(e); }

double ceil_cycles(std::int64_t n, int v) { return static_cast<double>((n + v - 1) / v); }

}  // namespace

void check_position(const Program& p, int position) {
  for (const auto& r : p.regions)
    if (r.kind == RegionKind::KeyCache && (position < 0 || position >= r.cols))
      throw Error(ErrorKind::IndexOutOfRange, "KV position " + std::to_string(position) + " outside [0, " +
                                                  std::to_string(r.cols) + ")");
}

DeviceTimer::DeviceTimer(const Program& p, const DeviceConfig& dev, std::uint32_t entry, FuncDevice* func,
                         SyncBus* bus, TimingOptions opt)
    : prog_(&p), dev_(dev), icp_(p, entry), func_(func), bus_(bus), opt_(opt) {
  v_ = p.info.vector_dim;
  l_ = p.info.mac_trees;
  if (v_ != dev.vector_dim || l_ != dev.mac_trees)
    throw Error(ErrorKind::InvalidConfig, "program was generated for a different SXE geometry");
  tile_xfer_ = static_cast<double>(dev.tile_bytes()) / dev.channel_bandwidth() * dev.freq_hz;
  latency_ = dev.micro.hbm_latency_ns * 1e-9 * dev.freq_hz;
  dispatch_step_ = 1.0 / std::max(1, dev.micro.dispatch_width);
  ch_free_.assign(static_cast<std::size_t>(dev.num_channels), 0.0);
  vregs_.resize(std::max<std::size_t>(64, p.vreg_len.size()));
}

DeviceTimer::RegTime& DeviceTimer::reg(std::uint16_t r) {
  const auto i = static_cast<std::size_t>(reg_index(r));
  if (i >= vregs_.size()) throw Error(ErrorKind::DecodeFault, "vector register out of range");
  return vregs_[i];
}

void DeviceTimer::trace(double t, Engine e, std::uint32_t pc) {
  if (opt_.trace == nullptr) return;
  *opt_.trace << t << ',' << engine_name(e) << ',' << pc << ',' << opcode_name(prog_->code[pc].op) << '\n';
}

void DeviceTimer::note_stall(Engine e, double gap, StallCause c) {
  if (gap > 0) stall_[idx(e)][static_cast<std::size_t>(c)] += gap;
}

void DeviceTimer::busy(Engine e, double start, double end) {
  if (end > start) busy_[idx(e)] += end - start;
}

double DeviceTimer::now() const { return std::max(t_disp_, last_done_); }

double DeviceTimer::channel_transfer(std::int64_t linear, std::int64_t bytes, double issue) {
  const std::int64_t tb = dev_.tile_bytes();
  const auto c = static_cast<std::int64_t>(ch_free_.size());
  double finish = issue;
  while (bytes > 0) {
    const std::int64_t chunk = std::min(bytes, tb - linear % tb);
    auto& f = ch_free_[static_cast<std::size_t>((linear / tb) % c)];
    const double t = static_cast<double>(chunk) / static_cast<double>(tb) * tile_xfer_;
    const double s = std::max(issue, f);
    f = s + t;
    busy_[idx(Engine::Sma)] += t / static_cast<double>(c);
    finish = std::max(finish, f);
    bytes_ += static_cast<double>(chunk);
    linear += chunk;
    bytes -= chunk;
  }
  return finish;
}

// --- MEM chain --------------------------------------------------------------------------

bool DeviceTimer::resolve_step() {
  if (memq_.empty()) return false;
  MemOp& m = memq_.front();
  const Instruction& in = prog_->code[m.d.pc];
  const Region& r = prog_->regions.at(in.src0);
  const std::int64_t tb = dev_.tile_bytes();
  if (!m.started) {
    m.start = std::max({m.disp, m.wait, in.wait ? tok_mem_[in.wait] : 0.0, mem_cursor_});
    m.started = true;
    m.done = m.start;
    mem_cursor_ = m.start;
    trace(m.start, Engine::Sma, m.d.pc);
  }
  const int layer = is_scalar(in.src1) ? static_cast<int>(m.d.sval[2]) : 0;
  bool progressed = false;
  switch (in.op) {
    case Opcode::RdWeight:
    case Opcode::RdKv:
    case Opcode::RdVec:
      if (in.op != Opcode::RdVec || !is_scalar(in.dst)) {
        const std::int64_t window = dev_.micro.oiu_prefetch_tiles;
        while (m.next_item < m.d.stream_count) {
          const std::int64_t g = m.d.stream_begin + m.next_item;
          while (!consumers_.empty() && consumers_.front().end + window <= g) consumers_.pop_front();
          if (consumers_.empty()) return progressed;  // the consumer is not bound yet
          const double issue = std::max({m.start, consumers_.front().bind, mem_cursor_});
          std::int64_t linear = 0, bytes = tb;
          if (in.op == Opcode::RdWeight) {
            linear = r.base_for(layer) + static_cast<std::int64_t>(in.imm) * tb;
          } else if (in.op == Opcode::RdKv) {
            linear = r.base_for(layer) + kv_stream_tile(r, m.d.pos, m.next_item, v_, l_) * tb;
          } else {
            const auto vi = VecImm::unpack(in.imm);
            linear = vec_address(r, is_scalar(in.src1) ? m.d.sval[2] : -1, vi.offset);
            bytes = std::int64_t{vi.len} * 2;
          }
          const double arrival = channel_transfer(linear, bytes, issue) + latency_;
          mem_cursor_ = issue;
          arrivals_.push_back(arrival);
          ++items_done_;
          m.done = std::max(m.done, arrival);
          ++m.next_item;
          progressed = true;
        }
      } else {
        const auto vi = VecImm::unpack(in.imm);
        const std::int64_t at = vec_address(r, m.d.sval[2], vi.offset);
        m.done = channel_transfer(at, 2, m.start) + latency_;
      }
      break;
    case Opcode::WrKv: {
      const bool key = r.kind == RegionKind::KeyCache;
      const std::int64_t hd = key ? r.rows : r.cols;
      const std::int64_t at = key ? region_element_linear(r, layer, 0, m.d.pos, v_, l_)
                                  : region_element_linear(r, layer, m.d.pos, 0, v_, l_);
      m.done = channel_transfer(at, hd * 2, m.start);
      break;
    }
    case Opcode::WrVec: {
      const auto vi = VecImm::unpack(in.imm);
      const std::int64_t at = vec_address(r, is_scalar(in.src1) ? m.d.sval[2] : -1, vi.offset);
      m.done = channel_transfer(at, is_scalar(in.dst) ? 2 : std::int64_t{vi.len} * 2, m.start);
      break;
    }
    default: throw Error(ErrorKind::DecodeFault, "non-MEM instruction in the MEM chain");
  }
  if (in.set != 0) {
    tok_mem_[in.set] = std::max(tok_mem_[in.set], m.done);
    auto& pend = tok_pending_mem_[in.set];
    if (!pend.empty() && pend.front() == m.d.seq) pend.pop_front();
  }
  last_done_ = std::max(last_done_, m.done);
  memq_.pop_front();
  return true;
}

double DeviceTimer::item_arrival(std::int64_t g) {
  while (items_done_ <= g)
    if (!resolve_step())
      throw Error(ErrorKind::Deadlock, "stream item " + std::to_string(g) + " is held behind an unbound consumer");
  return arrivals_.at(static_cast<std::size_t>(g - items_base_));
}

void DeviceTimer::resolve_all() {
  while (!memq_.empty())
    if (!resolve_step()) throw Error(ErrorKind::Deadlock, "MEM chain blocked at the end of the program");
}

double DeviceTimer::token_wait(std::uint8_t tok) {
  if (tok == 0) return 0;
  while (!tok_pending_mem_[tok].empty())
    if (!resolve_step()) throw Error(ErrorKind::Deadlock, "scoreboard token " + std::to_string(tok) + " setter is stuck");
  return std::max(tok_engine_[tok], tok_mem_[tok]);
}

// --- dispatch ------------------------------------------------------------------------------

DeviceTimer::Yield DeviceTimer::run() {
  if (pending_rx_) throw Error(ErrorKind::Deadlock, "RX_PART still waiting for its partial results");
  while (!icp_.halted()) {
    const Instruction& in = icp_.next();
    double t = t_disp_;
    if (icp_.dispatch_stalls()) t = std::max(t, token_wait(in.wait));
    t_disp_ = t + dispatch_step_;
    auto d = icp_.dispatch();
    if (!d) continue;
    if (in.op == Opcode::RxPart) {
      if (tx_.empty()) throw Error(ErrorKind::Deadlock, "RX_PART without a preceding TX_PART");
      pending_ = std::move(tx_.front());
      tx_.pop_front();
      pending_.rx_ready = std::max(t, token_wait(in.wait));
      pending_rx_ = *d;
      pending_rx_disp_ = t;
      return Yield::Sync;
    }
    if (func_ != nullptr) func_->execute(*d, icp_, bus_);
    process(*d, t);
  }
  resolve_all();
  return Yield::Halted;
}

void DeviceTimer::process(const DynInst& d, double disp) {
  const Instruction& in = prog_->code[d.pc];
  switch (in.group()) {
    case Group::Mem: {
      MemOp m;
      m.d = d;
      m.disp = disp;
      m.wait = in.wait ? tok_engine_[in.wait] : 0.0;
      if (in.set != 0) tok_pending_mem_[in.set].push_back(d.seq);
      memq_.push_back(std::move(m));
      break;
    }
    case Group::Comp: process_comp(d, disp); break;
    case Group::Net: process_net(d, disp); break;
    case Group::Ctrl: break;
  }
}

void DeviceTimer::process_comp(const DynInst& d, double disp) {
  const Instruction& in = prog_->code[d.pc];
  const bool sxe = runs_on_sxe(in.op);
  const Engine e = sxe ? Engine::Sxe : Engine::Vxe;
  double& oiu = oiu_free_[sxe ? 0 : 1];

  const double tagw = token_wait(in.wait);
  const RegAccess a = reg_access(in);
  double regw = 0;
  bool regw_sync = false;
  for (auto r : a.uses)
    if (is_vector(r) && reg(r).ready > regw) {
      regw = reg(r).ready;
      regw_sync = reg(r).from_sync;
    }
  for (auto r : a.defs)
    if (is_vector(r)) {
      const auto& rt = reg(r);
      if (std::max(rt.ready, rt.read_done) > regw) {
        regw = std::max(rt.ready, rt.read_done);
        regw_sync = false;
      }
    }
  const double bind = std::max({oiu, disp, tagw, regw});
  StallCause cause = StallCause::Dispatch;
  if (regw >= bind && regw > disp) cause = regw_sync ? StallCause::Sync : StallCause::Scoreboard;
  else if (tagw >= bind && tagw > disp) cause = StallCause::Scoreboard;
  if (d.stream_count > 0) consumers_.push_back({d.stream_begin, d.stream_begin + d.stream_count, bind});

  double& efree = free_[idx(e)];
  const double ready = std::max(bind, efree);
  note_stall(e, std::min(bind, ready) - efree, cause);
  double done = 0;
  double read_end = 0;
  std::vector<double> tasks;

  if (in.op == Opcode::Vmm || in.op == Opcode::VmmAcc) {
    const auto s = vmm_shape(in, d.pos, v_, l_);
    const double depth = dev_.micro.sxe_pipeline_depth;
    const double wb = dev_.micro.lmu_writeback_cycles;
    tasks.resize(static_cast<std::size_t>(s.col_tiles));
    double prev = ready - 1;
    double first = -1;
    for (std::int64_t c = 0; c < s.col_tiles; ++c) {
      double task_first = -1;
      for (std::int64_t rt = 0; rt < s.row_tiles; ++rt) {
        const double arr = item_arrival(d.stream_begin + c * s.row_tiles + rt);
        const double t = std::max(prev + 1, arr);
        note_stall(e, t - (prev + 1), StallCause::Operand);
        if (first < 0) first = t;
        if (task_first < 0) task_first = t;
        prev = t;
      }
      tasks[static_cast<std::size_t>(c)] = prev + depth + wb;
      // a psum set lives in the accumulators from its first tile to its last
      if (task_first >= 0) {
        std::erase_if(psum_open_, [&](double end) { return end < task_first; });
        psum_open_.push_back(prev);
        max_psum_ = std::max(max_psum_, static_cast<int>(psum_open_.size()));
      }
    }
    tiles_ += static_cast<std::uint64_t>(s.tiles());
    busy_[idx(e)] += static_cast<double>(s.tiles());
    done = tasks.empty() ? ready : tasks.back();
    if (in.op == Opcode::VmmAcc) {
      const double barr = item_arrival(d.stream_begin + s.tiles());
      done = std::max(done, barr + wb);
      for (auto& t : tasks) t = std::max(t, barr + wb);
    }
    efree = prev + 1;
    oiu = prev + 1;
    read_end = prev + 1;
    trace(first < 0 ? ready : first, e, d.pc);
  } else {
    double arr = ready;
    for (std::int64_t i = 0; i < d.stream_count; ++i) arr = std::max(arr, item_arrival(d.stream_begin + i));
    note_stall(e, arr - ready, StallCause::Operand);
    const auto o = OpImm::unpack(in.imm);
    const std::int64_t n = in.op == Opcode::Softmax ? dyn_len(o.len, d.pos) : std::max<std::uint32_t>(o.len, 1);
    const double dur = ceil_cycles(n, v_);
    busy(e, arr, arr + dur);
    efree = arr + dur;
    oiu = bind + 1;
    read_end = arr + dur;
    done = arr + dur + dev_.micro.vxe_fixed_latency;
    trace(arr, e, d.pc);
  }
  if (d.stream_count > 0) {
    const std::int64_t end = d.stream_begin + d.stream_count;
    while (items_base_ < end && !arrivals_.empty()) {
      arrivals_.pop_front();
      ++items_base_;
    }
  }
  for (auto r : a.uses)
    if (is_vector(r)) reg(r).read_done = std::max(reg(r).read_done, read_end);
  for (auto r : a.defs)
    if (is_vector(r)) {
      auto& rt = reg(r);
      rt.ready = done;
      rt.from_sync = false;
      rt.tasks = tasks;
    }
  if (in.set != 0) tok_engine_[in.set] = std::max(tok_engine_[in.set], done);
  last_done_ = std::max(last_done_, done);
}

void DeviceTimer::process_net(const DynInst& d, double disp) {
  const Instruction& in = prog_->code[d.pc];
  const double tagw = token_wait(in.wait);
  auto& src = reg(in.src0);
  const auto o = OpImm::unpack(in.imm);
  PendingSync ps;
  ps.mode = static_cast<NetMode>(o.aux);
  ps.len = o.len;
  ps.task_elems = l_;
  ps.task_done = src.tasks;
  if (ps.task_done.empty()) {
    ps.task_done.push_back(src.ready);
    ps.task_elems = static_cast<int>(o.len);
  }
  ps.compute_end = std::max(src.ready, ps.task_done.empty() ? 0.0 : ps.task_done.back());
  src.read_done = std::max(src.read_done, ps.compute_end);
  const double t = std::max(disp, tagw);
  note_stall(Engine::Net, t - free_[idx(Engine::Net)], StallCause::Scoreboard);
  free_[idx(Engine::Net)] = std::max(free_[idx(Engine::Net)], t);
  if (in.set != 0) tok_engine_[in.set] = std::max(tok_engine_[in.set], ps.compute_end);
  trace(t, Engine::Net, d.pc);
  tx_.push_back(std::move(ps));
}

void DeviceTimer::complete_sync(double last_arrival) {
  if (!pending_rx_) throw Error(ErrorKind::Deadlock, "no RX_PART is waiting");
  const DynInst d = *pending_rx_;
  pending_rx_.reset();
  const Instruction& in = prog_->code[d.pc];
  if (func_ != nullptr) func_->execute(d, icp_, bus_);
  double& nfree = free_[idx(Engine::Net)];
  const double start = std::max(pending_.rx_ready, nfree);
  const double ready = std::max({start, pending_.compute_end, last_arrival});
  note_stall(Engine::Net, ready - start, StallCause::Sync);
  // gather copies n slices; reduce folds n partials of len elements
  const std::int64_t lanes_work = pending_.len * prog_->info.n_devices;
  const double done = ready + ceil_cycles(lanes_work, v_);
  busy(Engine::Net, ready, done);
  nfree = done;
  exposed_ += std::max(0.0, last_arrival - pending_.compute_end);
  auto& dst = reg(in.dst);
  dst.ready = done;
  dst.from_sync = true;
  dst.tasks.clear();
  reg(in.src0).read_done = std::max(reg(in.src0).read_done, done);
  if (in.set != 0) tok_engine_[in.set] = std::max(tok_engine_[in.set], done);
  last_done_ = std::max(last_done_, done);
  trace(ready, Engine::Net, d.pc);
}

SimReport DeviceTimer::report() const {
  SimReport r;
  r.cycles = std::max(last_done_, t_disp_);
  for (double f : free_) r.cycles = std::max(r.cycles, f);
  for (double f : ch_free_) r.cycles = std::max(r.cycles, f);
  r.seconds = r.cycles / dev_.freq_hz;
  r.bytes_streamed = bytes_;
  r.busy = busy_;
  r.stall = stall_;
  r.utilization = r.seconds > 0 ? bytes_ / (dev_.hbm_bandwidth * r.seconds) : 0.0;
  r.exposed_sync_cycles = exposed_;
  r.max_live_psum_sets = max_psum_;
  r.instructions = icp_.dispatched() + icp_.ctrl_executed();
  r.tiles = tiles_;
  return r;
}

SimReport simulate_token(const Program& p, const DeviceConfig& dev, int position, FuncDevice* state, int token,
                         TimingOptions opt) {
  check_position(p, position);
  DeviceTimer t(p, dev, p.entry("generate"), state, nullptr, opt);
  auto& s = t.icp();
  s.set_scalar(ctl::POS, position);
  s.set_scalar(ctl::COUNT, 0);
  s.set_scalar(ctl::NOUT, 1);
  s.set_scalar(ctl::EOS, 0);
  s.set_scalar(ctl::TOKEN, token);
  if (t.run() != DeviceTimer::Yield::Halted)
    throw Error(ErrorKind::InvalidDeviceCount, "program synchronizes with peers; simulate it as a cluster");
  auto r = t.report();
  if (state != nullptr) r.token = static_cast<int>(s.scalar(ctl::TOKEN));
  return r;
}

}  // namespace lpu
