#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "lpu/arch.hpp"
#include "lpu/interp.hpp"
#include "lpu/isa.hpp"

namespace lpu {

enum class Engine { Sma = 0, Sxe = 1, Vxe = 2, Net = 3 };
constexpr int kNumEngines = 4;
const char* engine_name(Engine e);

enum class StallCause { Operand = 0, Scoreboard = 1, Sync = 2, Dispatch = 3 };
constexpr int kNumStallCauses = 4;
const char* stall_cause_name(StallCause c);

struct SimReport {
  double cycles = 0;
  double seconds = 0;
  double bytes_streamed = 0;  // HBM reads and writes
  std::array<double, kNumEngines> busy{};
  /// stall[engine][cause]; busy + stalls + idle = cycles for every engine
  std::array<std::array<double, kNumStallCauses>, kNumEngines> stall{};
  double utilization = 0;  // bytes_streamed / (hbm_bandwidth * seconds)
  double exposed_sync_cycles = 0;
  int max_live_psum_sets = 0;
  std::uint64_t instructions = 0;  // dispatched, CTRL included
  std::uint64_t tiles = 0;         // tiles through the SXE
  int token = -1;                  // sampled token when a functional state is attached

  double idle(Engine e) const;
  double stall_total(Engine e) const;
};

/// Column-task completion times of one row-parallel result, handed to the
/// link model when the device reaches the matching RX_PART.
struct PendingSync {
  NetMode mode = NetMode::Reduce;
  std::int64_t len = 0;           // elements per device
  std::vector<double> task_done;  // cycle each column task (l outputs) is written back
  int task_elems = 0;
  double compute_end = 0;
  double rx_ready = 0;  // RX dispatched and its inputs bound
};

struct TimingOptions {
  std::ostream* trace = nullptr;  // per-event log: cycle,engine,pc,opcode
};

/// Timing model of one device, optionally driving a functional state in
/// lockstep. Instructions are processed in dispatch order; HBM reads are
/// scheduled lazily once the OIU has bound the consumer whose prefetch
/// window covers them.
class DeviceTimer {
 public:
  DeviceTimer(const Program& p, const DeviceConfig& dev, std::uint32_t entry, FuncDevice* func = nullptr,
              SyncBus* bus = nullptr, TimingOptions opt = {});

  enum class Yield { Halted, Sync };
  /// Runs until HLT or an RX_PART that needs the cluster.
  Yield run();
  const PendingSync& pending_sync() const { return pending_; }
  /// Completes the outstanding RX_PART: all partial results for this device
  /// have arrived by `last_arrival`.
  void complete_sync(double last_arrival);

  Icp& icp() { return icp_; }
  SimReport report() const;
  double now() const;

 private:
  struct MemOp {
    DynInst d;
    double disp = 0;
    double wait = 0;  // engine-side setters, captured at dispatch
    bool started = false;
    double start = 0;
    std::int64_t next_item = 0;  // items already scheduled
    double done = 0;
  };
  struct Consumer {
    std::int64_t begin = 0, end = 0;
    double bind = 0;
  };
  struct RegTime {
    double ready = 0;      // last write completes
    double read_done = 0;  // last read completes
    bool from_sync = false;
    std::vector<double> tasks;  // column-task completion times of the last VMM writer
  };

  void process(const DynInst& d, double disp);
  void process_comp(const DynInst& d, double disp);
  void process_net(const DynInst& d, double disp);
  double token_wait(std::uint8_t tok);
  bool resolve_step();
  double item_arrival(std::int64_t g);
  void resolve_all();
  double channel_transfer(std::int64_t linear, std::int64_t bytes, double issue);
  RegTime& reg(std::uint16_t r);
  void note_stall(Engine e, double gap, StallCause c);
  void busy(Engine e, double start, double end);
  void trace(double t, Engine e, std::uint32_t pc);

  const Program* prog_;
  DeviceConfig dev_;
  Icp icp_;
  FuncDevice* func_;
  SyncBus* bus_;
  TimingOptions opt_;

  int v_, l_;
  double tile_xfer_;  // cycles per tile on one channel
  double latency_;    // HBM read latency, cycles
  double dispatch_step_;

  double t_disp_ = 0;
  double last_done_ = 0;
  std::array<double, kNumEngines> free_{};
  std::array<double, 2> oiu_free_{};  // SXE, VXE issue queues
  std::vector<double> ch_free_;
  std::vector<RegTime> vregs_;

  std::array<double, 64> tok_engine_{};  // COMP/NET setters, processed at dispatch
  std::array<double, 64> tok_mem_{};     // MEM setters, in MEM order
  std::array<std::deque<std::uint64_t>, 64> tok_pending_mem_;  // unresolved MEM setter seqs

  std::deque<MemOp> memq_;
  double mem_cursor_ = 0;   // in-order request issue
  std::int64_t items_done_ = 0;
  std::deque<double> arrivals_;  // arrival of stream item items_base_ + i
  std::int64_t items_base_ = 0;
  std::deque<Consumer> consumers_;
  std::deque<PendingSync> tx_;
  PendingSync pending_;
  std::optional<DynInst> pending_rx_;
  double pending_rx_disp_ = 0;

  double bytes_ = 0;
  std::uint64_t tiles_ = 0;
  std::vector<double> psum_open_;  // last-tile times of accumulating column tasks
  int max_psum_ = 0;
  double exposed_ = 0;
  std::array<double, kNumEngines> busy_{};
  std::array<std::array<double, kNumStallCauses>, kNumEngines> stall_{};
};

/// Throws IndexOutOfRange unless 0 <= position < max_seq.
void check_position(const Program& p, int position);

/// One token at KV position `position` from the "generate" entry. With a
/// functional state attached, its KV cache must hold `position` entries and
/// `token` is the input token; the report then carries the sampled token.
SimReport simulate_token(const Program& p, const DeviceConfig& dev, int position, FuncDevice* state = nullptr,
                         int token = 0, TimingOptions opt = {});

}  // namespace lpu
