#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <unordered_map>
#include <vector>

#include "lpu/isa.hpp"
#include "lpu/mapper.hpp"
#include "lpu/vxe.hpp"

namespace lpu {

// --- operand geometry shared by the functional and timing models --------------

/// len 0 means POS + 1.
inline std::int64_t dyn_len(std::uint32_t len, std::int64_t pos) { return len == 0 ? pos + 1 : len; }

struct VmmShape {
  std::int64_t rows = 0, cols = 0;
  std::int64_t row_tiles = 0, col_tiles = 0;
  std::int64_t tiles() const { return row_tiles * col_tiles; }
};
VmmShape vmm_shape(const Instruction& in, std::int64_t pos, int v, int l);

/// Stream items an instruction pushes (MEM) or pops (COMP).
std::int64_t stream_pushes(const Program& p, const Instruction& in, std::int64_t pos);
std::int64_t stream_pops(const Program& p, const Instruction& in, std::int64_t pos);

/// Index (tile_col * row_tiles + tile_row) of the j-th tile RD_KV streams from a KV region.
std::int64_t kv_stream_tile(const Region& r, std::int64_t pos, std::int64_t j, int v, int l);

/// Linear address of the first element an RD_VEC / WR_VEC touches.
std::int64_t vec_address(const Region& r, std::int64_t index, std::uint32_t offset);

// --- instruction control processor ---------------------------------------------

/// A dispatched instruction with the scalar state it was issued under.
struct DynInst {
  std::uint32_t pc = 0;
  std::uint64_t seq = 0;  // dispatch order
  std::int64_t pos = 0;
  std::array<std::int64_t, 3> sval{};  // scalar operand values (dst, src0, src1)
  std::int64_t stream_begin = 0;       // first stream position pushed / popped
  std::int64_t stream_count = 0;
  std::uint64_t sync_seq = 0;  // NET: index among this device's TX (or RX) instructions
};

/// Walks the program in order. CTRL instructions resolve at dispatch; every
/// other instruction leaves with a snapshot of the scalars it names.
class Icp {
 public:
  Icp(const Program& p, std::uint32_t pc);

  bool halted() const { return halted_; }
  std::uint32_t pc() const { return pc_; }
  const Instruction& next() const { return prog_->code.at(pc_); }
  /// True if the next instruction must wait for its tag before dispatch.
  bool dispatch_stalls() const;
  /// Dispatches the next instruction. Returns nothing for CTRL.
  std::optional<DynInst> dispatch();

  std::array<std::int64_t, 64>& scalars() { return s_; }
  std::int64_t scalar(std::uint16_t r) const { return s_.at(static_cast<std::size_t>(reg_index(r))); }
  void set_scalar(std::uint16_t r, std::int64_t v) { s_.at(static_cast<std::size_t>(reg_index(r))) = v; }
  std::uint64_t dispatched() const { return seq_; }
  std::uint64_t ctrl_executed() const { return ctrl_; }

 private:
  const Program* prog_;
  std::uint32_t pc_;
  bool halted_ = false;
  std::array<std::int64_t, 64> s_{};
  std::uint64_t seq_ = 0, ctrl_ = 0;
  std::int64_t pushes_ = 0, pops_ = 0;
  std::uint64_t tx_ = 0, rx_ = 0;
};

// --- functional state --------------------------------------------------------------

/// Partial vectors exchanged between the devices of one tensor-parallel group.
class SyncBus {
 public:
  explicit SyncBus(int n_devices) : n_(n_devices) {}
  void post(int device, std::uint64_t seq, std::vector<Half> data);
  bool ready(std::uint64_t seq) const;
  /// Reduce: exact sum in device order, rounded once. Gather: concatenation in device order.
  std::vector<Half> collect(std::uint64_t seq, NetMode mode, std::size_t len);
  int size() const { return n_; }

 private:
  int n_;
  struct Slot {
    std::vector<std::vector<Half>> parts;
    int posted = 0;
    int collected = 0;
  };
  std::map<std::uint64_t, Slot> slots_;
};

class FuncDevice {
 public:
  FuncDevice(const Program& p, DeviceMemory image, const SamplingParams& sampling, int device = 0);

  /// Executes an engine instruction. RX requires bus->ready(d.sync_seq).
  void execute(const DynInst& d, Icp& icp, SyncBus* bus);
  bool stream_ready(const DynInst& d) const;

  DeviceMemory& memory() { return mem_; }
  const DeviceMemory& memory() const { return mem_; }
  std::vector<std::vector<Half>>& vregs() { return vregs_; }
  bool nan_detected() const { return nan_; }
  void capture_logits(bool on) { capture_ = on; }
  std::vector<std::vector<Half>>& logits() { return logits_; }
  int device() const { return device_; }

 private:
  std::vector<Half> pop(std::int64_t position);
  void push(std::int64_t position, std::vector<Half> data);
  void check(const std::vector<Half>& v, std::size_t n);

  const Program* prog_;
  DeviceMemory mem_;
  Sampler sampler_;
  int device_;
  std::vector<std::vector<Half>> vregs_;
  std::unordered_map<std::int64_t, std::vector<Half>> stream_;
  std::int64_t pushed_ = 0;  // items pushed so far (MEM runs in order)
  bool nan_ = false;
  bool capture_ = false;
  std::vector<std::vector<Half>> logits_;
};

// --- whole-program execution --------------------------------------------------------

enum class Schedule { Sequential, Random };

struct RunOptions {
  SamplingParams sampling;
  int max_new_tokens = 16;
  bool capture_logits = false;
  Schedule schedule = Schedule::Sequential;
  std::uint64_t schedule_seed = 0;
};

struct RunResult {
  std::vector<int> tokens;
  bool nan_detected = false;
  std::vector<std::vector<Half>> logits;  // per generated token, first vocab_size entries (device 0)
  std::uint64_t dynamic_instructions = 0;  // dispatched engine instructions, device 0
  std::uint64_t ctrl_instructions = 0;
  std::array<std::uint64_t, kNumGroups> per_group{};
};

/// Writes the prompt into the input region and the host-set control scalars.
void prepare_run(const Program& p, DeviceMemory& mem, Icp& icp, const std::vector<int>& prompt, int max_new);

/// Runs the programs of one tensor-parallel group from the "summarize" entry
/// to HLT. Random schedules interleave the ICP and the per-group engine queues
/// of every device, honouring only the scoreboard tags, the stream and the
/// sync bus. Throws Deadlock when no agent can progress.
RunResult run_functional(const std::vector<const Program*>& programs, const std::vector<DeviceMemory>& images,
                         const std::vector<int>& prompt, const RunOptions& opt);
RunResult interpret(const Program& p, const DeviceMemory& image, const std::vector<int>& prompt,
                    const RunOptions& opt);

}  // namespace lpu
