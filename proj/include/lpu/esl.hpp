#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "lpu/arch.hpp"
#include "lpu/interp.hpp"
#include "lpu/timing.hpp"

namespace lpu {

// --- topology ---------------------------------------------------------------------------

struct RingConfig {
  int n_devices = 1;
  RingPartition partition = RingPartition::k1x1;
  std::vector<std::vector<int>> rings;  // device ids in ring order
  std::vector<int> ring_of;             // device id -> ring index
  std::vector<int> index_in_ring;       // device id -> position in its ring
  bool wrap = true;                     // false for lines
  int ports_per_device = 2;             // two full-duplex ports

  int ring_size() const { return rings.empty() ? 0 : static_cast<int>(rings.front().size()); }
  /// Directed links (from, to) actually wired.
  std::vector<std::pair<int, int>> links() const;
};

/// Throws IllegalPartition when the partition does not span n_devices.
RingConfig configure_rings(int n_devices, RingPartition partition);

enum class Direction { None, Cw, Ccw };
const char* direction_name(Direction d);

struct Route {
  int hops = 0;
  Direction dir = Direction::None;
};

/// Shortest path inside a ring (ties go clockwise); lines only route along the
/// line. Throws CrossRing.
Route route(int src, int dst, const RingConfig& rings);

// --- link timeline --------------------------------------------------------------------------

struct LinkParams {
  double bandwidth = 25e9;      // bytes/s per direction per port
  double hop_latency = 500e-9;  // seconds
  double freq_hz = 1e9;         // cycle unit of all times
  int packet_bytes = 256;
  double buffer_bytes = 64.0 * 1024;

  static LinkParams from(const DeviceConfig& dev);
  double serialization_cycles(double bytes) const { return bytes / bandwidth * freq_hz; }
  double hop_cycles() const { return hop_latency * freq_hz; }
};

/// One collective inside one ring: every member multicasts its column-task
/// results to every other member.
struct SyncJob {
  int ring = 0;
  std::vector<std::vector<double>> task_done;  // per ring member, completion cycle of each column task
  std::vector<std::int64_t> bytes;             // per ring member, total payload bytes
  int task_bytes = 64;
  std::vector<double> compute_end;  // per ring member
  double consumer_cycles = 0;       // >0: the next op consumes tasks as they arrive for this long
};

struct SyncResult {
  std::vector<double> last_arrival;  // per ring member
  std::vector<double> exposed;       // per ring member
  double exposed_max = 0;
  double total = 0;               // max over members of max(compute_end, last_arrival)
  double max_buffer_bytes = 0;    // staging occupancy high-water mark, any device
  std::uint64_t packets_sent = 0;
  /// delivered[src][dst] payload bytes received by dst from src (members indices)
  std::vector<std::vector<std::int64_t>> delivered;
  std::uint64_t duplicate_deliveries = 0;
};

/// Simulates several collectives (one per ring at most) on the shared set of
/// links. Throws BufferOverflow if a staging buffer exceeds params.buffer_bytes.
std::vector<SyncResult> simulate_syncs(const std::vector<SyncJob>& jobs, const RingConfig& rings,
                                       const LinkParams& params);
SyncResult sync_timeline(const SyncJob& job, const RingConfig& rings, const LinkParams& params);

// --- cluster runs ---------------------------------------------------------------------------

struct ClusterReport {
  double cycles = 0;
  double seconds = 0;
  double exposed_sync_cycles = 0;  // summed over syncs, slowest member of each
  double bytes_streamed = 0;       // all devices
  double utilization = 0;          // bytes_streamed / (devices * hbm_bandwidth * seconds)
  int syncs = 0;
  std::vector<SimReport> devices;
  int token = -1;
  int generated = 0;  // COUNT at the end of the run
};

/// One token at KV position `position` on every device of the cluster. Each
/// ring runs its own tensor-parallel group; programs[i] is the program of the
/// i-th member of every ring. Functional states (one per device, optional)
/// run in lockstep through one sync bus per ring.
ClusterReport simulate_cluster_token(const std::vector<const Program*>& programs, const ClusterConfig& cluster,
                                     int position, const std::vector<FuncDevice*>& states = {}, int token = 0,
                                     TimingOptions opt = {});

/// Same, but from the "summarize" entry over a whole prompt.
ClusterReport simulate_cluster_run(const std::vector<const Program*>& programs, const ClusterConfig& cluster,
                                   std::vector<FuncDevice*> states, const std::vector<int>& prompt, int max_new,
                                   std::vector<int>* tokens);

}  // namespace lpu
