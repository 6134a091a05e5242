#include "lpu/esl.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <memory>
#include <queue>
#include <tuple>

#include "lpu/error.hpp"

namespace lpu {

// --- topology -------------------------------------------------------------------------

RingConfig configure_rings(int n_devices, RingPartition partition) {
  if (partition_devices(partition) != n_devices)
    throw Error(ErrorKind::IllegalPartition, std::string("partition ") + partition_name(partition) + " does not span " +
                                                 std::to_string(n_devices) + " devices");
  RingConfig rc;
  rc.n_devices = n_devices;
  rc.partition = partition;
  rc.wrap = partition != RingPartition::k2x4 && partition != RingPartition::k4x2;
  const int size = partition_ring_size(partition);
  rc.ring_of.assign(static_cast<std::size_t>(n_devices), 0);
  rc.index_in_ring.assign(static_cast<std::size_t>(n_devices), 0);
  for (int r = 0; r * size < n_devices; ++r) {
    std::vector<int> ring;
    for (int i = 0; i < size; ++i) {
      const int dev = r * size + i;
      ring.push_back(dev);
      rc.ring_of[static_cast<std::size_t>(dev)] = r;
      rc.index_in_ring[static_cast<std::size_t>(dev)] = i;
    }
    rc.rings.push_back(std::move(ring));
  }
  return rc;
}

std::vector<std::pair<int, int>> RingConfig::links() const {
  std::vector<std::pair<int, int>> out;
  for (const auto& ring : rings) {
    const int n = static_cast<int>(ring.size());
    if (n < 2) continue;
    for (int i = 0; i < n; ++i) {
      if (wrap || i + 1 < n) out.emplace_back(ring[static_cast<std::size_t>(i)], ring[static_cast<std::size_t>((i + 1) % n)]);
      if (wrap || i > 0) out.emplace_back(ring[static_cast<std::size_t>(i)], ring[static_cast<std::size_t>((i + n - 1) % n)]);
    }
  }
  return out;
}

const char* direction_name(Direction d) {
  switch (d) {
    case Direction::None: return "-";
    case Direction::Cw: return "CW";
    case Direction::Ccw: return "CCW";
  }
  return "?";
}

Route route(int src, int dst, const RingConfig& rc) {
  const auto n_dev = static_cast<int>(rc.ring_of.size());
  if (src < 0 || dst < 0 || src >= n_dev || dst >= n_dev)
    throw Error(ErrorKind::IndexOutOfRange, "device id outside the cluster");
  if (rc.ring_of[static_cast<std::size_t>(src)] != rc.ring_of[static_cast<std::size_t>(dst)])
    throw Error(ErrorKind::CrossRing, "devices " + std::to_string(src) + " and " + std::to_string(dst) +
                                          " are in different rings");
  if (src == dst) return {0, Direction::None};
  const int n = rc.ring_size();
  const int a = rc.index_in_ring[static_cast<std::size_t>(src)];
  const int b = rc.index_in_ring[static_cast<std::size_t>(dst)];
  if (!rc.wrap) return b > a ? Route{b - a, Direction::Cw} : Route{a - b, Direction::Ccw};
  const int cw = ((b - a) % n + n) % n;
  const int ccw = n - cw;
  return cw <= ccw ? Route{cw, Direction::Cw} : Route{ccw, Direction::Ccw};
}

// --- link timeline ----------------------------------------------------------------------------

LinkParams LinkParams::from(const DeviceConfig& dev) {
  LinkParams p;
  p.bandwidth = dev.link_bandwidth;
  p.hop_latency = dev.link_hop_latency;
  p.freq_hz = dev.freq_hz;
  p.buffer_bytes = dev.sync_buffer_bytes;
  return p;
}

namespace {

struct Event {
  double time;
  std::uint64_t seq;
  int job;
  int src;      // ring member
  int packet;
  int bytes;
  int at;       // ring member holding the packet
  Direction dir;
  int hops_left;
  bool operator>(const Event& o) const { return std::tie(time, seq) > std::tie(o.time, o.seq); }
};

}  // namespace

std::vector<SyncResult> simulate_syncs(const std::vector<SyncJob>& jobs, const RingConfig& rc,
                                       const LinkParams& params) {
  std::vector<SyncResult> results(jobs.size());
  std::priority_queue<Event, std::vector<Event>, std::greater<>> q;
  std::uint64_t seq = 0;
  std::map<std::tuple<int, int, int>, double> link_free;  // (from, to, dir)
  std::map<int, std::vector<std::pair<double, double>>> occupancy;  // device -> (time, delta bytes)
  std::vector<std::vector<std::vector<std::vector<char>>>> seen(jobs.size());  // [job][src][dst][packet]

  for (std::size_t j = 0; j < jobs.size(); ++j) {
    const SyncJob& job = jobs[j];
    const auto& members = rc.rings.at(static_cast<std::size_t>(job.ring));
    const int n = static_cast<int>(members.size());
    if (static_cast<int>(job.task_done.size()) != n || static_cast<int>(job.bytes.size()) != n ||
        static_cast<int>(job.compute_end.size()) != n)
      throw Error(ErrorKind::InvalidConfig, "sync job does not match its ring");
    SyncResult& res = results[j];
    res.last_arrival = job.compute_end;
    res.exposed.assign(static_cast<std::size_t>(n), 0.0);
    res.delivered.assign(static_cast<std::size_t>(n), std::vector<std::int64_t>(static_cast<std::size_t>(n), 0));
    seen[j].assign(static_cast<std::size_t>(n), std::vector<std::vector<char>>(static_cast<std::size_t>(n)));
    for (int s = 0; s < n; ++s) {
      const std::int64_t total = job.bytes[static_cast<std::size_t>(s)];
      const auto& tasks = job.task_done[static_cast<std::size_t>(s)];
      if (total <= 0 || n < 2) continue;
      if (tasks.empty()) throw Error(ErrorKind::InvalidConfig, "sync member without column tasks");
      // rings forward clockwise for ring_size - 1 rounds; lines spread both ways to the ends
      int cw = 0, ccw = 0;
      if (rc.wrap) {
        cw = n - 1;
      } else {
        for (int d = 0; d < n; ++d) {
          if (d == s) continue;
          const Route r = route(members[static_cast<std::size_t>(s)], members[static_cast<std::size_t>(d)], rc);
          (r.dir == Direction::Cw ? cw : ccw) = std::max(r.dir == Direction::Cw ? cw : ccw, r.hops);
        }
      }
      const auto npk = static_cast<int>((total + params.packet_bytes - 1) / params.packet_bytes);
      for (auto& row : seen[j][static_cast<std::size_t>(s)]) row.assign(static_cast<std::size_t>(npk), 0);
      for (int k = 0; k < npk; ++k) {
        const std::int64_t end = std::min<std::int64_t>(total, std::int64_t{k + 1} * params.packet_bytes);
        const auto bytes = static_cast<int>(end - std::int64_t{k} * params.packet_bytes);
        const auto task = std::min<std::size_t>(static_cast<std::size_t>((end - 1) / job.task_bytes), tasks.size() - 1);
        const double ready = tasks[task];
        if (cw > 0) q.push({ready, seq++, static_cast<int>(j), s, k, bytes, s, Direction::Cw, cw});
        if (ccw > 0) q.push({ready, seq++, static_cast<int>(j), s, k, bytes, s, Direction::Ccw, ccw});
        res.packets_sent += static_cast<std::uint64_t>((cw > 0) + (ccw > 0));
      }
    }
  }

  const double hop = params.hop_cycles();
  while (!q.empty()) {
    const Event e = q.top();
    q.pop();
    const SyncJob& job = jobs[static_cast<std::size_t>(e.job)];
    SyncResult& res = results[static_cast<std::size_t>(e.job)];
    const auto& members = rc.rings[static_cast<std::size_t>(job.ring)];
    const int n = static_cast<int>(members.size());
    const int next = e.dir == Direction::Cw ? (e.at + 1) % n : (e.at + n - 1) % n;
    const int from = members[static_cast<std::size_t>(e.at)];
    const int to = members[static_cast<std::size_t>(next)];
    double& free = link_free[{from, to, static_cast<int>(e.dir)}];
    const double start = std::max(e.time, free);
    const double ser = params.serialization_cycles(e.bytes);
    free = start + ser;
    auto& occ = occupancy[from];
    occ.emplace_back(e.time, e.bytes);
    occ.emplace_back(start, -e.bytes);
    const double arrival = start + hop + ser;
    auto& mark = seen[static_cast<std::size_t>(e.job)][static_cast<std::size_t>(e.src)][static_cast<std::size_t>(next)];
    if (mark[static_cast<std::size_t>(e.packet)]++) ++res.duplicate_deliveries;
    res.delivered[static_cast<std::size_t>(e.src)][static_cast<std::size_t>(next)] += e.bytes;
    auto& last = res.last_arrival[static_cast<std::size_t>(next)];
    last = std::max(last, arrival);
    if (e.hops_left > 1) q.push({start + hop, seq++, e.job, e.src, e.packet, e.bytes, next, e.dir, e.hops_left - 1});
  }

  double high = 0;
  for (auto& [dev, occ] : occupancy) {
    std::sort(occ.begin(), occ.end());
    double cur = 0;
    for (const auto& [t, delta] : occ) {
      cur += delta;
      high = std::max(high, cur);
    }
  }
  if (high > params.buffer_bytes)
    throw Error(ErrorKind::BufferOverflow, "staging buffer needs " + std::to_string(static_cast<long long>(high)) +
                                               " B, have " + std::to_string(static_cast<long long>(params.buffer_bytes)));
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    SyncResult& res = results[j];
    const SyncJob& job = jobs[j];
    res.max_buffer_bytes = high;
    for (std::size_t m = 0; m < res.last_arrival.size(); ++m) {
      const double ce = job.compute_end[m];
      res.exposed[m] = std::max(0.0, res.last_arrival[m] - (ce + job.consumer_cycles));
      res.exposed_max = std::max(res.exposed_max, res.exposed[m]);
      res.total = std::max(res.total, std::max(ce, res.last_arrival[m]));
    }
  }
  return results;
}

SyncResult sync_timeline(const SyncJob& job, const RingConfig& rings, const LinkParams& params) {
  return simulate_syncs({job}, rings, params).front();
}

// --- cluster runs -----------------------------------------------------------------------------

namespace {

ClusterReport run_lockstep(const std::vector<const Program*>& programs, const ClusterConfig& cluster,
                           const std::vector<FuncDevice*>& states, const std::string& entry,
                           const std::function<void(int, Icp&)>& setup, TimingOptions opt) {
  const RingConfig rc = configure_rings(cluster.num_devices, cluster.partition);
  const int size = rc.ring_size();
  if (static_cast<int>(programs.size()) != size)
    throw Error(ErrorKind::InvalidDeviceCount, "expected " + std::to_string(size) + " programs, one per ring member");
  if (!states.empty() && static_cast<int>(states.size()) != cluster.num_devices)
    throw Error(ErrorKind::InvalidDeviceCount, "one functional state per device");
  std::vector<std::unique_ptr<SyncBus>> buses;
  for (std::size_t r = 0; r < rc.rings.size(); ++r) buses.push_back(std::make_unique<SyncBus>(size));
  std::vector<std::unique_ptr<DeviceTimer>> timers;
  for (int g = 0; g < cluster.num_devices; ++g) {
    const int member = rc.index_in_ring[static_cast<std::size_t>(g)];
    const Program& p = *programs[static_cast<std::size_t>(member)];
    FuncDevice* f = states.empty() ? nullptr : states[static_cast<std::size_t>(g)];
    SyncBus* bus = size > 1 ? buses[static_cast<std::size_t>(rc.ring_of[static_cast<std::size_t>(g)])].get() : nullptr;
    timers.push_back(std::make_unique<DeviceTimer>(p, cluster.device, p.entry(entry), f, bus, opt));
    setup(g, timers.back()->icp());
  }
  const LinkParams lp = LinkParams::from(cluster.device);
  ClusterReport rep;
  std::vector<DeviceTimer::Yield> state(timers.size());
  for (;;) {
    int halted = 0;
    for (std::size_t g = 0; g < timers.size(); ++g) {
      if (timers[g]->icp().halted() && state[g] == DeviceTimer::Yield::Halted) {
        ++halted;
        continue;
      }
      state[g] = timers[g]->run();
      if (state[g] == DeviceTimer::Yield::Halted) ++halted;
    }
    if (halted == static_cast<int>(timers.size())) break;
    if (halted != 0) throw Error(ErrorKind::Deadlock, "devices disagree on the number of synchronizations");
    std::vector<SyncJob> jobs;
    for (std::size_t r = 0; r < rc.rings.size(); ++r) {
      SyncJob job;
      job.ring = static_cast<int>(r);
      for (int g : rc.rings[r]) {
        const PendingSync& ps = timers[static_cast<std::size_t>(g)]->pending_sync();
        job.task_done.push_back(ps.task_done);
        job.bytes.push_back(ps.len * 2);
        job.task_bytes = ps.task_elems * 2;
        job.compute_end.push_back(ps.compute_end);
      }
      jobs.push_back(std::move(job));
    }
    const auto results = simulate_syncs(jobs, rc, lp);
    double exposed = 0;
    for (std::size_t r = 0; r < rc.rings.size(); ++r) {
      for (std::size_t m = 0; m < rc.rings[r].size(); ++m)
        timers[static_cast<std::size_t>(rc.rings[r][m])]->complete_sync(results[r].last_arrival[m]);
      exposed = std::max(exposed, results[r].exposed_max);
    }
    rep.exposed_sync_cycles += exposed;
    ++rep.syncs;
  }
  for (auto& t : timers) {
    rep.devices.push_back(t->report());
    rep.cycles = std::max(rep.cycles, rep.devices.back().cycles);
    rep.bytes_streamed += rep.devices.back().bytes_streamed;
  }
  rep.seconds = rep.cycles / cluster.device.freq_hz;
  rep.utilization =
      rep.seconds > 0 ? rep.bytes_streamed / (cluster.num_devices * cluster.device.hbm_bandwidth * rep.seconds) : 0.0;
  if (!states.empty()) rep.token = static_cast<int>(timers.front()->icp().scalar(ctl::TOKEN));
  rep.generated = static_cast<int>(timers.front()->icp().scalar(ctl::COUNT));
  return rep;
}

}  // namespace

ClusterReport simulate_cluster_token(const std::vector<const Program*>& programs, const ClusterConfig& cluster,
                                     int position, const std::vector<FuncDevice*>& states, int token,
                                     TimingOptions opt) {
  for (const auto* p : programs) check_position(*p, position);
  return run_lockstep(programs, cluster, states, "generate",
                      [&](int, Icp& icp) {
                        icp.set_scalar(ctl::POS, position);
                        icp.set_scalar(ctl::COUNT, 0);
                        icp.set_scalar(ctl::NOUT, 1);
                        icp.set_scalar(ctl::EOS, 0);
                        icp.set_scalar(ctl::TOKEN, token);
                      },
                      opt);
}

ClusterReport simulate_cluster_run(const std::vector<const Program*>& programs, const ClusterConfig& cluster,
                                   std::vector<FuncDevice*> states, const std::vector<int>& prompt, int max_new,
                                   std::vector<int>* tokens) {
  const RingConfig rc = configure_rings(cluster.num_devices, cluster.partition);
  std::vector<std::unique_ptr<DeviceMemory>> scratch;
  auto rep = run_lockstep(programs, cluster, states, "summarize",
                          [&](int g, Icp& icp) {
                            const int member = rc.index_in_ring[static_cast<std::size_t>(g)];
                            const Program& p = *programs[static_cast<std::size_t>(member)];
                            if (!states.empty()) {
                              prepare_run(p, states[static_cast<std::size_t>(g)]->memory(), icp, prompt, max_new);
                            } else {
                              const Region& io = p.regions.back();
                              scratch.push_back(std::make_unique<DeviceMemory>(io.base + io.bytes));
                              prepare_run(p, *scratch.back(), icp, prompt, max_new);
                            }
                          },
                          {});
  if (tokens != nullptr && !states.empty()) {
    tokens->clear();
    const Program& p = *programs.front();
    for (const auto& r : p.regions)
      if (r.kind == RegionKind::Io && r.name == "io.output")
        for (int i = 0; i < rep.generated; ++i) {
          const auto tok = states.front()->memory().load(r.base + 2 * i).bits;
          tokens->push_back(tok);
        }
  }
  return rep;
}

}  // namespace lpu
