#include "doctest.h"

#include <array>
#include <functional>
#include <random>
#include <set>

#include "build_helpers.hpp"
#include "lpu/esl.hpp"
#include "lpu/experiment.hpp"
#include "properties.hpp"

using namespace lpu;
using testing_support::build;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error thrown");
  return ErrorKind::InvalidConfig;
}

LinkParams unit_link() {
  LinkParams p;  // 25 GB/s, 500 ns hops, 1 GHz cycles
  return p;
}

SyncJob uniform_job(int ring, int n, int tasks, double spacing, int task_bytes, double start = 0) {
  SyncJob j;
  j.ring = ring;
  j.task_bytes = task_bytes;
  for (int m = 0; m < n; ++m) {
    std::vector<double> done;
    for (int t = 0; t < tasks; ++t) done.push_back(start + (t + 1) * spacing);
    j.task_done.push_back(done);
    j.bytes.push_back(std::int64_t{tasks} * task_bytes);
    j.compute_end.push_back(done.back());
  }
  return j;
}

void check_conservation(const SyncJob& job, const SyncResult& r) {
  const auto n = job.bytes.size();
  CHECK(r.duplicate_deliveries == 0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t d = 0; d < n; ++d) {
      if (s == d)
        CHECK(r.delivered[s][d] == 0);
      else
        CHECK(r.delivered[s][d] == job.bytes[s]);
    }
}

}  // namespace

TEST_CASE("ring configurations") {
  const auto lines = configure_rings(8, RingPartition::k2x4);
  REQUIRE(lines.rings.size() == 2);
  CHECK(lines.rings[0] == std::vector<int>{0, 1, 2, 3});
  CHECK(lines.rings[1] == std::vector<int>{4, 5, 6, 7});
  CHECK_FALSE(lines.wrap);
  CHECK(lines.links().size() == 2 * 2 * 3);

  const auto pairs = configure_rings(8, RingPartition::k4x2);
  REQUIRE(pairs.rings.size() == 4);
  for (int r = 0; r < 4; ++r) CHECK(pairs.rings[static_cast<std::size_t>(r)] == std::vector<int>{2 * r, 2 * r + 1});

  CHECK(configure_rings(1, RingPartition::k1x1).links().empty());
  const auto ring8 = configure_rings(8, RingPartition::k1x8);
  CHECK(ring8.wrap);
  CHECK(ring8.links().size() == 16);
  for (const auto& [a, b] : ring8.links()) CHECK(((b - a + 8) % 8 == 1 || (a - b + 8) % 8 == 1));

  CHECK(kind_of([] { configure_rings(4, RingPartition::k1x8); }) == ErrorKind::IllegalPartition);
  CHECK(kind_of([] { configure_rings(2, RingPartition::k1x4); }) == ErrorKind::IllegalPartition);
}

TEST_CASE("routing") {
  const auto ring8 = configure_rings(8, RingPartition::k1x8);
  CHECK(route(0, 3, ring8).hops == 3);
  CHECK(route(0, 3, ring8).dir == Direction::Cw);
  CHECK(route(0, 4, ring8).dir == Direction::Cw);  // tie
  CHECK(route(0, 6, ring8).hops == 2);
  CHECK(route(0, 6, ring8).dir == Direction::Ccw);
  for (int d = 0; d < 8; ++d) {
    CHECK(route(d, d, ring8).hops == 0);
    CHECK(route(d, d, ring8).dir == Direction::None);
  }
  const auto lines = configure_rings(8, RingPartition::k2x4);
  CHECK(kind_of([&] { route(1, 6, lines); }) == ErrorKind::CrossRing);
  CHECK(route(4, 7, lines).hops == 3);
  CHECK(route(3, 0, lines).dir == Direction::Ccw);
  CHECK(kind_of([&] { route(0, 9, ring8); }) == ErrorKind::IndexOutOfRange);
}

TEST_CASE("single device has nothing to expose") {
  const auto rc = configure_rings(1, RingPartition::k1x1);
  const auto job = uniform_job(0, 1, 16, 10, 64);
  const auto r = sync_timeline(job, rc, unit_link());
  CHECK(r.exposed_max == 0);
  CHECK(r.packets_sent == 0);
  CHECK(r.total == job.compute_end[0]);
}

TEST_CASE("two-device 2 KiB shard") {
  const auto rc = configure_rings(2, RingPartition::k1x2);
  const LinkParams lp = unit_link();
  CHECK(lp.serialization_cycles(2048) == doctest::Approx(81.92));
  // everything ready at once: one shard of serialization plus one hop
  SyncJob j = uniform_job(0, 2, 32, 0, 64);
  j.compute_end = {0, 0};
  const auto r = sync_timeline(j, rc, lp);
  for (double a : r.last_arrival) CHECK(a == doctest::Approx(81.92 + 500));
  check_conservation(j, r);
  // a consumer at least that long hides it
  j.consumer_cycles = 81.92 + 500;
  CHECK(sync_timeline(j, rc, lp).exposed_max == doctest::Approx(0.0));
  j.consumer_cycles = 100;
  CHECK(sync_timeline(j, rc, lp).exposed_max == doctest::Approx(481.92));
}

TEST_CASE("back-to-back FC hides the whole exchange") {
  // per-task link load never exceeds per-task compute and the next FC outlasts the route
  const LinkParams lp = unit_link();
  std::mt19937_64 rng(17);
  for (RingPartition part : {RingPartition::k1x2, RingPartition::k1x4, RingPartition::k1x8, RingPartition::k2x4}) {
    const auto rc = configure_rings(partition_devices(part), part);
    const int n = rc.ring_size();
    for (int trial = 0; trial < 20; ++trial) {
      const int tasks = std::uniform_int_distribution<int>(8, 256)(rng);
      const int task_bytes = 64;
      const double link_load = (n - 1) * lp.serialization_cycles(task_bytes);
      const double spacing = link_load * std::uniform_real_distribution<double>(1.0, 4.0)(rng);
      SyncJob j = uniform_job(0, n, tasks, spacing, task_bytes);
      j.consumer_cycles = std::max<double>(
          tasks * spacing, (n - 1) * (lp.hop_cycles() + lp.serialization_cycles(lp.packet_bytes)));
      const auto r = sync_timeline(j, rc, lp);
      CAPTURE(std::string(partition_name(part)));
      CAPTURE(tasks);
      CAPTURE(spacing);
      CHECK(r.exposed_max == 0);
      check_conservation(j, r);
    }
  }
}

TEST_CASE("exchange time stays inside the overlap envelope") {
  const LinkParams lp = unit_link();
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const RingPartition part = std::array{RingPartition::k1x2, RingPartition::k1x4, RingPartition::k1x8,
                                          RingPartition::k2x4, RingPartition::k4x2}[trial % 5];
    const auto rc = configure_rings(partition_devices(part), part);
    const int n = rc.ring_size();
    SyncJob j;
    j.task_bytes = 64;
    double ce_max = 0;
    std::int64_t total_bytes = 0;
    for (int m = 0; m < n; ++m) {
      const int tasks = std::uniform_int_distribution<int>(1, 64)(rng);
      std::vector<double> done;
      double t = std::uniform_real_distribution<double>(0, 2000)(rng);
      for (int k = 0; k < tasks; ++k) done.push_back(t += std::uniform_real_distribution<double>(0, 40)(rng));
      j.task_done.push_back(done);
      j.bytes.push_back(std::int64_t{tasks} * 64 - std::uniform_int_distribution<int>(0, 63)(rng));
      j.compute_end.push_back(done.back());
      ce_max = std::max(ce_max, done.back());
      total_bytes += j.bytes.back();
    }
    const auto r = sync_timeline(j, rc, lp);
    CAPTURE(trial);
    check_conservation(j, r);
    CHECK(r.total >= ce_max);
    // no faster than one hop of the largest shard, no slower than sending everything serially after compute
    std::int64_t biggest = 0;
    for (auto b : j.bytes) biggest = std::max(biggest, b);
    const double latest_start = *std::max_element(j.compute_end.begin(), j.compute_end.end());
    CHECK(r.total >= lp.hop_cycles());
    CHECK(r.total <= latest_start + (n - 1) * (lp.hop_cycles() + lp.serialization_cycles(lp.packet_bytes)) +
                         lp.serialization_cycles(static_cast<double>(total_bytes)) * (n - 1) + 1e-6);
    for (std::size_t m = 0; m < r.exposed.size(); ++m) CHECK(r.exposed[m] >= 0);
    CHECK(r.max_buffer_bytes <= lp.buffer_bytes);
    (void)biggest;
  }
}

TEST_CASE("rings do not disturb each other") {
  const auto rc = configure_rings(8, RingPartition::k2x4);
  const LinkParams lp = unit_link();
  const SyncJob light = uniform_job(0, 4, 16, 30, 64);
  const SyncJob heavy = uniform_job(1, 4, 400, 1, 64);
  const auto alone = sync_timeline(light, rc, lp);
  const auto both = simulate_syncs({light, heavy}, rc, lp);
  CHECK(both[0].last_arrival == alone.last_arrival);
  CHECK(both[0].exposed == alone.exposed);
  check_conservation(heavy, both[1]);
}

TEST_CASE("staging buffer overflow is reported") {
  const auto rc = configure_rings(8, RingPartition::k1x8);
  LinkParams lp = unit_link();
  lp.buffer_bytes = 512;
  const SyncJob j = uniform_job(0, 8, 512, 0.1, 64);
  CHECK(kind_of([&] { sync_timeline(j, rc, lp); }) == ErrorKind::BufferOverflow);
  lp.buffer_bytes = 1e9;
  CHECK_NOTHROW(sync_timeline(j, rc, lp));
}

TEST_CASE("one-device cluster equals the single-device simulator") {
  const auto dev = device_preset("hbm3-x4");
  const auto cc = compile_cluster(model_preset("tiny-rope"), dev, 1);
  for (int pos : {0, 100}) {
    const auto a = simulate_token(cc.chains[0].program, dev, pos);
    const auto c = simulate_cluster_token(cc.programs(), cc.cluster, pos);
    CHECK(c.cycles == a.cycles);
    CHECK(c.bytes_streamed == a.bytes_streamed);
    CHECK(c.syncs == 0);
    CHECK(c.exposed_sync_cycles == 0);
  }
}

TEST_CASE("cluster timing respects the roofline and replicates across rings") {
  const auto dev = device_preset("hbm3-x4");
  const auto model = model_preset("opt-1.3b");
  for (RingPartition part : {RingPartition::k1x2, RingPartition::k1x4, RingPartition::k4x2}) {
    CAPTURE(std::string(partition_name(part)));
    const auto cc = compile_cluster(model, dev, partition_devices(part), part);
    const auto r = simulate_cluster_token(cc.programs(), cc.cluster, 500);
    CHECK(r.utilization <= 1.0);
    CHECK(r.seconds * cc.cluster.num_devices * dev.hbm_bandwidth >= r.bytes_streamed);
    CHECK(r.syncs == 2 * model.num_layers + 1);
    for (std::size_t g = 1; g < r.devices.size(); ++g)
      if (static_cast<int>(g) % cc.group_size() == 0) CHECK(r.devices[g].cycles == r.devices[0].cycles);
  }
}

TEST_CASE("all-gather leaves every device with the same tokens") {
  for (int n : {2, 4}) {
    CAPTURE(n);
    const auto b = build("tiny-2l", n, 9);
    const auto one = build("tiny-2l", 1, 9);
    const std::vector<int> prompt{3, 1, 4, 1, 5};
    RunOptions opt;
    opt.max_new_tokens = 6;
    const auto want = interpret(one.chained[0].program, one.images[0], prompt, opt).tokens;

    std::vector<FuncDevice> states;
    for (int i = 0; i < n; ++i)
      states.emplace_back(b.chained[static_cast<std::size_t>(i)].program, b.images[static_cast<std::size_t>(i)],
                          SamplingParams{}, i);
    std::vector<FuncDevice*> ptrs;
    for (auto& s : states) {
      s.capture_logits(true);
      ptrs.push_back(&s);
    }
    std::vector<int> got;
    const auto r = simulate_cluster_run(b.programs(), make_cluster(b.dev, n), ptrs, prompt, 6, &got);
    CHECK(got == want);
    CHECK(r.generated == 6);
    CHECK(r.syncs > 0);
    // the gathered logits and the written tokens are identical on every member
    for (int i = 0; i < n; ++i) {
      const auto& p = b.chained[static_cast<std::size_t>(i)].program;
      const Region* out = nullptr;
      for (const auto& reg : p.regions)
        if (reg.name == "io.output") out = &reg;
      REQUIRE(out != nullptr);
      for (int t = 0; t < 6; ++t)
        CHECK(states[static_cast<std::size_t>(i)].memory().load(out->base + 2 * t).bits == want[static_cast<std::size_t>(t)]);
      CHECK(states[static_cast<std::size_t>(i)].logits() == states[0].logits());
    }
    CHECK(states[0].logits().size() == 6);
  }
}

TEST_CASE("random exchanges conserve payload and stay hidden") {
  const auto rep = testing_support::esl_properties(100, 23);
  CHECK(rep.trials == 100);
  CHECK(rep.lost_or_duplicated == 0);
  CHECK(rep.exposed_when_hidden == 0);
}
