#include "doctest.h"

#include <sstream>

#include "build_helpers.hpp"
#include "lpu/experiment.hpp"
#include "lpu/timing.hpp"

using namespace lpu;
using testing_support::build;

namespace {

void check_report(const SimReport& r, const DeviceConfig& dev) {
  CHECK(r.cycles > 0);
  CHECK(r.seconds == doctest::Approx(r.cycles / dev.freq_hz));
  CHECK(r.utilization <= 1.0);
  CHECK(r.utilization > 0.0);
  CHECK(r.seconds >= r.bytes_streamed / dev.hbm_bandwidth);
  CHECK(r.max_live_psum_sets == 1);  // output-stationary: one accumulating set at a time
  for (int e = 0; e < kNumEngines; ++e) {
    const auto eng = static_cast<Engine>(e);
    CAPTURE(engine_name(eng));
    CHECK(r.busy[static_cast<std::size_t>(e)] >= 0);
    CHECK(r.idle(eng) >= -1e-6);
    CHECK(r.busy[static_cast<std::size_t>(e)] + r.stall_total(eng) + r.idle(eng) == doctest::Approx(r.cycles));
  }
}

}  // namespace

TEST_CASE("per-token reports respect the roofline on every preset") {
  for (const char* arch : {"hbm3-x1", "hbm3-x4", "fpga-u55c"}) {
    const auto dev = device_preset(arch);
    for (const char* model : {"tiny-2l", "tiny-rope", "opt-1.3b"}) {
      CAPTURE(arch);
      CAPTURE(model);
      const auto cc = compile_cluster(model_preset(model), dev, 1);
      for (int pos : {0, 31, 200}) {
        const auto r = simulate_token(cc.chains[0].program, dev, pos);
        check_report(r, dev);
        CHECK(r.exposed_sync_cycles == 0);
      }
    }
  }
}

TEST_CASE("every weight tile streams once per token") {
  const auto cfg = model_preset("opt-1.3b");
  const auto dev = device_preset("hbm3-x4");
  const auto cc = compile_cluster(cfg, dev, 1);
  const auto r0 = simulate_token(cc.chains[0].program, dev, 0);
  const auto r1 = simulate_token(cc.chains[0].program, dev, 1000);
  const int v = dev.vector_dim, l = dev.mac_trees;
  auto tiles = [&](std::int64_t r, std::int64_t k) { return ((r + v - 1) / v) * ((k + l - 1) / l); };
  const std::int64_t d = cfg.d_model, f = cfg.ffn_dim;
  const std::int64_t weight_tiles =
      cfg.num_layers * (4 * tiles(d, d) + tiles(d, f) + tiles(f, d)) + tiles(d, cfg.vocab_size);
  CHECK(r0.tiles >= static_cast<std::uint64_t>(weight_tiles));
  CHECK(r0.bytes_streamed >= static_cast<double>(weight_tiles) * 2.0 * v * l);
  CHECK(r1.bytes_streamed > r0.bytes_streamed);
  CHECK(r1.tiles > r0.tiles);
  CHECK(r1.seconds > r0.seconds);
}

TEST_CASE("simulation is deterministic") {
  const auto dev = device_preset("hbm3-x4");
  const auto cc = compile_cluster(model_preset("tiny-rope"), dev, 1);
  std::ostringstream t1, t2;
  TimingOptions a, b;
  a.trace = &t1;
  b.trace = &t2;
  const auto r1 = simulate_token(cc.chains[0].program, dev, 77, nullptr, 0, a);
  const auto r2 = simulate_token(cc.chains[0].program, dev, 77, nullptr, 0, b);
  CHECK(r1.cycles == r2.cycles);
  CHECK(r1.bytes_streamed == r2.bytes_streamed);
  CHECK(r1.busy == r2.busy);
  CHECK(r1.stall == r2.stall);
  CHECK(t1.str() == t2.str());
  CHECK_FALSE(t1.str().empty());
}

TEST_CASE("timing with a functional state samples the interpreter's tokens") {
  for (const char* model : {"tiny-2l", "tiny-rope"}) {
    CAPTURE(model);
    const auto b = build(model, 1, 3);
    const int first = 17;
    RunOptions opt;
    opt.max_new_tokens = 4;
    const auto want = interpret(b.chained[0].program, b.images[0], {first}, opt).tokens;
    FuncDevice state(b.chained[0].program, b.images[0], SamplingParams{});
    int token = first;
    for (int pos = 0; pos < 4; ++pos) {
      const auto r = simulate_token(b.chained[0].program, b.dev, pos, &state, token);
      CHECK(r.token == want[static_cast<std::size_t>(pos)]);
      token = r.token;
    }
    CHECK_FALSE(state.nan_detected());
  }
}

TEST_CASE("positions outside the KV cache are rejected") {
  const auto dev = device_preset("hbm3-x1");
  const auto cc = compile_cluster(model_preset("tiny-2l"), dev, 1);
  const int max_seq = cc.model.max_seq;
  CHECK_NOTHROW(simulate_token(cc.chains[0].program, dev, max_seq - 1));
  for (int bad : {max_seq, max_seq + 5, -1}) {
    try {
      simulate_token(cc.chains[0].program, dev, bad);
      FAIL("expected IndexOutOfRange");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::IndexOutOfRange);
    }
  }
}

TEST_CASE("multi-device programs need the cluster model") {
  const auto dev = device_preset("hbm3-x1");
  const auto cc = compile_cluster(model_preset("tiny-2l"), dev, 2);
  CHECK_THROWS_AS(simulate_token(cc.chains[0].program, dev, 3), Error);
}
