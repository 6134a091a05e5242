#include "doctest.h"

#include <algorithm>
#include <random>
#include <sstream>

#include "lpu/mapper.hpp"
#include "properties.hpp"

using namespace lpu;

using testing_support::check_bijection;
using testing_support::kv_transpose_mismatches;

TEST_CASE("head partitioning") {
  const auto opt13 = model_preset("opt-1.3b");
  auto p = partition_model(opt13, 4);
  REQUIRE(p.devices.size() == 4);
  for (const auto& s : p.devices) CHECK(s.heads() == 8);
  p = partition_model(opt13, 1);
  CHECK(p.devices[0].heads() == 32);
  CHECK_FALSE(p.needs_sync());
  p = partition_model(model_preset("opt-66b"), 8);
  for (const auto& s : p.devices) CHECK(s.heads() == 9);
  CHECK_THROWS_AS(partition_model(opt13, 3), Error);
  try {
    partition_model(opt13, 16);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InvalidDeviceCount);
  }
}

TEST_CASE("partition ranges are disjoint and cover the model") {
  for (int n : {1, 2, 4, 8}) {
    const auto cfg = model_preset("opt-6.7b");
    const auto p = partition_model(cfg, n);
    int heads = 0, ffn = 0, vocab = 0;
    for (std::size_t i = 0; i < p.devices.size(); ++i) {
      const auto& s = p.devices[i];
      if (i > 0) {
        CHECK(s.head_begin == p.devices[i - 1].head_end);
        CHECK(s.ffn_begin == p.devices[i - 1].ffn_end);
        CHECK(s.vocab_begin == p.devices[i - 1].vocab_end);
      }
      heads += s.heads();
      ffn += s.ffn();
      vocab += s.vocab();
    }
    CHECK(heads == p.heads_padded);
    CHECK(ffn == p.ffn_padded);
    CHECK(vocab == p.vocab_padded);
    CHECK(p.heads_padded >= cfg.num_heads);
    CHECK(p.needs_sync() == (n > 1));
  }
}

TEST_CASE("tile grid arithmetic") {
  auto g = tile_tensor(2048, 8192, 64, 32);
  CHECK(g.row_tiles == 32);
  CHECK(g.col_tiles == 256);
  CHECK(g.count() == 8192);
  CHECK(tile_tensor(64, 32, 64, 32).count() == 1);
  g = tile_tensor(100, 100, 64, 32);
  CHECK(g.row_tiles == 2);
  CHECK(g.col_tiles == 4);
}

TEST_CASE("stream order is column-set major and channels rotate") {
  for (std::string name : {"tiny-2l", "opt-1.3b"}) {
    CAPTURE(name);
    const auto cfg = model_preset(name);
    const auto dev = device_preset("hbm3-x4");
    const auto map = map_device(partition_model(cfg, 1), cfg, dev, 0);
    CHECK(dev.tile_bytes() == 4096);
    for (const Region& r : map.regions()) {
      if (r.kind != RegionKind::TiledMatrix) continue;
      const auto tiles = map.stream_tiles(r, r.per_layer ? 0 : -1);
      REQUIRE(static_cast<std::int64_t>(tiles.size()) == r.grid.count());
      for (std::size_t i = 0; i < tiles.size(); ++i) {
        const Tile& t = tiles[i];
        CHECK(t.address % dev.burst_bytes == 0);
        CHECK(t.row_begin % dev.vector_dim == 0);
        CHECK(t.col_begin % dev.mac_trees == 0);
        CHECK(t.row_end - t.row_begin <= dev.vector_dim);
        CHECK(t.col_end - t.col_begin <= dev.mac_trees);
        if (i == 0) continue;
        const Tile& p = tiles[i - 1];
        const bool next_row = t.col_begin == p.col_begin && t.row_begin == p.row_end;
        const bool next_set = t.col_begin == p.col_end && t.row_begin == 0 && p.row_end >= r.rows;
        if (!(next_row || next_set)) FAIL("tile " << i << " of " << r.name << " out of stream order");
        if (t.channel != (p.channel + 1) % dev.num_channels) FAIL("channel did not rotate at tile " << i);
      }
    }
  }
}

TEST_CASE("every weight element has exactly one address and the image holds it") {
  for (std::string arch : {"hbm3-x1", "hbm3-x4"})
    for (std::string name : {"tiny-2l", "tiny-rope"}) {
      CAPTURE(arch);
      CAPTURE(name);
      const auto rep = check_bijection(name, arch, 11);
      CHECK(rep.placed == rep.elements);
      CHECK(rep.collisions == 0);
      CHECK(rep.wrong_values == 0);
      CHECK(rep.dirty_padding == 0);
    }
}

TEST_CASE("weight footprint of a large map") {
  const auto cfg = model_preset("opt-30b");
  const auto map = map_device(partition_model(cfg, 1), cfg, device_preset("hbm3-x4"), 0);
  CHECK(static_cast<double>(map.weight_bytes()) == doctest::Approx(60e9).epsilon(0.03));
  CHECK(map.kv_bytes() >= kv_bytes(cfg, cfg.max_seq));
}

TEST_CASE("KV regions are split by head") {
  const auto cfg = model_preset("opt-1.3b");
  const auto dev = device_preset("hbm3-x4");
  const auto part = partition_model(cfg, 4);
  const auto one = map_device(partition_model(cfg, 1), cfg, dev, 0);
  const auto quarter = map_device(part, cfg, dev, 2);
  CHECK(quarter.kv_bytes() * 4 == one.kv_bytes());
  CHECK_THROWS_AS(map_device(partition_model(model_preset("opt-66b"), 1), model_preset("opt-66b"), dev, 0),
                  CapacityExceeded);
  CHECK_NOTHROW(map_device(partition_model(model_preset("opt-66b"), 2), model_preset("opt-66b"), dev, 1));
}

TEST_CASE("Key writes stream back transposed, bit-exact") {
  std::uint64_t seed = 5;
  for (std::string arch : {"hbm3-x1", "hbm3-x4"})
    for (std::string name : {"tiny-2l", "tiny-rope"}) {
      CAPTURE(arch);
      CAPTURE(name);
      CHECK(kv_transpose_mismatches(name, arch, seed++) == 0);
    }
}

TEST_CASE("KV write addresses") {
  const auto cfg = model_preset("tiny-2l");
  const auto dev = device_preset("hbm3-x1");
  const auto map = map_device(partition_model(cfg, 1), cfg, dev, 0);
  CHECK(map.kv_write_address(1, 0, 0, 0).linear == map.key_region(0).base_for(1));
  const auto a = map.kv_write_address(0, 0, 4, 3).linear;
  const auto b = map.kv_write_address(0, 0, 5, 3).linear;
  CHECK(b - a == dev.vector_dim * 2);
  CHECK_THROWS_AS(map.kv_write_address(0, 0, cfg.max_seq, 0), Error);
  CHECK_THROWS_AS(map.kv_write_address(2, 0, 0, 0), Error);
  CHECK_THROWS_AS(map.kv_write_address(0, 2, 0, 0), Error);
}

TEST_CASE("map dump lists every tile of the first layer") {
  const auto cfg = model_preset("tiny-2l");
  const auto map = map_device(partition_model(cfg, 1), cfg, device_preset("hbm3-x1"), 0);
  std::ostringstream os;
  map.dump_csv(os, false);
  std::int64_t tiles = 0;
  for (const Region& r : map.regions())
    if (r.kind == RegionKind::TiledMatrix || r.kind == RegionKind::KeyCache || r.kind == RegionKind::ValueCache)
      tiles += r.grid.count();
  const auto text = os.str();
  CHECK(text.rfind("tensor,layer,tile_row,tile_col,device,channel,address\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == tiles + 1);
}
