import pytest

import lpu_sim


def test_bandwidth_matching_points():
    assert lpu_sim.derive_mac_trees(819e9, 64, 1e9) == 8
    assert lpu_sim.derive_mac_trees(3.28e12, 64, 1e9) == 32
    assert lpu_sim.derive_mac_trees(460e9, 64, 220e6) == 16


def test_presets_and_configs():
    assert "opt-1.3b" in lpu_sim.model_presets()
    assert "hbm3-x4" in lpu_sim.arch_presets()
    cfg = lpu_sim.model_config("tiny-2l")
    assert cfg["num_layers"] == 2
    arch = lpu_sim.arch_config("hbm3-x4")
    assert arch["hbm_bandwidth"] == pytest.approx(3.28e12)
    assert 130e9 <= lpu_sim.model_bytes("opt-66b") <= 134e9
    assert lpu_sim.kv_bytes("opt-66b", 0) == 0


def test_compile_and_disassemble():
    bins = lpu_sim.compile("tiny-rope", arch="hbm3-x1", devices=2)
    assert len(bins) == 2
    assert all(b[:4] == b"LPUB" for b in bins)
    text = lpu_sim.disassemble(bins[0])
    assert "TX_PART" in text and "HLT" in text


def test_errors_carry_their_kind():
    with pytest.raises(lpu_sim.LpuError, match="CapacityExceeded"):
        lpu_sim.compile("opt-66b", devices=1)
    with pytest.raises(lpu_sim.LpuError, match="MalformedBinary"):
        lpu_sim.disassemble(b"XXXX")
    with pytest.raises(lpu_sim.LpuError, match="InvalidSamplingParams"):
        lpu_sim.generate("tiny-2l", [1, 2], temperature=-1.0)


def test_run_reports_latency():
    r = lpu_sim.run("tiny-2l", arch="hbm3-x1", input_tokens=4, output_tokens=8)
    assert r["ms_per_token"] > 0
    assert 0 < r["utilization"] <= 1
    assert [s["position"] for s in r["samples"]] == sorted(s["position"] for s in r["samples"])


def test_sweep_speedup_starts_at_one():
    rows = lpu_sim.sweep("tiny-2l", arch="hbm3-x1", devices=[1, 2], input_tokens=4, output_tokens=4)
    assert [r["devices"] for r in rows] == [1, 2]
    assert rows[0]["speedup"] == 1


def test_generation_is_partition_independent():
    one = lpu_sim.generate("tiny-2l", [3, 1, 4], max_new_tokens=8, seed=5)
    two = lpu_sim.generate("tiny-2l", [3, 1, 4], max_new_tokens=8, seed=5, devices=2)
    assert len(one) == 8
    assert one == two
    sampled = lpu_sim.generate("tiny-2l", [3, 1, 4], max_new_tokens=8, seed=5, temperature=1.0, sample_seed=9)
    assert sampled == lpu_sim.generate("tiny-2l", [3, 1, 4], max_new_tokens=8, seed=5, temperature=1.0, sample_seed=9)
