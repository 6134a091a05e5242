// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "build_helpers.hpp"
#include "lpu/experiment.hpp"
#include "oracle/reference_transformer.hpp"
#include "properties.hpp"

using namespace lpu;
using namespace testing_support;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

bool within(double got, double want, double rel) { return std::fabs(got - want) <= rel * want; }

// Every timed run seen by criteria 1-3, checked again by criterion 7.
struct RunLog {
  int runs = 0;
  int over_unity = 0;     // utilization > 1
  int below_roofline = 0; // faster than bytes / bandwidth
  void add(const ExperimentResult& r, const DeviceConfig& dev) {
    ++runs;
    over_unity += r.utilization > 1.0;
    for (const auto& s : r.samples) {
      ++runs;
      const double floor = s.bytes / (r.devices * dev.hbm_bandwidth);
      below_roofline += s.seconds < floor;
      over_unity += s.bytes / (r.devices * dev.hbm_bandwidth * s.seconds) > 1.0;
    }
  }
};

ExperimentResult run(const std::string& model, int devices, RunLog& log) {
  ExperimentSpec spec;
  spec.model = model;
  spec.arch = "hbm3-x4";
  spec.devices = devices;
  auto r = run_experiment(spec);
  log.add(r, device_preset(spec.arch));
  return r;
}

struct Footprint {
  ExperimentResult opt13, opt67, opt30, opt66x2;
};

void latency(Outcome& o, const Footprint& f) {
  o.detail << "opt-1.3b " << f.opt13.ms_per_token << " ms (1.25), opt-6.7b " << f.opt67.ms_per_token
           << " ms (4.62), opt-66b x2 " << f.opt66x2.ms_per_token << " ms (22.2), tolerance 20%";
  o.require(within(f.opt13.ms_per_token, 1.25, 0.20), "opt-1.3b");
  o.require(within(f.opt67.ms_per_token, 4.62, 0.20), "opt-6.7b");
  o.require(within(f.opt66x2.ms_per_token, 22.2, 0.20), "opt-66b x2");
}

void utilization(Outcome& o, const Footprint& f) {
  o.detail << "opt-1.3b " << f.opt13.utilization << ", opt-6.7b " << f.opt67.utilization << ", opt-30b "
           << f.opt30.utilization << ", opt-66b x2 " << f.opt66x2.utilization;
  o.require(f.opt30.utilization >= 0.85, "opt-30b >= 0.85");
  o.require(f.opt66x2.utilization >= 0.85, "opt-66b x2 >= 0.85");
  o.require(f.opt13.utilization >= 0.50 && f.opt13.utilization <= 0.75, "opt-1.3b in [0.50, 0.75]");
  o.require(f.opt13.utilization < f.opt67.utilization && f.opt67.utilization < f.opt30.utilization &&
                f.opt30.utilization < f.opt66x2.utilization,
            "strictly increasing with model size");
}

void scaling(Outcome& o, RunLog& log) {
  std::vector<double> ms;
  for (int n : {1, 2, 4, 8}) ms.push_back(run("gpt3-20b", n, log).ms_per_token);
  const double speedup8 = ms[0] / ms[3];
  double product = 1;
  for (std::size_t i = 1; i < ms.size(); ++i) product *= ms[i - 1] / ms[i];
  const double gain = std::cbrt(product);
  o.detail << "gpt3-20b ms/token";
  for (double m : ms) o.detail << ' ' << m;
  o.detail << ", 8-device speedup " << speedup8 << " (>= 5.0), mean doubling gain " << gain << " ([1.6, 1.9])";
  o.require(speedup8 >= 5.0, "8-device speedup");
  o.require(gain >= 1.6 && gain <= 1.9, "doubling gain band");
}

void mac_points(Outcome& o) {
  const int a = derive_mac_trees(819e9, 64, 1e9), b = derive_mac_trees(1.64e12, 64, 1e9);
  const int c = derive_mac_trees(3.28e12, 64, 1e9), d = derive_mac_trees(460e9, 64, 220e6);
  o.detail << "819 GB/s->" << a << ", 1.64 TB/s->" << b << ", 3.28 TB/s->" << c << ", 460 GB/s@220 MHz->" << d;
  o.require(a == 8 && b == 16 && c == 32 && d == 16, "exact points");
}

void footprints(Outcome& o) {
  const auto m = model_preset("opt-66b");
  const double mb = static_cast<double>(model_bytes(m)) / 1e9;
  const double kb = static_cast<double>(kv_bytes(m, 2048)) / 1e9;
  const auto dev = device_preset("hbm3-x4");
  bool one_rejects = false;
  try {
    compile_cluster(m, dev, 1);
  } catch (const CapacityExceeded&) {
    one_rejects = true;
  }
  bool two_accept = true;
  try {
    compile_cluster(m, dev, 2);
  } catch (const Error&) {
    two_accept = false;
  }
  o.detail << "opt-66b weights " << mb << " GB, KV(2048) " << kb << " GB, 1 device "
           << (one_rejects ? "rejects" : "accepts") << ", 2 devices " << (two_accept ? "accept" : "reject");
  o.require(mb >= 130 && mb <= 134, "weights in [130, 134] GB");
  o.require(kb >= 4.5 && kb <= 5.5, "KV in [4.5, 5.5] GB");
  o.require(one_rejects && two_accept, "capacity split");
}

std::vector<double> widen(const std::vector<Half>& v) {
  std::vector<double> out;
  for (Half h : v) out.push_back(h.to_double());
  return out;
}

void oracle_equivalence(Outcome& o) {
  const int tokens = 64;
  const double tol = std::ldexp(1.0, -7);
  int matched = 0;
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto b = build("tiny-2l", 1, seed);
    const auto prompt = random_prompt(b.model.vocab_size, 8, seed * 31);
    RunOptions opt;
    opt.max_new_tokens = tokens;
    opt.capture_logits = true;
    const auto dev = run_functional(b.programs(), b.images, prompt, opt);
    oracle::Reference<oracle::Fp16> half_ref(b.params);
    matched += dev.tokens == half_ref.generate(prompt, tokens) && dev.tokens.size() == tokens;

    // activations, teacher-forced on the device's tokens, against the widened oracle
    oracle::Reference<oracle::Fp16> fp16(b.params);
    oracle::Reference<oracle::Wide> wide(b.params);
    std::vector<int> feed = prompt;
    feed.insert(feed.end(), dev.tokens.begin(), dev.tokens.end() - 1);
    for (std::size_t pos = 0; pos < feed.size(); ++pos) {
      const auto lh = fp16.step(feed[pos], static_cast<int>(pos));
      const auto lw = wide.step(feed[pos], static_cast<int>(pos));
      for (std::size_t l = 0; l < fp16.hidden().size(); ++l)
        worst = std::max(worst, oracle::relative_error(fp16.hidden()[l], wide.hidden()[l]));
      if (pos + 1 >= prompt.size())
        worst = std::max(worst, oracle::relative_error(widen(dev.logits[pos + 1 - prompt.size()]), lw));
    }
  }
  o.detail << "tiny-2l greedy " << matched << "/10 seeds match for " << tokens << " tokens, worst activation error "
           << worst << " (<= " << tol << ")";
  o.require(matched == 10, "token match");
  o.require(worst <= tol, "activation error");
}

void properties(Outcome& o, const RunLog& log) {
  std::int64_t transpose = 0;
  std::uint64_t seed = 1;
  for (const char* arch : {"hbm3-x1", "hbm3-x4"})
    for (const char* model : {"tiny-2l", "tiny-rope"}) transpose += kv_transpose_mismatches(model, arch, seed++);
  int bijection_bad = 0;
  for (const char* arch : {"hbm3-x1", "hbm3-x4"})
    for (const char* model : {"tiny-2l", "tiny-rope"}) bijection_bad += !check_bijection(model, arch, 11).ok();
  int schedules = 0;
  schedules += schedule_mismatches("tiny-2l", 1, 25, 1);
  schedules += schedule_mismatches("tiny-rope", 1, 25, 2);
  schedules += schedule_mismatches("tiny-2l", 2, 25, 3);
  schedules += schedule_mismatches("tiny-rope", 2, 25, 4);
  const auto esl = esl_properties(100, 7);
  o.detail << "transpose mismatches " << transpose << ", bijection failures " << bijection_bad
           << ", schedule mismatches " << schedules << "/100, ESL lost/duplicated " << esl.lost_or_duplicated
           << " exposed-when-hidden " << esl.exposed_when_hidden << "/" << esl.trials << ", runs checked " << log.runs
           << " (utilization > 1: " << log.over_unity << ", below roofline: " << log.below_roofline << ")";
  o.require(transpose == 0, "transpose round trip");
  o.require(bijection_bad == 0, "memory-map bijection");
  o.require(schedules == 0, "chaining soundness");
  o.require(esl.lost_or_duplicated == 0 && esl.exposed_when_hidden == 0, "ESL conservation and hiding");
  o.require(log.runs > 0 && log.over_unity == 0 && log.below_roofline == 0, "roofline on every run");
}

void binary_round_trip(Outcome& o) {
  int checked = 0, differ = 0;
  std::vector<std::string> skipped;
  for (const auto& arch : device_preset_names())
    for (const auto& model : model_preset_names()) {
      bool done = false;
      for (int n : {1, 2, 4, 8}) {
        try {
          const auto cc = compile_cluster(model_preset(model), device_preset(arch), n);
          for (const auto& cs : cc.chains) {
            const auto bin = emit_binary(cs);
            differ += emit_binary(disassemble(bin)) != bin;
            ++checked;
          }
          done = true;
          break;
        } catch (const CapacityExceeded&) {
        }
      }
      if (!done) skipped.push_back(model + "@" + arch);
    }
  o.detail << checked << " binaries over every model x arch preset, " << differ << " differ";
  if (!skipped.empty()) {
    o.detail << "; no cluster of <= 8 devices holds";
    for (const auto& s : skipped) o.detail << ' ' << s;
  }
  o.require(checked > 0 && differ == 0, "byte-identical");
}

}  // namespace

int main() {
  using clock = std::chrono::steady_clock;
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<void(Outcome&)>& body) {
    const auto t0 = clock::now();
    Outcome o;
    try {
      body(o);
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(clock::now() - t0).count();
    std::printf("%s %d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.str().c_str(), secs);
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  };

  RunLog log;
  Footprint f;
  report(1, "latency", [&](Outcome& o) {
    f.opt13 = run("opt-1.3b", 1, log);
    f.opt67 = run("opt-6.7b", 1, log);
    f.opt66x2 = run("opt-66b", 2, log);
    latency(o, f);
  });
  report(2, "utilization", [&](Outcome& o) {
    f.opt30 = run("opt-30b", 1, log);
    utilization(o, f);
  });
  report(3, "scaling", [&](Outcome& o) { scaling(o, log); });
  report(4, "bandwidth matching", mac_points);
  report(5, "footprint", footprints);
  report(6, "functional oracle", oracle_equivalence);
  report(7, "properties", [&](Outcome& o) { properties(o, log); });
  report(8, "binary round trip", binary_round_trip);
  std::printf("%d of 8 criteria passed\n", 8 - failures);
  return failures == 0 ? 0 : 1;
}
