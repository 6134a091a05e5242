#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "lpu/codegen.hpp"
#include "lpu/experiment.hpp"
#include "lpu/interp.hpp"
#include "oracle/reference_transformer.hpp"

using namespace lpu;

namespace {

// above this the reference transformer is too slow to be useful
constexpr std::int64_t kOracleParamLimit = 50'000'000;

struct Common {
  std::string model = "opt-1.3b";
  std::string arch = "hbm3-x4";
  int devices = 1;
  std::string partition;
  RingPartition part() const { return partition.empty() ? default_partition(devices) : parse_partition(partition); }
};

void add_common(CLI::App* c, Common& o) {
  c->add_option("--model", o.model, "model preset or JSON file")->capture_default_str();
  c->add_option("--arch", o.arch, "arch preset or JSON file")->capture_default_str();
  c->add_option("--partition", o.partition, "ring partition: 1x8, 2x4, 4x2, 1x4, 1x2, 1x1");
}

ModelConfig load_model(const std::string& s) {
  return std::filesystem::exists(s) ? load_model_config(s) : model_preset(s);
}

DeviceConfig load_arch(const std::string& s) {
  return std::filesystem::exists(s) ? load_device_config(s) : device_preset(s);
}

std::string artifact_stem(const CompiledCluster& cc, int member) {
  std::ostringstream os;
  os << cc.model.name << '_' << cc.cluster.device.name << "_n" << cc.cluster.num_devices << "_d" << member;
  return os.str();
}

int cmd_compile(const Common& o, const std::string& out_dir) {
  const CompiledCluster cc = compile_cluster(load_model(o.model), load_arch(o.arch), o.devices, o.part());
  std::filesystem::create_directories(out_dir);
  std::cout << "member,instructions,mem,comp,net,ctrl,bytes\n";
  for (int i = 0; i < cc.group_size(); ++i) {
    const ChainSet& cs = cc.chains[static_cast<std::size_t>(i)];
    const auto bin = emit_binary(cs);
    const auto stem = std::filesystem::path(out_dir) / artifact_stem(cc, i);
    std::ofstream(stem.string() + ".lpubin", std::ios::binary)
        .write(reinterpret_cast<const char*>(bin.data()), static_cast<std::streamsize>(bin.size()));
    std::ofstream map(stem.string() + ".map.csv");
    cc.maps[static_cast<std::size_t>(i)].dump_csv(map, false);
    std::cout << i << ',' << cs.program.code.size();
    for (int g = 0; g < kNumGroups; ++g) std::cout << ',' << cs.chains[static_cast<std::size_t>(g)].size();
    std::cout << ',' << bin.size() << '\n';
  }
  return 0;
}

std::vector<int> oracle_tokens(const ParamStore& params, const std::vector<int>& prompt,
                               int n) {
  oracle::Reference<oracle::Fp16> ref(params);
  return ref.generate(prompt, n);
}

int check_oracle(const CompiledCluster& cc, int in_tokens, int out_tokens, std::uint64_t seed) {
  if (param_count(cc.model) > kOracleParamLimit)
    throw Error(ErrorKind::InvalidConfig, "--oracle is limited to models under 50M parameters");
  const ParamStore params = synth_params(cc.model, seed);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, cc.model.vocab_size - 1);
  std::vector<int> prompt(static_cast<std::size_t>(in_tokens));
  for (int& t : prompt) t = pick(rng);
  std::vector<DeviceMemory> images;
  for (const auto& m : cc.maps) images.push_back(build_device_image(m, params, cc.partition));
  RunOptions opt;
  opt.max_new_tokens = out_tokens;
  const RunResult got = run_functional(cc.programs(), images, prompt, opt);
  const auto want = oracle_tokens(params, prompt, out_tokens);
  std::size_t agree = 0;
  while (agree < got.tokens.size() && agree < want.size() && got.tokens[agree] == want[agree]) ++agree;
  const bool ok = got.tokens == want;
  std::cerr << "oracle: " << (ok ? "match" : "MISMATCH") << ", " << agree << '/' << want.size()
            << " tokens agree\n";
  return ok ? 0 : 1;
}

int cmd_run(const Common& o, ExperimentSpec spec, bool oracle_check) {
  const CompiledCluster cc = compile_cluster(load_model(o.model), load_arch(o.arch), o.devices, o.part());
  int status = 0;
  if (oracle_check) status = check_oracle(cc, spec.input_tokens, spec.output_tokens, spec.seed);
  std::vector<int> positions = spec.positions;
  if (spec.full_decode) {
    positions.clear();
    for (int i = 0; i < spec.output_tokens; ++i) positions.push_back(spec.input_tokens + i);
  } else if (positions.empty()) {
    positions = default_positions(spec.input_tokens, spec.output_tokens);
  }
  const ExperimentResult r = run_experiment(cc, positions);
  write_run_csv(std::cout, {r});
  if (!spec.output.empty()) {
    std::ofstream f(spec.output);
    write_run_csv(f, {r});
  }
  return status;
}

int cmd_sweep(const Common& o, ExperimentSpec spec, const std::vector<int>& counts) {
  spec.model = o.model;
  spec.arch = o.arch;
  const auto rows = run_sweep(spec, counts);
  write_scaling_csv(std::cout, rows);
  std::cout << "# mean doubling gain " << mean_doubling_gain(rows) << '\n';
  if (!spec.output.empty()) {
    std::ofstream f(spec.output);
    write_scaling_csv(f, rows);
  }
  return 0;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::MalformedBinary, "cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

int cmd_disasm(const std::string& input, const std::string& reemit) {
  const auto bytes = read_file(input);
  const ChainSet cs = disassemble(bytes);
  std::cout << to_assembly(cs.program);
  if (!reemit.empty()) {
    const auto again = emit_binary(cs);
    std::ofstream(reemit, std::ios::binary)
        .write(reinterpret_cast<const char*>(again.data()), static_cast<std::streamsize>(again.size()));
    if (again != bytes) {
      std::cerr << "re-emitted binary differs from the input\n";
      return 1;
    }
  }
  return 0;
}

int cmd_selftest() {
  int failures = 0;
  auto report = [&](const char* name, bool ok) {
    std::cout << (ok ? "PASS " : "FAIL ") << name << '\n';
    failures += ok ? 0 : 1;
  };
  report("mac trees for 819 GB/s", derive_mac_trees(819e9, 64, 1e9) == 8);
  report("mac trees for 460 GB/s at 220 MHz", derive_mac_trees(460e9, 64, 220e6) == 16);
  for (const char* name : {"tiny-2l", "tiny-rope"}) {
    const CompiledCluster cc = compile_cluster(model_preset(name), device_preset("hbm3-x1"), 1);
    const auto bin = emit_binary(cc.chains[0]);
    report((std::string(name) + " binary round trip").c_str(), emit_binary(disassemble(bin)) == bin);
    std::cerr << name << ' ';
    report((std::string(name) + " matches reference").c_str(), check_oracle(cc, 4, 16, 3) == 0);
  }
  const CompiledCluster cc = compile_cluster(model_preset("tiny-2l"), device_preset("hbm3-x1"), 2);
  report("tiny-2l on 2 devices matches reference", check_oracle(cc, 4, 16, 5) == 0);
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LPU toolchain and simulator"};
  app.require_subcommand(1);

  Common common;
  ExperimentSpec spec;
  std::string out_dir = ".";
  bool oracle_check = false;
  std::vector<int> sweep_counts{1, 2, 4, 8};
  std::string disasm_input, disasm_reemit;

  auto* compile_cmd = app.add_subcommand("compile", "compile a model for a cluster and write .lpubin files");
  add_common(compile_cmd, common);
  compile_cmd->add_option("--devices", common.devices, "device count")->capture_default_str();
  compile_cmd->add_option("--out-dir", out_dir, "artifact directory")->capture_default_str();

  auto add_spec = [&](CLI::App* c) {
    c->add_option("--in-tokens", spec.input_tokens, "prompt length")->capture_default_str();
    c->add_option("--out-tokens", spec.output_tokens, "generated tokens")->capture_default_str();
    c->add_option("--positions", spec.positions, "sampled KV positions")->delimiter(',');
    c->add_option("--seed", spec.seed, "parameter and prompt seed")->capture_default_str();
    c->add_flag("--full-decode", spec.full_decode, "simulate every decode position");
    c->add_option("--report", spec.output, "CSV report path");
  };

  auto* run_cmd = app.add_subcommand("run", "simulate per-token latency");
  add_common(run_cmd, common);
  run_cmd->add_option("--devices", common.devices, "device count")->capture_default_str();
  add_spec(run_cmd);
  run_cmd->add_flag("--oracle", oracle_check, "check generated tokens against the reference transformer");

  auto* sweep_cmd = app.add_subcommand("sweep", "scaling sweep over device counts");
  add_common(sweep_cmd, common);
  sweep_cmd->add_option("--devices", sweep_counts, "device counts")->delimiter(',');
  add_spec(sweep_cmd);

  auto* disasm_cmd = app.add_subcommand("disasm", "print the assembly of a .lpubin file");
  disasm_cmd->add_option("input", disasm_input, "binary")->required();
  disasm_cmd->add_option("--reemit", disasm_reemit, "write the binary back and compare");

  auto* self_cmd = app.add_subcommand("selftest", "quick end-to-end checks");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*compile_cmd) return cmd_compile(common, out_dir);
    if (*run_cmd) return cmd_run(common, spec, oracle_check);
    if (*sweep_cmd) return cmd_sweep(common, spec, sweep_counts);
    if (*disasm_cmd) return cmd_disasm(disasm_input, disasm_reemit);
    if (*self_cmd) return cmd_selftest();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
