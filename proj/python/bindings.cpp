#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>

#include "lpu/experiment.hpp"
#include "lpu/interp.hpp"

namespace py = pybind11;
using namespace lpu;

namespace {

// functional runs walk every element; keep them to small models
constexpr std::int64_t kFunctionalParamLimit = 50'000'000;

ModelConfig load_model(const std::string& s) {
  return std::filesystem::exists(s) ? load_model_config(s) : model_preset(s);
}

DeviceConfig load_arch(const std::string& s) {
  return std::filesystem::exists(s) ? load_device_config(s) : device_preset(s);
}

RingPartition partition_or_default(const std::string& p, int devices) {
  return p.empty() ? default_partition(devices) : parse_partition(p);
}

py::object json_to_py(const std::string& text) { return py::module_::import("json").attr("loads")(text); }

py::dict result_dict(const ExperimentResult& r) {
  py::list samples;
  for (const auto& s : r.samples) {
    py::dict d;
    d["position"] = s.position;
    d["seconds"] = s.seconds;
    d["bytes"] = s.bytes;
    d["exposed_sync_seconds"] = s.exposed_sync_seconds;
    d["syncs"] = s.syncs;
    samples.append(d);
  }
  py::dict d;
  d["model"] = r.model;
  d["arch"] = r.arch;
  d["devices"] = r.devices;
  d["partition"] = r.partition;
  d["ms_per_token"] = r.ms_per_token;
  d["utilization"] = r.utilization;
  d["exposed_sync_us"] = r.exposed_sync_us;
  d["syncs_per_token"] = r.syncs_per_token;
  d["samples"] = samples;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "LPU toolchain and simulator";

  auto base = py::register_exception<Error>(m, "LpuError", PyExc_RuntimeError);
  (void)base;

  m.def("derive_mac_trees", &derive_mac_trees, py::arg("hbm_bandwidth"), py::arg("vector_dim"), py::arg("freq_hz"));
  m.def("sxe_peak_bandwidth", &sxe_peak_bandwidth, py::arg("mac_trees"), py::arg("vector_dim"), py::arg("freq_hz"));
  m.def("model_presets", &model_preset_names);
  m.def("arch_presets", &device_preset_names);
  m.def("model_config", [](const std::string& name) { return json_to_py(model_config_to_json(load_model(name))); },
        py::arg("model"));
  m.def("arch_config", [](const std::string& name) { return json_to_py(device_config_to_json(load_arch(name))); },
        py::arg("arch"));
  m.def("param_count", [](const std::string& name) { return param_count(load_model(name)); }, py::arg("model"));
  m.def("model_bytes", [](const std::string& name) { return model_bytes(load_model(name)); }, py::arg("model"));
  m.def("kv_bytes", [](const std::string& name, int seq) { return kv_bytes(load_model(name), seq); },
        py::arg("model"), py::arg("seq_len"));

  m.def(
      "compile",
      [](const std::string& model, const std::string& arch, int devices, const std::string& partition) {
        CompiledCluster cc;
        {
          py::gil_scoped_release release;
          cc = compile_cluster(load_model(model), load_arch(arch), devices, partition_or_default(partition, devices));
        }
        py::list out;
        for (const auto& cs : cc.chains) {
          const auto bin = emit_binary(cs);
          out.append(py::bytes(reinterpret_cast<const char*>(bin.data()), bin.size()));
        }
        return out;
      },
      py::arg("model"), py::arg("arch") = "hbm3-x4", py::arg("devices") = 1, py::arg("partition") = "",
      "Binaries of one tensor-parallel group, one per member.");

  m.def(
      "disassemble",
      [](const py::bytes& data) {
        const std::string s = data;
        return to_assembly(disassemble(std::vector<std::uint8_t>(s.begin(), s.end())).program);
      },
      py::arg("binary"));

  m.def(
      "run",
      [](const std::string& model, const std::string& arch, int devices, const std::string& partition,
         int input_tokens, int output_tokens, const std::vector<int>& positions) {
        ExperimentSpec spec;
        spec.model = model;
        spec.arch = arch;
        spec.devices = devices;
        spec.partition = partition;
        spec.input_tokens = input_tokens;
        spec.output_tokens = output_tokens;
        spec.positions = positions;
        ExperimentResult r;
        {
          py::gil_scoped_release release;
          r = run_experiment(spec);
        }
        return result_dict(r);
      },
      py::arg("model"), py::arg("arch") = "hbm3-x4", py::arg("devices") = 1, py::arg("partition") = "",
      py::arg("input_tokens") = 32, py::arg("output_tokens") = 2016, py::arg("positions") = std::vector<int>{});

  m.def(
      "sweep",
      [](const std::string& model, const std::string& arch, const std::vector<int>& devices, int input_tokens,
         int output_tokens) {
        ExperimentSpec spec;
        spec.model = model;
        spec.arch = arch;
        spec.input_tokens = input_tokens;
        spec.output_tokens = output_tokens;
        std::vector<ScalingRow> rows;
        {
          py::gil_scoped_release release;
          rows = run_sweep(spec, devices);
        }
        py::list out;
        for (const auto& r : rows) {
          py::dict d;
          d["devices"] = r.devices;
          d["partition"] = r.partition;
          d["ms_per_token"] = r.ms_per_token;
          d["speedup"] = r.speedup;
          d["exposed_sync_us"] = r.exposed_sync_us;
          d["utilization"] = r.utilization;
          out.append(d);
        }
        return out;
      },
      py::arg("model"), py::arg("arch") = "hbm3-x4", py::arg("devices") = std::vector<int>{1, 2, 4, 8},
      py::arg("input_tokens") = 32, py::arg("output_tokens") = 2016);

  m.def(
      "generate",
      [](const std::string& model, const std::vector<int>& prompt, int max_new_tokens, int devices,
         const std::string& arch, std::uint64_t seed, double temperature, int top_k, double top_p,
         std::uint64_t sample_seed) {
        const ModelConfig cfg = load_model(model);
        if (param_count(cfg) > kFunctionalParamLimit)
          throw Error(ErrorKind::InvalidConfig, "functional runs are limited to models under 50M parameters");
        RunOptions opt;
        opt.max_new_tokens = max_new_tokens;
        opt.sampling.temperature = temperature;
        opt.sampling.top_k = top_k;
        opt.sampling.top_p = top_p;
        opt.sampling.seed = sample_seed;
        validate_sampling(opt.sampling);
        py::gil_scoped_release release;
        const CompiledCluster cc = compile_cluster(cfg, load_arch(arch), devices);
        const ParamStore params = synth_params(cfg, seed);
        std::vector<DeviceMemory> images;
        for (const auto& map : cc.maps) images.push_back(build_device_image(map, params, cc.partition));
        return run_functional(cc.programs(), images, prompt, opt).tokens;
      },
      py::arg("model"), py::arg("prompt"), py::arg("max_new_tokens") = 16, py::arg("devices") = 1,
      py::arg("arch") = "hbm3-x1", py::arg("seed") = 1, py::arg("temperature") = 0.0,
      py::arg("top_k") = std::numeric_limits<int>::max(), py::arg("top_p") = 1.0, py::arg("sample_seed") = 0,
      "Runs the compiled programs on synthetic weights and returns the generated token ids.");
}
