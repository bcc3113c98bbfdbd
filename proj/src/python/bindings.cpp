#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "moediff/decoder.hpp"
#include "moediff/metrics.hpp"
#include "moediff/planted.hpp"
#include "moediff/runner.hpp"
#include "moediff/scripted.hpp"
#include "moediff/strategies.hpp"

namespace py = pybind11;
using namespace moediff;

namespace {

Matrix matrix_from_rows(const std::vector<std::vector<double>>& rows) {
    return Matrix::from_rows(rows);
}

std::vector<std::vector<double>> matrix_to_rows(const Matrix& m) {
    std::vector<std::vector<double>> out(static_cast<size_t>(m.rows));
    for (int r = 0; r < m.rows; ++r) {
        out[static_cast<size_t>(r)].assign(m.row(r).begin(), m.row(r).end());
    }
    return out;
}

std::shared_ptr<Model> make_model(const ModelConfig& cfg, bool planted,
                                  const PlantedConfig& planted_cfg) {
    if (!planted) return std::shared_ptr<Model>(build_toy_model(cfg).release());
    std::shared_ptr<const Model> inner(build_toy_model(cfg).release());
    return std::shared_ptr<Model>(wrap_planted(std::move(inner), planted_cfg).release());
}

py::dict outcome_to_dict(const DecodeOutcome& outcome) {
    py::dict d;
    d["response"] = outcome.response;
    d["terminated_by"] = std::string(termination_name(outcome.terminated_by));
    d["traces_jsonl"] = traces_to_jsonl(outcome.traces);
    d["num_steps"] = outcome.traces.size();
    return d;
}

py::dict summary_to_dict(const RunSummary& s) {
    py::dict d;
    d["apf"] = s.apf;
    d["tpf"] = s.tpf;
    d["apt"] = s.apt;
    d["apt_defined"] = s.apt_defined;
    d["total_forwards"] = s.total_forwards;
    d["total_tokens"] = s.total_tokens;
    d["total_steps"] = s.total_steps;
    d["config_digest"] = s.config_digest;
    d["cost_units"] = s.cost_units;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Block-diffusion decoding engine for MoE language models";

    m.def("matmul",
          [](const std::vector<std::vector<double>>& a,
             const std::vector<std::vector<double>>& b) {
              return matrix_to_rows(matmul(matrix_from_rows(a), matrix_from_rows(b)));
          },
          py::arg("a"), py::arg("b"));
    m.def("softmax_rows",
          [](const std::vector<std::vector<double>>& rows) {
              return matrix_to_rows(softmax_rows(matrix_from_rows(rows)));
          },
          py::arg("rows"));
    m.def("row_argmax",
          [](const std::vector<std::vector<double>>& rows) {
              return row_argmax(matrix_from_rows(rows));
          },
          py::arg("rows"));
    m.def("top_k",
          [](const std::vector<double>& values, int k) { return top_k(values, k); },
          py::arg("values"), py::arg("k"));
    m.def("cosine_similarity",
          [](const std::vector<double>& a, const std::vector<double>& b) {
              return cosine_similarity(a, b);
          },
          py::arg("a"), py::arg("b"));

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("vocab_size", &ModelConfig::vocab_size)
        .def_readwrite("hidden_dim", &ModelConfig::hidden_dim)
        .def_readwrite("num_layers", &ModelConfig::num_layers)
        .def_readwrite("num_experts", &ModelConfig::num_experts)
        .def_readwrite("experts_per_token", &ModelConfig::experts_per_token)
        .def_readwrite("block_size", &ModelConfig::block_size)
        .def_readwrite("max_blocks", &ModelConfig::max_blocks)
        .def_readwrite("seed", &ModelConfig::seed)
        .def_readwrite("clustering_strength", &ModelConfig::clustering_strength)
        .def_readwrite("mask_id", &ModelConfig::mask_id)
        .def_readwrite("eos_id", &ModelConfig::eos_id)
        .def("digest", &ModelConfig::digest);

    py::class_<DecodeConfig>(m, "DecodeConfig")
        .def(py::init<>())
        .def_readwrite("tau", &DecodeConfig::tau)
        .def_readwrite("block_size", &DecodeConfig::block_size)
        .def_readwrite("max_blocks", &DecodeConfig::max_blocks)
        .def_readwrite("max_iterations_per_block", &DecodeConfig::max_iterations_per_block)
        .def_readwrite("force_accept_on_stall", &DecodeConfig::force_accept_on_stall);

    py::class_<StrategyConfig>(m, "StrategyConfig")
        .def(py::init<>())
        .def_readwrite("dcd_enabled", &StrategyConfig::dcd_enabled)
        .def_readwrite("seh_enabled", &StrategyConfig::seh_enabled)
        .def_readwrite("lac_enabled", &StrategyConfig::lac_enabled)
        .def_readwrite("num_branches", &StrategyConfig::num_branches)
        .def_readwrite("tau_hot", &StrategyConfig::tau_hot)
        .def_readwrite("l_hot", &StrategyConfig::l_hot)
        .def_property(
            "refresh_interval",
            [](const StrategyConfig& s) -> py::object {
                if (s.refresh_interval) return py::int_(*s.refresh_interval);
                return py::none();
            },
            [](StrategyConfig& s, py::object value) {
                if (value.is_none()) {
                    s.refresh_interval.reset();
                } else {
                    s.refresh_interval = value.cast<int>();
                }
            });

    py::class_<PlantedConfig>(m, "PlantedConfig")
        .def(py::init<>())
        .def_readwrite("frontier_confidence", &PlantedConfig::frontier_confidence)
        .def_readwrite("hot_confidence", &PlantedConfig::hot_confidence)
        .def_readwrite("decay", &PlantedConfig::decay)
        .def_readwrite("jitter", &PlantedConfig::jitter)
        .def_readwrite("salt", &PlantedConfig::salt);

    m.def("decode",
          [](const ModelConfig& model_cfg, const DecodeConfig& decode_cfg,
             py::object strategy, bool planted, const PlantedConfig& planted_cfg,
             const std::vector<int>& snapshot_layers, bool split_accounting) {
              auto model = make_model(model_cfg, planted, planted_cfg);
              Instrumentation instr;
              instr.hidden_snapshot_layers = snapshot_layers;
              instr.split_accounting = split_accounting;
              if (strategy.is_none()) {
                  return outcome_to_dict(decode_response(*model, decode_cfg, instr));
              }
              return outcome_to_dict(decode_response_accel(
                  *model, decode_cfg, strategy.cast<StrategyConfig>(), instr));
          },
          py::arg("model"), py::arg("decode"), py::arg("strategy") = py::none(),
          py::arg("planted") = false, py::arg("planted_config") = PlantedConfig{},
          py::arg("snapshot_layers") = std::vector<int>{},
          py::arg("split_accounting") = true,
          "Decode a full response with the toy backend; strategy=None runs the "
          "vanilla loop, a StrategyConfig runs the accelerated loop.");

    m.def("decode_script",
          [](const std::string& script_path, const DecodeConfig& decode_cfg,
             py::object strategy) {
              auto model = build_scripted_model(load_script(script_path));
              if (strategy.is_none()) {
                  return outcome_to_dict(decode_response(*model, decode_cfg));
              }
              return outcome_to_dict(decode_response_accel(
                  *model, decode_cfg, strategy.cast<StrategyConfig>()));
          },
          py::arg("script_path"), py::arg("decode"), py::arg("strategy") = py::none());

    m.def("summarize_jsonl",
          [](const std::string& jsonl, const std::string& digest) {
              return summary_to_dict(summarize(traces_from_jsonl(jsonl), digest));
          },
          py::arg("traces_jsonl"), py::arg("config_digest") = "");

    m.def("run_experiment",
          [](const std::string& config_path, const std::string& out_dir) {
              RunOptions opts;
              opts.config_path = config_path;
              opts.out_override = out_dir;
              return cmd_run(opts);
          },
          py::arg("config_path"), py::arg("out_dir") = "");

    m.attr("TRACE_SCHEMA_VERSION") = kTraceSchemaVersion;
}
