#include "inv2a/defense.hpp"
#include "inv2a/diagnostics.hpp"
#include "inv2a/harness.hpp"
#include "inv2a/metrics.hpp"
#include "inv2a/model_bridge.hpp"
#include "inv2a/templates.hpp"
#include "inv2a/toy_world.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace inv2a;

namespace {

// The pipeline objects cross the boundary as JSON text.
py::object to_python(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json from_python(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::dict summary_dict(const harness::RunSummary& s) {
  py::list plan;
  for (const auto& it : s.plan) {
    py::dict d;
    d["stage"] = it.stage;
    d["enabled"] = it.enabled;
    d["done"] = it.done;
    plan.append(d);
  }
  py::dict out;
  out["plan"] = plan;
  out["executed"] = s.executed;
  out["skipped"] = s.skipped;
  out["output_dir"] = s.output_dir.string();
  return out;
}

}  // namespace

PYBIND11_MODULE(_inv2a, m) {
  m.doc() = "Prompt inversion toolkit: metrics, diagnostics, defenses and the experiment pipeline.";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<SpecError>(m, "SpecError", base.ptr());
  py::register_exception<EmptyInput>(m, "EmptyInput", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<ModelNotFound>(m, "ModelNotFound", base.ptr());
  py::register_exception<StageError>(m, "StageError", base.ptr());
  py::register_exception<SplitError>(m, "SplitError", base.ptr());
  py::register_exception<InvalidCorpus>(m, "InvalidCorpus", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());

  // Metrics
  m.def("bleu", &metrics::bleu, py::arg("reference"), py::arg("hypothesis"));
  m.def("token_f1", &metrics::token_f1, py::arg("reference"), py::arg("hypothesis"));
  m.def("exact_match", &metrics::exact_match, py::arg("reference"), py::arg("hypothesis"));
  m.def(
      "evaluate",
      [](const std::vector<std::pair<std::string, std::string>>& pairs, const std::string& metric_list) {
        return to_python(metrics::evaluate_run(pairs, metrics::EvalConfig::from_list(metric_list)).report.to_json());
      },
      py::arg("pairs"), py::arg("metrics") = "bleu,f1,cs,exact",
      "Aggregate report over (reference, hypothesis) pairs.");

  // Templates
  m.def("render_rewrite", &templates::render_rewrite, py::arg("output"));
  m.def("render_judge", &templates::render_judge, py::arg("prompt_a"), py::arg("prompt_b"));

  // Tokenizer
  py::class_<Tokenizer>(m, "Tokenizer")
      .def(py::init<const std::vector<std::string>&>(), py::arg("words"))
      .def("encode", &Tokenizer::encode, py::arg("text"))
      .def("decode", [](const Tokenizer& t, const TokenIds& ids) { return t.decode(ids); }, py::arg("ids"))
      .def("__len__", &Tokenizer::size);

  // Models
  py::class_<bridge::TransformerLM, std::shared_ptr<bridge::TransformerLM>>(m, "CausalLM")
      .def_static("load", &bridge::load_causal_lm, py::arg("path_or_id"))
      .def_property_readonly("tokenizer", &bridge::TransformerLM::tokenizer)
      .def_property_readonly("d_model", &bridge::TransformerLM::d_model)
      .def(
          "respond",
          [](const bridge::TransformerLM& lm, const std::string& prompt, int max_new_tokens) {
            bridge::DecodeParams dp;
            dp.sampling = bridge::SamplingParams::greedy(max_new_tokens);
            return bridge::respond(lm, prompt, dp).text;
          },
          py::arg("prompt"), py::arg("max_new_tokens") = 32, "Greedy response to a text prompt.")
      .def(
          "logits",
          [](const bridge::TransformerLM& lm, const TokenIds& ids) { return lm.forward_tokens(ids); }, py::arg("ids"))
      .def(
          "logprob",
          [](const bridge::TransformerLM& lm, const std::string& context, const std::string& target) {
            return diag::conditional_logprob(context, target, lm);
          },
          py::arg("context"), py::arg("target"), "Mean log-probability per target token.")
      .def(
          "entropy",
          [](const bridge::TransformerLM& lm, const std::string& context, const std::string& target) {
            return diag::conditional_entropy(context, target, lm);
          },
          py::arg("context"), py::arg("target"), "Mean entropy in bits per target token.");

  // Diagnostics
  m.def(
      "knn_mutual_information",
      [](const Matrix& a, const Matrix& b, int k) { return diag::knn_mutual_information(a, b, k).nats; },
      py::arg("a"), py::arg("b"), py::arg("k") = 3, "KSG estimate in nats, clipped at zero.");

  // Defense
  m.def(
      "perturb_output",
      [](const std::string& y, const std::string& kind, double rate, std::uint64_t seed) {
        return defense::perturb_output(y, {defense::parse_perturb_kind(kind), rate, seed}, defense::Lexicon::bundled());
      },
      py::arg("text"), py::arg("kind"), py::arg("rate"), py::arg("seed") = 0);

  // Toy world
  m.def(
      "toy_prompts",
      [](int n, std::uint64_t seed) {
        toy::ToyLanguage lang;
        std::vector<std::string> out;
        for (const auto& p : lang.sample_prompts(n, seed)) out.push_back(lang.prompt_text(p));
        return out;
      },
      py::arg("n"), py::arg("seed") = 0);
  m.def("write_toy_dataset",
        [](const std::filesystem::path& path, int n, std::uint64_t seed) {
          toy::write_toy_dataset(path, toy::ToyLanguage(), n, seed);
        },
        py::arg("path"), py::arg("n"), py::arg("seed") = 0);

  // Harness
  m.def(
      "ingest_dataset",
      [](const std::filesystem::path& path, const std::string& scenario) {
        py::list out;
        for (const auto& r : harness::ingest_dataset(path, harness::parse_scenario(scenario))) out.append(to_python(r.to_json()));
        return out;
      },
      py::arg("path"), py::arg("scenario") = "user");
  m.def(
      "load_config",
      [](const std::filesystem::path& path) { return to_python(harness::ExperimentConfig::load(path).to_json()); },
      py::arg("path"), "Validated config with paths resolved, as a dict.");
  m.def(
      "config_hash", [](const py::object& cfg) { return harness::ExperimentConfig::from_json(from_python(cfg)).hash(); },
      py::arg("config"));
  m.def(
      "run_experiment",
      [](const py::object& cfg, const std::string& until, bool dry_run) {
        const auto c = harness::ExperimentConfig::from_json(from_python(cfg));
        harness::RunSummary s;
        {
          py::gil_scoped_release release;
          s = harness::run_experiment(c, {until, dry_run});
        }
        return summary_dict(s);
      },
      py::arg("config"), py::arg("until") = "", py::arg("dry_run") = false);
  m.def("stage_order", &harness::stage_order);
}
