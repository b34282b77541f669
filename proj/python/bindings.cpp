// Copyright 2026 The ASSD Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "assd/error.h"
#include "assd/harness.h"
#include "assd/metrics.h"
#include "assd/ordering.h"
#include "assd/sampler.h"
#include "assd/tabular.h"
#include "assd/training.h"
#include "assd/transformer.h"

namespace py = pybind11;
using namespace assd;

namespace {

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

std::vector<double> to_list(const ProbVector& p) { return {p.values().begin(), p.values().end()}; }

std::vector<std::vector<double>> to_lists(const std::vector<ProbVector>& ps) {
  std::vector<std::vector<double>> out;
  out.reserve(ps.size());
  for (const auto& p : ps) out.push_back(to_list(p));
  return out;
}

std::vector<std::vector<bool>> mask_rows(const MaskMatrix& m) {
  std::vector<std::vector<bool>> out(static_cast<std::size_t>(m.n()), std::vector<bool>(m.n()));
  for (int r = 0; r < m.n(); ++r) {
    for (int c = 0; c < m.n(); ++c) out[r][c] = m(r, c);
  }
  return out;
}

// Distributions cross the boundary as {tuple(outcome): probability}.
ExactDistribution exact_from_py(const py::dict& d) {
  ExactDistribution out;
  for (const auto& [k, v] : d) out[k.cast<std::vector<int>>()] = v.cast<double>();
  return out;
}

EmpiricalDistribution empirical_from_py(const py::dict& d) {
  EmpiricalDistribution out;
  for (const auto& [k, v] : d) out.add(k.cast<std::vector<int>>(), v.cast<std::int64_t>());
  return out;
}

py::dict result_to_py(const DecodeResult& r) {
  py::dict out;
  out["tokens"] = std::vector<int>(r.tokens.tokens().begin(), r.tokens.tokens().end());
  out["trace"] = to_py(to_json(r.trace));
  out["resample_events"] = r.trace.resample_events;
  out["first_rank_checks"] = r.trace.first_rank_checks;
  out["first_rank_violations"] = r.trace.first_rank_violations;
  out["mask_conditioning_events"] = r.trace.mask_conditioning_events;
  return out;
}

py::dict chi_square_to_py(const ChiSquareResult& r) {
  py::dict out;
  out["statistic"] = r.statistic;
  out["dof"] = r.dof;
  out["p_value"] = r.p_value;
  out["cells"] = r.cells;
  out["pooled_cells"] = r.pooled_cells;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Any-subset speculative decoding core";
  m.attr("MASK") = kMask;

  // Messages are prefixed with the error code name, e.g. "invalid-config: ...".
  py::register_exception<Error>(m, "AssdError", PyExc_RuntimeError);

  py::class_<Ordering>(m, "Ordering")
      .def(py::init<std::vector<int>, int>(), py::arg("sigma"), py::arg("m"))
      .def_static("identity", &Ordering::identity, py::arg("n"), py::arg("m") = 0)
      .def_property_readonly("n", &Ordering::n)
      .def_property_readonly("m", &Ordering::m)
      .def_property_readonly("sigma", [](const Ordering& o) { return std::vector<int>(o.sigma().begin(), o.sigma().end()); })
      .def("rank_of", &Ordering::rank_of)
      .def("is_canonical", &Ordering::is_canonical)
      .def("__eq__", [](const Ordering& a, const Ordering& b) { return a == b; })
      .def("__repr__", [](const Ordering& o) { return "Ordering(" + to_json(o).dump() + ")"; });

  m.def("canonicalize_ordering", [](const std::vector<int>& prompt, int n) { return canonicalize_ordering(prompt, n); },
        py::arg("prompt_positions"), py::arg("n"));
  m.def("query_mask", [](const Ordering& o) { return mask_rows(build_query_mask(o)); });
  m.def("content_mask", [](const Ordering& o) { return mask_rows(build_content_mask(o)); });

  py::class_<TabularJointModel>(m, "TabularModel")
      .def(py::init<int, int, std::vector<double>>(), py::arg("vocab"), py::arg("n"), py::arg("table"))
      .def_static("load", [](const std::string& path) { return TabularJointModel::load(path); })
      .def_property_readonly("vocab", &TabularJointModel::vocab_size)
      .def_property_readonly("n", &TabularJointModel::length)
      .def_property_readonly("table",
                             [](const TabularJointModel& t) { return std::vector<double>(t.table().begin(), t.table().end()); })
      .def("cell_tokens", &TabularJointModel::cell_tokens)
      .def("completion_distribution",
           [](const TabularJointModel& t, const std::vector<int>& prompt) {
             py::dict out;
             for (const auto& [cell, p] : t.completion_distribution(TokenSequence(prompt, t.vocab_size()))) {
               out[py::tuple(py::cast(t.cell_tokens(cell)))] = p;
             }
             return out;
           })
      .def("exact_joint_conditional",
           [](const TabularJointModel& t, const Ordering& o, const std::vector<int>& fill) {
             return t.exact_joint_conditional(o, TokenSequence(fill, t.vocab_size()));
           })
      .def("marginals_given_visible",
           [](const TabularJointModel& t, const std::vector<int>& seq, const Ordering& o, int n,
              const std::vector<int>& queries) {
             return to_lists(t.marginals_given_visible(TokenSequence(seq, t.vocab_size()), o, n, queries));
           })
      .def("chained_conditionals",
           [](const TabularJointModel& t, const std::vector<int>& seq, const Ordering& o, int n, int end) {
             return to_lists(t.chained_conditionals(TokenSequence(seq, t.vocab_size()), o, n, end));
           });

  m.def("random_dirichlet_table", [](int vocab, int n, double alpha, std::uint64_t seed) {
    Rng rng(seed);
    return fixtures::random_dirichlet(vocab, n, alpha, rng);
  }, py::arg("vocab"), py::arg("n"), py::arg("alpha"), py::arg("seed"));
  m.def("product_table", &fixtures::product);
  m.def("fully_correlated_table", &fixtures::fully_correlated);

  py::class_<TwoStreamTransformer>(m, "Transformer")
      .def_static("load", [](const std::string& prefix) { return TwoStreamTransformer::load(prefix); })
      .def_property_readonly("vocab", &TwoStreamTransformer::vocab_size)
      .def_property_readonly("n", &TwoStreamTransformer::length)
      .def_property_readonly("parameter_count", &TwoStreamTransformer::parameter_count)
      .def("logits",
           [](const TwoStreamTransformer& t, const std::vector<int>& seq, const Ordering& o) {
             const Logits l = t.forward(TokenSequence(seq, t.vocab_size()), o);
             std::vector<std::vector<double>> rows;
             for (int p = 0; p < l.n; ++p) rows.emplace_back(l.row(p).begin(), l.row(p).end());
             return rows;
           })
      .def("joint_nll", [](const TwoStreamTransformer& t, const std::vector<int>& seq, const Ordering& o) {
        return t.joint_nll(TokenSequence(seq, t.vocab_size()), o);
      });

  m.def("accept_probability", &accept_probability, py::arg("p"), py::arg("q"));
  m.def("residual_distribution", [](const std::vector<double>& p, const std::vector<double>& q) {
    return to_list(residual_distribution(ProbVector(p), ProbVector(q)));
  });
  m.def("step_exact_outcome_distribution", [](const std::vector<double>& p, const std::vector<double>& q) {
    return to_list(step_exact_outcome_distribution(ProbVector(p), ProbVector(q)));
  });

  // decode(model, prompt, decoder="assd-self", k=5, seed=0). The ordering is
  // the canonical one implied by the prompt's visible positions.
  const auto decode = [](const AnyOrderModel& model, const std::vector<int>& prompt, const std::string& decoder, int k,
                         std::uint64_t seed, double fault_accept_offset) {
    const TokenSequence seq(prompt, model.vocab_size());
    std::vector<int> visible;
    for (int p = 0; p < seq.n(); ++p) {
      if (!seq.is_mask(p)) visible.push_back(p);
    }
    const Ordering ord = canonicalize_ordering(visible, seq.n());
    SamplerConfig cfg;
    cfg.k = k;
    cfg.seed = seed;
    cfg.fault_accept_offset = fault_accept_offset;
    Rng rng(seed);
    return result_to_py(run_decoder(decoder_from_string(decoder), model, seq, ord, cfg, rng));
  };
  m.def(
      "decode",
      [decode](const TabularJointModel& model, const std::vector<int>& prompt, const std::string& decoder, int k,
               std::uint64_t seed, double fault) { return decode(model, prompt, decoder, k, seed, fault); },
      py::arg("model"), py::arg("prompt"), py::arg("decoder") = "assd-self", py::arg("k") = 5, py::arg("seed") = 0,
      py::arg("fault_accept_offset") = 0.0);
  m.def(
      "decode",
      [decode](const TwoStreamTransformer& model, const std::vector<int>& prompt, const std::string& decoder, int k,
               std::uint64_t seed, double fault) { return decode(model, prompt, decoder, k, seed, fault); },
      py::arg("model"), py::arg("prompt"), py::arg("decoder") = "assd-self", py::arg("k") = 5, py::arg("seed") = 0,
      py::arg("fault_accept_offset") = 0.0);

  m.def("shannon_entropy", [](const std::vector<int>& tokens) { return shannon_entropy(tokens); });
  m.def("generative_perplexity", [](const std::vector<int>& tokens, const TabularJointModel& reference) {
    return generative_perplexity(tokens, TabularReference(reference)).value;
  });
  m.def("total_variation", [](const py::dict& a, const py::dict& b) {
    return total_variation(exact_from_py(a), exact_from_py(b));
  });
  m.def(
      "chi_square_gof",
      [](const py::dict& observed, const py::dict& expected, double min_expected) {
        return chi_square_to_py(chi_square_gof(empirical_from_py(observed), exact_from_py(expected), min_expected));
      },
      py::arg("observed"), py::arg("expected"), py::arg("min_expected") = 5.0);
  m.def("regularized_gamma_q", &regularized_gamma_q);

  m.def(
      "run_command",
      [](const std::string& command, const std::string& config, std::optional<std::uint64_t> seed,
         std::optional<std::string> out, std::optional<int> k) {
        harness::Overrides o;
        o.seed = seed;
        o.out = out;
        o.k = k;
        std::ostringstream log;
        const int code = harness::run_command(command, config, o, log);
        return py::make_tuple(code, log.str());
      },
      py::arg("command"), py::arg("config"), py::arg("seed") = py::none(), py::arg("out") = py::none(),
      py::arg("k") = py::none());
  m.def(
      "verify",
      [](const std::string& config, std::optional<std::uint64_t> seed) {
        harness::Overrides o;
        o.seed = seed;
        const auto cfg = harness::load_run_config(config, o);
        return to_py(harness::run_verification(harness::verify_options_from_config(cfg)).to_json());
      },
      py::arg("config"), py::arg("seed") = py::none());
}
