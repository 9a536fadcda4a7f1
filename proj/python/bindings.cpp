#include <iostream>
#include <optional>

#include <pybind11/eigen.h>
#include <pybind11/iostream.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "crossblup/cli.hpp"
#include "crossblup/errors.hpp"
#include "crossblup/estimate.hpp"
#include "crossblup/predict.hpp"
#include "crossblup/simlab.hpp"
#include "crossblup/uncertainty.hpp"

namespace py = pybind11;
using namespace crossblup;

namespace {

CenteredDesign make_design(std::size_t g, std::size_t h, std::size_t m, const MatrixXd& row, const MatrixXd& col,
                           const MatrixXd& interaction, const MatrixXd& within) {
  const BalancedLayout l(g, h, m);
  RawCovariates raw;
  raw.row = row.size() ? row : MatrixXd(static_cast<Eigen::Index>(g), 0);
  raw.col = col.size() ? col : MatrixXd(static_cast<Eigen::Index>(h), 0);
  raw.interaction = interaction.size() ? interaction : MatrixXd(static_cast<Eigen::Index>(g * h), 0);
  raw.within = within.size() ? within : MatrixXd(static_cast<Eigen::Index>(l.n()), 0);
  return CenteredDesign(l, std::move(raw));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Balanced crossed random-effects models";
  m.attr("__version__") = kVersion;

  py::register_exception<Error>(m, "CrossblupError");
  py::register_exception<DataError>(m, "DataError", m.attr("CrossblupError"));
  py::register_exception<DomainError>(m, "DomainError", m.attr("CrossblupError"));
  py::register_exception<ConfigError>(m, "ConfigError", m.attr("CrossblupError"));

  py::class_<BalancedLayout>(m, "Layout")
      .def(py::init<std::size_t, std::size_t, std::size_t>(), py::arg("g"), py::arg("h"), py::arg("m") = 1)
      .def_readonly("g", &BalancedLayout::g)
      .def_readonly("h", &BalancedLayout::h)
      .def_readonly("m", &BalancedLayout::m)
      .def_property_readonly("n", &BalancedLayout::n);

  py::class_<VarianceComponents>(m, "VarianceComponents")
      .def(py::init([](double a, double b, double gm, double e) { return VarianceComponents{a, b, gm, e}; }),
           py::arg("sigma_a2"), py::arg("sigma_b2"), py::arg("sigma_g2") = 0.0, py::arg("sigma_e2") = 1.0)
      .def_readwrite("sigma_a2", &VarianceComponents::sigma_a2)
      .def_readwrite("sigma_b2", &VarianceComponents::sigma_b2)
      .def_readwrite("sigma_g2", &VarianceComponents::sigma_g2)
      .def_readwrite("sigma_e2", &VarianceComponents::sigma_e2)
      .def("__repr__", [](const VarianceComponents& t) {
        return "VarianceComponents(sigma_a2=" + std::to_string(t.sigma_a2) + ", sigma_b2=" +
               std::to_string(t.sigma_b2) + ", sigma_g2=" + std::to_string(t.sigma_g2) +
               ", sigma_e2=" + std::to_string(t.sigma_e2) + ")";
      });

  py::class_<FitResult>(m, "FitResult")
      .def_readonly("xi", &FitResult::xi)
      .def_readonly("theta", &FitResult::theta)
      .def_readonly("xi_covariance", &FitResult::xi_covariance)
      .def_readonly("criterion", &FitResult::criterion)
      .def_readonly("converged", &FitResult::converged)
      .def_readonly("iterations", &FitResult::iterations)
      .def_property_readonly("method", [](const FitResult& r) { return to_string(r.method); });

  m.def(
      "fit",
      [](const VectorXd& y, std::size_t g, std::size_t h, std::size_t mm, const MatrixXd& row, const MatrixXd& col,
         const MatrixXd& interaction, const MatrixXd& within, const std::string& method) {
        const CenteredDesign d = make_design(g, h, mm, row, col, interaction, within);
        FitOptions fo;
        fo.method = parse_method(method);
        return fit(d, ResponseTable(d.layout(), y), fo);
      },
      py::arg("y"), py::arg("g"), py::arg("h"), py::arg("m") = 1, py::arg("row") = MatrixXd(),
      py::arg("col") = MatrixXd(), py::arg("interaction") = MatrixXd(), py::arg("within") = MatrixXd(),
      py::arg("method") = "reml",
      "Fit the balanced crossed model; y is in row-major (i, j, k) order.");

  m.def(
      "eblup",
      [](const VarianceComponents& theta, const VectorXd& xi, const VectorXd& y, std::size_t g, std::size_t h,
         std::size_t mm, const MatrixXd& row, const MatrixXd& col, const MatrixXd& interaction,
         const MatrixXd& within) {
        const CenteredDesign d = make_design(g, h, mm, row, col, interaction, within);
        const ResponseTable table(d.layout(), y);
        const Eblups e = mm > 1 ? blup_interaction(theta, xi, d, table) : blup_no_interaction(theta, xi, d, table);
        py::dict out;
        out["alpha"] = e.alpha;
        out["beta"] = e.beta;
        out["gamma"] = e.gamma;
        return out;
      },
      py::arg("theta"), py::arg("xi"), py::arg("y"), py::arg("g"), py::arg("h"), py::arg("m") = 1,
      py::arg("row") = MatrixXd(), py::arg("col") = MatrixXd(), py::arg("interaction") = MatrixXd(),
      py::arg("within") = MatrixXd());

  m.def(
      "mse_lsw",
      [](const VarianceComponents& theta, std::size_t g, std::size_t h, std::size_t mm, const std::string& effect,
         double leverage) {
        Effect e = Effect::Row;
        if (effect == "column") e = Effect::Column;
        else if (effect == "interaction") e = Effect::Interaction;
        else if (effect != "row") throw DomainError("effect must be row, column or interaction");
        return mse_lsw(theta, BalancedLayout(g, h, mm), e, leverage);
      },
      py::arg("theta"), py::arg("g"), py::arg("h"), py::arg("m") = 1, py::arg("effect") = "row",
      py::arg("leverage") = 1.0);

  m.def(
      "simulate",
      [](const std::string& config_json, std::optional<std::uint64_t> seed, std::size_t workers) {
        ScenarioConfig cfg = parse_scenario_config(config_json);
        if (seed) cfg.seed = *seed;
        std::vector<ScenarioResult> results;
        {
          py::gil_scoped_release release;
          results = run_scenarios(cfg, workers == 0 ? default_workers() : workers);
        }
        return emit_table(results, TableFormat::Json);
      },
      py::arg("config_json"), py::arg("seed") = py::none(), py::arg("workers") = 0,
      "Run a coverage study from a JSON configuration; returns the results as JSON text.");

  m.def(
      "main",
      [](const std::vector<std::string>& args) {
        std::vector<const char*> argv = {"crossblup"};
        for (const auto& a : args) argv.push_back(a.c_str());
        py::scoped_ostream_redirect out_redirect(std::cout, py::module_::import("sys").attr("stdout"));
        py::scoped_estream_redirect err_redirect(std::cerr, py::module_::import("sys").attr("stderr"));
        return run_cli(static_cast<int>(argv.size()), argv.data(), std::cout, std::cerr);
      },
      py::arg("args"), "Run the command-line interface with the given arguments; returns the exit code.");
}
