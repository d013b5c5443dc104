#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "incseg/app.hpp"
#include "incseg/config.hpp"
#include "incseg/exemplar.hpp"
#include "incseg/metrics.hpp"
#include "incseg/synthdata.hpp"

namespace py = pybind11;
using namespace incseg;

namespace {

using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

// numpy arrays are (depth, height, width) for volumes and (height, width) for slices.
Mask3 to_mask3(const U8Array& a) {
  if (a.ndim() != 3) throw py::value_error("expected a 3D array");
  Mask3 m(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)), static_cast<int>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), m.data.begin());
  for (auto& v : m.data) v = v != 0;
  return m;
}

Mask2 to_mask2(const U8Array& a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2D array");
  Mask2 m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.data.begin());
  for (auto& v : m.data) v = v != 0;
  return m;
}

template <class T>
py::array_t<T> from_grid3(const Grid3<T>& g) {
  py::array_t<T> out({g.depth, g.height, g.width});
  std::copy(g.data.begin(), g.data.end(), out.mutable_data());
  return out;
}

py::object optional_real(const std::optional<Real>& v) { return v ? py::object(py::float_(*v)) : py::object(py::none()); }

AffinityMatrix to_affinity(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw py::value_error("affinity must be a 2D array");
  AffinityMatrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.values.begin());
  return m;
}

CoverageOptions coverage_options(const std::string& mode, double threshold) {
  CoverageOptions o;
  o.mode = parse_coverage_mode(mode);
  o.threshold = threshold;
  return o;
}

}  // namespace

PYBIND11_MODULE(_incseg, m) {
  m.doc() = "Class-incremental segmentation toolkit";
  py::register_exception<Error>(m, "IncsegError", PyExc_RuntimeError);

  m.def("version", &code_version);

  m.def(
      "dice",
      [](const U8Array& pred, const U8Array& gt) {
        if (pred.ndim() == 2) return dice(to_mask2(pred), to_mask2(gt));
        return dice(to_mask3(pred), to_mask3(gt));
      },
      py::arg("pred"), py::arg("gt"));

  m.def(
      "assd",
      [](const U8Array& pred, const U8Array& gt, std::vector<double> spacing) {
        if (pred.ndim() == 2) {
          if (spacing.size() != 2) throw py::value_error("2D masks need two spacings");
          return optional_real(assd(to_mask2(pred), to_mask2(gt), {spacing[0], spacing[1]}));
        }
        // Spacing is given in array order (depth, height, width).
        if (spacing.size() != 3) throw py::value_error("3D masks need three spacings");
        return optional_real(assd(to_mask3(pred), to_mask3(gt), {spacing[1], spacing[2], spacing[0]}));
      },
      py::arg("pred"), py::arg("gt"), py::arg("spacing"));

  m.def(
      "greedy_max_coverage",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& affinity, std::size_t k,
         const std::string& mode, double threshold) {
        const auto r = greedy_max_coverage(to_affinity(affinity), k, coverage_options(mode, threshold));
        py::dict d;
        d["order"] = r.order;
        d["gains"] = r.gains;
        d["objective"] = r.objective;
        return d;
      },
      py::arg("affinity"), py::arg("k"), py::arg("mode") = "facility_location", py::arg("threshold") = 0.9);

  m.def(
      "coverage_objective",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& affinity,
         const std::vector<std::size_t>& selected, const std::string& mode, double threshold) {
        return coverage_objective(to_affinity(affinity), selected, coverage_options(mode, threshold));
      },
      py::arg("affinity"), py::arg("selected"), py::arg("mode") = "facility_location", py::arg("threshold") = 0.9);

  m.def(
      "generate_volume",
      [](std::uint64_t seed, int index, const std::string& contrast) {
        SynthConfig cfg;
        cfg.seed = seed;
        const auto v = generate_volume(cfg, index, parse_contrast(contrast));
        py::dict masks;
        for (const auto& [c, mask] : v.annotations.masks) masks[py::int_(c.value)] = from_grid3(mask);
        py::dict d;
        d["id"] = v.volume.volume_id;
        d["image"] = from_grid3(v.volume.voxels);
        d["spacing"] = std::vector<double>{v.volume.spacing[2], v.volume.spacing[0], v.volume.spacing[1]};
        d["masks"] = masks;
        return d;
      },
      py::arg("seed"), py::arg("index"), py::arg("contrast") = "A");

  m.def(
      "resolve_config",
      [](const std::string& ini_text, const std::map<std::string, std::string>& overrides) {
        ConfigOverrides o(overrides.begin(), overrides.end());
        return render_experiment_config(parse_experiment_config(ini_text, o));
      },
      py::arg("ini_text") = "", py::arg("overrides") = std::map<std::string, std::string>{});

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "incseg");
        std::vector<char*> argv;
        for (auto& a : args) argv.push_back(a.data());
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = incseg::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));
}
