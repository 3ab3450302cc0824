#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "docgeo/annotate.hpp"
#include "docgeo/cli.hpp"
#include "docgeo/error.hpp"
#include "docgeo/formats.hpp"
#include "docgeo/geometry.hpp"
#include "docgeo/metrics.hpp"
#include "docgeo/synthgen.hpp"
#include "docgeo/train.hpp"

namespace py = pybind11;
using namespace docgeo;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Image to_image(const Array& a) {
  const auto info = a.request();
  require(info.ndim == 2 || info.ndim == 3, ErrorCode::ShapeMismatch, "image must be HxW or HxWxC");
  const int h = static_cast<int>(info.shape[0]), w = static_cast<int>(info.shape[1]);
  const int c = info.ndim == 3 ? static_cast<int>(info.shape[2]) : 1;
  Image img(h, w, c);
  const double* p = static_cast<const double*>(info.ptr);
  std::copy(p, p + img.size(), img.data.begin());
  return img;
}

py::array_t<double> from_image(const Image& img) {
  std::vector<py::ssize_t> shape{img.height, img.width};
  if (img.channels > 1) shape.push_back(img.channels);
  py::array_t<double> a(shape);
  std::copy(img.data.begin(), img.data.end(), a.mutable_data());
  return a;
}

py::array_t<std::uint8_t> from_mask(const Mask& m) {
  py::array_t<std::uint8_t> a({m.height, m.width});
  std::copy(m.data.begin(), m.data.end(), a.mutable_data());
  return a;
}

// (H,W,2) float32 <-> WarpField
WarpField to_flow(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  const auto info = a.request();
  require(info.ndim == 3 && info.shape[2] == 2, ErrorCode::ShapeMismatch, "flow must be HxWx2");
  WarpField f = identity_flow(static_cast<int>(info.shape[0]), static_cast<int>(info.shape[1]));
  const float* p = static_cast<const float*>(info.ptr);
  for (std::size_t i = 0; i < f.dx.size(); ++i) {
    f.dx[i] = p[2 * i];
    f.dy[i] = p[2 * i + 1];
  }
  return f;
}

py::array_t<float> from_flow(const WarpField& f) {
  py::array_t<float> a({f.height, f.width, 2});
  float* p = a.mutable_data();
  for (std::size_t i = 0; i < f.dx.size(); ++i) {
    p[2 * i] = f.dx[i];
    p[2 * i + 1] = f.dy[i];
  }
  return a;
}

py::list lines_to_py(const TextlineSet& lines) {
  py::list out;
  for (const Textline& l : lines) {
    py::list pts;
    for (const Point& p : l.points) pts.append(py::make_tuple(p.x, p.y));
    py::dict d;
    d["points"] = pts;
    d["thickness"] = l.thickness;
    out.append(d);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_docgeo, m) {
  m.doc() = "document image rectification: synthesis, geometry, metrics, models";
  m.attr("__version__") = cli::tool_version();

  static py::exception<Error> exc(m, "DocgeoError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      exc((std::string(error_code_name(e.code())) + ": " + e.what()).c_str());
    }
  });

  m.def("generate_sample", [](std::uint64_t seed, int height, int width) {
    const auto s = synthgen::generate_sample(seed, height, width);
    py::dict d;
    d["distorted"] = from_image(s.distorted);
    d["flat"] = from_image(s.flat);
    d["flow"] = from_flow(s.gt_flow);
    d["mask"] = from_mask(s.gt_mask);
    d["kind"] = synthgen::kind_name(s.params.kind);
    d["lines"] = lines_to_py(s.gt_lines);
    d["inversion_residual"] = s.inversion_residual;
    return d;
  }, py::arg("seed"), py::arg("height") = 128, py::arg("width") = 128);

  m.def("apply_flow", [](const Array& img, const py::array_t<float, py::array::c_style | py::array::forcecast>& flow) {
    return from_image(apply_flow(to_image(img), to_flow(flow)));
  }, py::arg("image"), py::arg("flow"), "backward warp; output has the flow's size");

  m.def("ms_ssim", [](const Array& a, const Array& b) { return metrics::ms_ssim(to_image(a), to_image(b)); });
  m.def("ssim", [](const Array& a, const Array& b) { return metrics::ssim(to_image(a), to_image(b)); });
  m.def("resize_to_area", [](const Array& a, double area) { return from_image(metrics::resize_to_area(to_image(a), area)); },
        py::arg("image"), py::arg("area") = metrics::kEvalArea);
  m.def("ld_from_flows", [](const py::array_t<float, py::array::c_style | py::array::forcecast>& gt,
                            const py::array_t<float, py::array::c_style | py::array::forcecast>& pred) {
    const auto fm = metrics::matches_from_flows(to_flow(gt), to_flow(pred));
    return metrics::local_distortion(fm.matches, fm.valid);
  }, py::arg("gt_flow"), py::arg("pred_flow"));
  m.def("edit_distance", [](const std::string& ref, const std::string& hyp) {
    const auto e = metrics::edit_distance(ref, hyp);
    py::dict d;
    d["ed"] = e.ed;
    d["deletions"] = e.deletions;
    d["insertions"] = e.insertions;
    d["substitutions"] = e.substitutions;
    return d;
  });
  m.def("cer", &metrics::cer, py::arg("ref"), py::arg("hyp"));
  m.attr("MS_SSIM_WEIGHTS") = metrics::kMsSsimWeights;

  m.def("detect_lines", [](const Array& img) { return lines_to_py(annotate::detect_lines(to_image(img))); });

  m.def("read_flow", [](const std::filesystem::path& p) { return from_flow(formats::read_warp_field(p)); });
  m.def("write_flow", [](const std::filesystem::path& p,
                         const py::array_t<float, py::array::c_style | py::array::forcecast>& f) {
    formats::write_warp_field(p, to_flow(f));
  });
  m.def("read_png", [](const std::filesystem::path& p) { return from_image(formats::read_png(p)); });
  m.def("write_png", [](const std::filesystem::path& p, const Array& img) { formats::write_png(p, to_image(img)); });

  py::class_<model::DocGeoNet>(m, "Model")
      .def_static("load", [](const std::filesystem::path& p) { return train::load_model(p); })
      .def_property_readonly("config", [](const model::DocGeoNet& n) { return n.config().to_json().dump(); })
      .def_property_readonly("num_params", [](const model::DocGeoNet& n) { return nn::parameter_count(n.params()); })
      .def("predict_flow", [](const model::DocGeoNet& n, const Array& img) {
        const Image in = to_image(img);
        py::gil_scoped_release nogil;
        const WarpField f = train::predict_flow(n, in);
        py::gil_scoped_acquire gil;
        return from_flow(f);
      }, py::arg("image"), "flow at the model resolution for an HxWx3 image of that size");

  m.def("cmd_generate", [](const std::filesystem::path& out, int n, std::uint64_t seed, int size) {
    cli::GenerateOptions o;
    o.out = out;
    o.n = n;
    o.seed = seed;
    o.height = o.width = size;
    return cli::cmd_generate(o).to_json().dump();
  }, py::arg("out"), py::arg("n"), py::arg("seed") = 0, py::arg("size") = 128, "returns the manifest JSON");
  m.def("cmd_report", [](const std::filesystem::path& report, const std::filesystem::path& out) {
    return cli::cmd_report({report, std::nullopt, out});
  });
}
