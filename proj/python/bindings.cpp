#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "cli.hpp"
#include "gsstyle/consistency.hpp"
#include "gsstyle/editor_protocol.hpp"
#include "gsstyle/encoder.hpp"
#include "gsstyle/error.hpp"
#include "gsstyle/image_io.hpp"
#include "gsstyle/mock_editor.hpp"
#include "gsstyle/pipeline.hpp"
#include "gsstyle/rasterizer.hpp"
#include "gsstyle/scene_io.hpp"

namespace py = pybind11;
using namespace gsstyle;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

// (H, W, C) for C > 1, (H, W) for single-channel buffers.
Array to_numpy(const ImageBuffer& img) {
  std::vector<py::ssize_t> shape = {img.height, img.width};
  if (img.channels != 1) shape.push_back(img.channels);
  Array out(shape);
  std::copy(img.data.begin(), img.data.end(), out.mutable_data());
  return out;
}

ImageBuffer from_numpy(const Array& a) {
  if (a.ndim() != 2 && a.ndim() != 3) throw ShapeError("expected an (H, W) or (H, W, C) array");
  const int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
  const int c = a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1;
  ImageBuffer img(w, h, c);
  std::copy(a.data(), a.data() + a.size(), img.data.begin());
  img.validate();
  return img;
}

py::object parse_json(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json dump_json(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

const Encoder& default_encoder() {
  static const Encoder enc = make_default_encoder();
  return enc;
}

}  // namespace

PYBIND11_MODULE(_gsstyle, m) {
  m.doc() = "Appearance-only style transfer for 3D Gaussian scenes";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<ChecksumError>(m, "ChecksumError", base.ptr());
  py::register_exception<InvalidArgument>(m, "InvalidArgument", base.ptr());
  py::register_exception<TimeoutError>(m, "TimeoutError", base.ptr());
  py::register_exception<DivergenceError>(m, "DivergenceError", base.ptr());

  py::class_<GaussianScene>(m, "Scene")
      .def(py::init<>())
      .def("__len__", &GaussianScene::size)
      .def_readwrite("sh_degree", &GaussianScene::sh_degree)
      .def_readwrite("background_color", &GaussianScene::background_color)
      .def_property_readonly("positions",
                             [](const GaussianScene& s) {
                               Array out({static_cast<py::ssize_t>(s.size()), py::ssize_t{3}});
                               double* p = out.mutable_data();
                               for (const auto& g : s.primitives)
                                 for (float v : g.position) *p++ = v;
                               return out;
                             })
      .def_property_readonly("opacities",
                             [](const GaussianScene& s) {
                               Array out({static_cast<py::ssize_t>(s.size())});
                               double* p = out.mutable_data();
                               for (const auto& g : s.primitives) *p++ = g.opacity();
                               return out;
                             })
      .def_property(
          "sh_coeffs",
          [](const GaussianScene& s) {
            const int rows = s.coeff_rows();
            Array out({static_cast<py::ssize_t>(s.size()), py::ssize_t{rows}, py::ssize_t{3}});
            double* p = out.mutable_data();
            for (const auto& g : s.primitives)
              for (int r = 0; r < rows; ++r)
                for (float v : g.sh_coeffs[r]) *p++ = v;
            return out;
          },
          [](GaussianScene& s, const Array& a) {
            const int rows = s.coeff_rows();
            if (a.ndim() != 3 || a.shape(0) != static_cast<py::ssize_t>(s.size()) || a.shape(1) != rows ||
                a.shape(2) != 3) {
              throw ShapeError("sh_coeffs must have shape (N, rows, 3)");
            }
            const double* p = a.data();
            for (auto& g : s.primitives)
              for (int r = 0; r < rows; ++r)
                for (auto& v : g.sh_coeffs[r]) v = static_cast<float>(*p++);
          });

  py::class_<CameraView>(m, "CameraView")
      .def(py::init([](std::string id, int width, int height, double fx, double fy, double cx, double cy,
                       const Eigen::Matrix4d& world_to_camera) {
             CameraView v;
             v.id = std::move(id);
             v.width = width;
             v.height = height;
             v.fx = fx;
             v.fy = fy;
             v.cx = cx;
             v.cy = cy;
             v.world_to_camera = world_to_camera;
             v.validate();
             return v;
           }),
           py::arg("id"), py::arg("width"), py::arg("height"), py::arg("fx"), py::arg("fy"), py::arg("cx"),
           py::arg("cy"), py::arg("world_to_camera") = Eigen::Matrix4d::Identity())
      .def_readwrite("id", &CameraView::id)
      .def_readwrite("width", &CameraView::width)
      .def_readwrite("height", &CameraView::height)
      .def_readwrite("fx", &CameraView::fx)
      .def_readwrite("fy", &CameraView::fy)
      .def_readwrite("cx", &CameraView::cx)
      .def_readwrite("cy", &CameraView::cy)
      .def_readwrite("world_to_camera", &CameraView::world_to_camera)
      .def("__repr__", [](const CameraView& v) {
        return "<CameraView '" + v.id + "' " + std::to_string(v.width) + "x" + std::to_string(v.height) + ">";
      });

  py::class_<RenderOptions>(m, "RenderOptions")
      .def(py::init<>())
      .def_readwrite("tile_size", &RenderOptions::tile_size)
      .def_readwrite("near_clip", &RenderOptions::near_clip)
      .def_readwrite("alpha_max", &RenderOptions::alpha_max)
      .def_readwrite("alpha_min", &RenderOptions::alpha_min)
      .def_readwrite("transmittance_stop", &RenderOptions::transmittance_stop)
      .def_readwrite("cov_dilation", &RenderOptions::cov_dilation)
      .def_readwrite("frustum_guard", &RenderOptions::frustum_guard);

  m.def("load_ply", [](const std::filesystem::path& p) { return load_ply(p); }, py::arg("path"));
  m.def("save_ply", [](const GaussianScene& s, const std::filesystem::path& p) { save_ply(s, p); },
        py::arg("scene"), py::arg("path"));
  m.def("load_dataset", [](const std::filesystem::path& p) { return load_dataset(p); }, py::arg("path"));
  m.def("read_image", [](const std::filesystem::path& p) { return to_numpy(read_image(p)); }, py::arg("path"));
  m.def("write_image", [](const Array& a, const std::filesystem::path& p) { write_image(from_numpy(a), p); },
        py::arg("image"), py::arg("path"));

  m.def(
      "render",
      [](const GaussianScene& s, const CameraView& v, const RenderOptions& o) {
        RenderOutput r;
        {
          py::gil_scoped_release release;
          r = render(s, v, o);
        }
        py::dict d;
        d["color"] = to_numpy(r.color);
        d["alpha"] = to_numpy(r.alpha);
        d["depth"] = to_numpy(r.depth);
        return d;
      },
      py::arg("scene"), py::arg("view"), py::arg("options") = RenderOptions{});

  m.def(
      "compute_edges", [](const Array& a, double t) { return to_numpy(compute_edges(from_numpy(a), t)); },
      py::arg("image"), py::arg("low_threshold") = 0.0);
  m.def(
      "color_transfer",
      [](const Array& image, const Array& style) {
        return to_numpy(color_transfer(from_numpy(image), compute_color_stats(from_numpy(style))));
      },
      py::arg("image"), py::arg("style"));

  m.def(
      "evaluate",
      [](const GaussianScene& s, const std::vector<CameraView>& views, int short_stride, int long_stride,
         bool perceptual) {
        ConsistencyOptions o;
        o.short_stride = short_stride;
        o.long_stride = long_stride;
        o.perceptual = perceptual;
        ConsistencyReport rep;
        {
          py::gil_scoped_release release;
          rep = evaluate(s, views, o, perceptual ? &default_encoder() : nullptr);
        }
        return parse_json(rep.to_json());
      },
      py::arg("scene"), py::arg("views"), py::arg("short_stride") = 1, py::arg("long_stride") = 7,
      py::arg("perceptual") = true);

  m.def("default_config", [] { return parse_json(to_json(StylizeConfig{})); });

  m.def(
      "stylize",
      [](const GaussianScene& s, const std::filesystem::path& dataset, const std::filesystem::path& style,
         const py::object& config, const std::string& prompt) {
        StylizeConfig c;
        if (!config.is_none()) apply_json(dump_json(config), c);
        StylizeResult res;
        {
          py::gil_scoped_release release;
          res = stylize(s, dataset, style, prompt, c, default_encoder());
        }
        return py::make_tuple(res.scene, parse_json(res.report.to_json()));
      },
      py::arg("scene"), py::arg("dataset"), py::arg("style"), py::arg("config") = py::none(),
      py::arg("prompt") = "");

  m.def(
      "serve_jobs",
      [](const std::filesystem::path& root) {
        py::gil_scoped_release release;
        return serve_jobs(root);
      },
      py::arg("root"), "Answers every pending job under root once with the mock editor.");

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "gsstyle");
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a CLI command; returns (exit code, stdout, stderr).");
}
