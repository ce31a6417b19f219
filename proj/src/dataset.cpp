#include <Eigen/LU>
#include <fstream>
#include <json.hpp>

#include "gsstyle/error.hpp"
#include "gsstyle/scene_io.hpp"

namespace gsstyle {
namespace {

using nlohmann::json;

double intrinsic(const json& frame, const json& root, std::initializer_list<const char*> keys,
                 const std::string& frame_name) {
  for (const json* src : {&frame, &root}) {
    for (const char* k : keys) {
      if (src->contains(k)) return (*src)[k].get<double>();
    }
  }
  throw FormatError("transforms.json: frame '" + frame_name + "' has no '" +
                    std::string(*keys.begin()) + "'");
}

}  // namespace

std::vector<CameraView> load_dataset(const std::filesystem::path& dir) {
  const auto manifest = dir / "transforms.json";
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open " + manifest.string());
  json root;
  try {
    root = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(manifest.string() + ": " + e.what());
  }
  if (!root.contains("frames") || !root["frames"].is_array()) {
    throw FormatError(manifest.string() + ": missing 'frames' array");
  }
  const std::string convention = root.value("camera_convention", "opencv");
  if (convention != "opencv" && convention != "opengl") {
    throw FormatError(manifest.string() + ": unknown camera_convention '" + convention + "'");
  }

  std::vector<CameraView> views;
  int index = 0;
  for (const auto& frame : root["frames"]) {
    CameraView view;
    const std::string file_path = frame.value("file_path", "");
    if (frame.contains("id")) {
      view.id = frame["id"].is_string() ? frame["id"].get<std::string>()
                                        : std::to_string(frame["id"].get<long>());
    } else if (!file_path.empty()) {
      view.id = std::filesystem::path(file_path).stem().string();
    } else {
      view.id = std::to_string(index);
    }
    if (!file_path.empty()) view.image_path = (dir / file_path).string();

    view.fx = intrinsic(frame, root, {"fx", "fl_x"}, view.id);
    // square pixels unless a separate vertical focal length is given
    const bool has_fy = frame.contains("fy") || frame.contains("fl_y") || root.contains("fy") ||
                        root.contains("fl_y");
    view.fy = has_fy ? intrinsic(frame, root, {"fy", "fl_y"}, view.id) : view.fx;
    view.cx = intrinsic(frame, root, {"cx"}, view.id);
    view.cy = intrinsic(frame, root, {"cy"}, view.id);
    view.width = static_cast<int>(intrinsic(frame, root, {"w"}, view.id));
    view.height = static_cast<int>(intrinsic(frame, root, {"h"}, view.id));

    if (!frame.contains("transform_matrix")) {
      throw FormatError("transforms.json: frame '" + view.id + "' has no transform_matrix");
    }
    const auto& m = frame["transform_matrix"];
    if (!m.is_array() || m.size() != 4) {
      throw FormatError("transforms.json: frame '" + view.id + "' matrix must be 4x4");
    }
    Eigen::Matrix4d c2w;
    for (int r = 0; r < 4; ++r) {
      if (!m[r].is_array() || m[r].size() != 4) {
        throw FormatError("transforms.json: frame '" + view.id + "' matrix must be 4x4");
      }
      for (int c = 0; c < 4; ++c) c2w(r, c) = m[r][c].get<double>();
    }
    if (convention == "opengl") c2w = c2w * Eigen::Vector4d(1, -1, -1, 1).asDiagonal();

    Eigen::FullPivLU<Eigen::Matrix4d> lu(c2w);
    if (!lu.isInvertible() || std::abs(c2w.determinant()) < 1e-12) {
      throw InvalidArgument("transforms.json: frame '" + view.id +
                            "' camera-to-world matrix is not invertible");
    }
    view.world_to_camera = lu.inverse();
    view.validate();
    views.push_back(std::move(view));
    ++index;
  }
  return views;
}

void save_dataset(const std::vector<CameraView>& views, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json root;
  root["camera_convention"] = "opencv";
  json frames = json::array();
  for (const auto& v : views) {
    json f;
    f["id"] = v.id;
    if (v.image_path) {
      const std::filesystem::path p(*v.image_path);
      const auto rel = p.lexically_relative(dir);
      f["file_path"] = (p.is_relative() || rel.empty()) ? p.generic_string() : rel.generic_string();
    }
    f["fx"] = v.fx;
    f["fy"] = v.fy;
    f["cx"] = v.cx;
    f["cy"] = v.cy;
    f["w"] = v.width;
    f["h"] = v.height;
    const Eigen::Matrix4d c2w = v.camera_to_world();
    json m = json::array();
    for (int r = 0; r < 4; ++r) {
      m.push_back({c2w(r, 0), c2w(r, 1), c2w(r, 2), c2w(r, 3)});
    }
    f["transform_matrix"] = m;
    frames.push_back(std::move(f));
  }
  root["frames"] = std::move(frames);
  std::ofstream out(dir / "transforms.json");
  if (!out) throw IoError("cannot write " + (dir / "transforms.json").string());
  out << root.dump(2) << "\n";
}

}  // namespace gsstyle
