#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "gsstyle/error.hpp"
#include "gsstyle/scene_io.hpp"

namespace gsstyle {
namespace {

static_assert(std::endian::native == std::endian::little,
              "PLY reader assumes a little-endian host");

int property_size(const std::string& type) {
  static const std::map<std::string, int> kSizes = {
      {"char", 1},   {"uchar", 1},  {"int8", 1},    {"uint8", 1},  {"short", 2},
      {"ushort", 2}, {"int16", 2},  {"uint16", 2},  {"int", 4},    {"uint", 4},
      {"int32", 4},  {"uint32", 4}, {"float", 4},   {"float32", 4}, {"double", 8},
      {"float64", 8}};
  auto it = kSizes.find(type);
  if (it == kSizes.end()) throw FormatError("unknown PLY property type '" + type + "'");
  return it->second;
}

struct Property {
  std::string name;
  std::string type;
  int offset = 0;
};

struct Element {
  std::string name;
  std::size_t count = 0;
  std::vector<Property> properties;
  int stride = 0;
};

std::vector<std::string> property_names(int sh_degree) {
  std::vector<std::string> names = {"x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"};
  const int rest = 3 * (sh_rows(sh_degree) - 1);
  for (int i = 0; i < rest; ++i) names.push_back("f_rest_" + std::to_string(i));
  names.insert(names.end(), {"opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1",
                             "rot_2", "rot_3"});
  return names;
}

}  // namespace

GaussianScene load_ply(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open PLY file " + path.string());

  std::string line;
  if (!std::getline(in, line) || line != "ply") {
    throw FormatError(path.string() + ": missing 'ply' magic");
  }
  std::vector<Element> elements;
  bool saw_format = false;
  while (true) {
    if (!std::getline(in, line)) throw FormatError(path.string() + ": header has no end_header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line == "end_header") break;
    std::istringstream ls(line);
    std::string keyword;
    ls >> keyword;
    if (keyword == "format") {
      std::string encoding;
      ls >> encoding;
      if (encoding != "binary_little_endian") {
        throw FormatError(path.string() + ": unsupported PLY encoding '" + encoding +
                          "' (only binary_little_endian is supported)");
      }
      saw_format = true;
    } else if (keyword == "element") {
      Element e;
      ls >> e.name >> e.count;
      if (!ls) throw FormatError(path.string() + ": malformed element line '" + line + "'");
      elements.push_back(std::move(e));
    } else if (keyword == "property") {
      if (elements.empty()) throw FormatError(path.string() + ": property before element");
      Property p;
      ls >> p.type;
      if (p.type == "list") {
        throw FormatError(path.string() + ": list properties are not supported");
      }
      ls >> p.name;
      Element& e = elements.back();
      p.offset = e.stride;
      e.stride += property_size(p.type);
      e.properties.push_back(std::move(p));
    } else if (keyword == "comment" || keyword == "obj_info" || keyword.empty()) {
      continue;
    } else {
      throw FormatError(path.string() + ": unexpected header line '" + line + "'");
    }
  }
  if (!saw_format) throw FormatError(path.string() + ": header lacks a format line");

  std::size_t skip_bytes = 0;
  const Element* vertex = nullptr;
  for (const auto& e : elements) {
    if (e.name == "vertex") {
      vertex = &e;
      break;
    }
    skip_bytes += e.count * e.stride;
  }
  if (vertex == nullptr) throw FormatError(path.string() + ": no vertex element");

  std::map<std::string, const Property*> by_name;
  for (const auto& p : vertex->properties) by_name[p.name] = &p;

  int rest_count = 0;
  while (by_name.count("f_rest_" + std::to_string(rest_count))) ++rest_count;
  std::optional<int> degree;
  for (int d = 0; d <= 3; ++d) {
    if (3 * (sh_rows(d) - 1) == rest_count) degree = d;
  }
  if (!degree) {
    throw FormatError(path.string() + ": " + std::to_string(rest_count) +
                      " f_rest properties do not match any SH degree 0-3");
  }

  auto field = [&](const std::string& name) -> int {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw FormatError(path.string() + ": missing vertex property '" + name + "'");
    }
    if (it->second->type != "float" && it->second->type != "float32") {
      throw FormatError(path.string() + ": property '" + name + "' must be float");
    }
    return it->second->offset;
  };

  GaussianScene scene;
  scene.sh_degree = *degree;
  const int rows = scene.coeff_rows();
  const int pos[3] = {field("x"), field("y"), field("z")};
  const int dc[3] = {field("f_dc_0"), field("f_dc_1"), field("f_dc_2")};
  std::vector<int> rest(rest_count);
  for (int i = 0; i < rest_count; ++i) rest[i] = field("f_rest_" + std::to_string(i));
  const int opacity = field("opacity");
  const int scale[3] = {field("scale_0"), field("scale_1"), field("scale_2")};
  const int rot[4] = {field("rot_0"), field("rot_1"), field("rot_2"), field("rot_3")};

  in.seekg(static_cast<std::streamoff>(skip_bytes), std::ios::cur);
  std::vector<char> buffer(vertex->count * vertex->stride);
  in.read(buffer.data(), static_cast<std::streamsize>(buffer.size()));
  if (in.gcount() != static_cast<std::streamsize>(buffer.size())) {
    throw FormatError(path.string() + ": vertex data truncated");
  }

  scene.primitives.resize(vertex->count);
  for (std::size_t v = 0; v < vertex->count; ++v) {
    const char* rec = buffer.data() + v * vertex->stride;
    auto get = [rec](int offset) {
      float f;
      std::memcpy(&f, rec + offset, sizeof f);
      return f;
    };
    GaussianPrimitive& g = scene.primitives[v];
    for (int k = 0; k < 3; ++k) {
      g.position[k] = get(pos[k]);
      g.log_scale[k] = get(scale[k]);
      g.sh_coeffs[0][k] = get(dc[k]);
    }
    for (int k = 0; k < 4; ++k) g.rotation[k] = get(rot[k]);
    g.opacity_logit = get(opacity);
    for (int c = 0; c < 3; ++c) {
      for (int b = 1; b < rows; ++b) g.sh_coeffs[b][c] = get(rest[c * (rows - 1) + (b - 1)]);
    }
  }
  return scene;
}

void save_ply(const GaussianScene& scene, const std::filesystem::path& path) {
  if (scene.empty()) throw InvalidArgument("refusing to write an empty scene to " + path.string());
  const int rows = scene.coeff_rows();
  const auto names = property_names(scene.sh_degree);

  std::ostringstream header;
  header << "ply\nformat binary_little_endian 1.0\nelement vertex " << scene.size() << "\n";
  for (const auto& n : names) header << "property float " << n << "\n";
  header << "end_header\n";

  std::vector<float> record;
  record.reserve(names.size());
  std::string body;
  body.reserve(scene.size() * names.size() * sizeof(float));
  for (const auto& g : scene.primitives) {
    record.clear();
    record.insert(record.end(), g.position.begin(), g.position.end());
    record.insert(record.end(), {0.0F, 0.0F, 0.0F});
    record.insert(record.end(), g.sh_coeffs[0].begin(), g.sh_coeffs[0].end());
    for (int c = 0; c < 3; ++c) {
      for (int b = 1; b < rows; ++b) record.push_back(g.sh_coeffs[b][c]);
    }
    record.push_back(g.opacity_logit);
    record.insert(record.end(), g.log_scale.begin(), g.log_scale.end());
    record.insert(record.end(), g.rotation.begin(), g.rotation.end());
    body.append(reinterpret_cast<const char*>(record.data()), record.size() * sizeof(float));
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write PLY file " + path.string());
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace gsstyle
