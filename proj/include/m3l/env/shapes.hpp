#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3l/env/geometry.hpp"

namespace m3l::env {

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "' (expected train|test)");
}

struct PegShape {
  std::string id;
  Polygon polygon;  // meters, counter-clockwise, about the grip reference point
  Split split = Split::train;
};

inline constexpr std::size_t kTrainShapeCount = 18;
inline constexpr std::size_t kTestShapeCount = 2;

/// Checks the per-shape invariants; throws std::invalid_argument naming the first
/// violated one. `half_span` is the largest admissible |coordinate| (half pad width).
inline void validate_shape(const PegShape& s, double half_span) {
  const std::string who = "peg shape '" + s.id + "': ";
  if (s.id.empty()) throw std::invalid_argument("peg shape: empty id");
  if (s.polygon.size() < 3) throw std::invalid_argument(who + "needs at least 3 vertices");
  if (!is_simple(s.polygon)) throw std::invalid_argument(who + "polygon is not simple");
  if (signed_area(s.polygon) <= 0.0) throw std::invalid_argument(who + "vertices are not counter-clockwise");
  for (const Vec2& v : s.polygon) {
    if (std::abs(v.x) > half_span || std::abs(v.y) > half_span) {
      throw std::invalid_argument(who + "does not fit within the gripper pad span");
    }
  }
}

class ShapeLibrary {
 public:
  ShapeLibrary() = default;
  explicit ShapeLibrary(std::vector<PegShape> shapes) : shapes_(std::move(shapes)) {}

  const std::vector<PegShape>& shapes() const { return shapes_; }

  std::vector<const PegShape*> split(Split s) const {
    std::vector<const PegShape*> out;
    for (const auto& shape : shapes_) {
      if (shape.split == s) out.push_back(&shape);
    }
    return out;
  }

  const PegShape& find(const std::string& id) const {
    for (const auto& s : shapes_) {
      if (s.id == id) return s;
    }
    throw std::invalid_argument("unknown peg shape '" + id + "'");
  }

  void validate(double half_span) const {
    for (const auto& s : shapes_) validate_shape(s, half_span);
    for (std::size_t i = 0; i < shapes_.size(); ++i) {
      for (std::size_t j = i + 1; j < shapes_.size(); ++j) {
        if (shapes_[i].id == shapes_[j].id) throw std::invalid_argument("duplicate peg shape id '" + shapes_[i].id + "'");
      }
    }
    if (split(Split::train).size() != kTrainShapeCount) {
      throw std::invalid_argument("shape library must hold 18 training shapes");
    }
    if (split(Split::test).size() != kTestShapeCount) {
      throw std::invalid_argument("shape library must hold 2 test shapes");
    }
  }

 private:
  std::vector<PegShape> shapes_;
};

inline void to_json(nlohmann::json& j, const PegShape& s) {
  nlohmann::json verts = nlohmann::json::array();
  for (const Vec2& v : s.polygon) verts.push_back({v.x, v.y});
  j = {{"id", s.id}, {"split", to_string(s.split)}, {"vertices", verts}};
}

inline void from_json(const nlohmann::json& j, PegShape& s) {
  for (const auto& [key, _] : j.items()) {
    if (key != "id" && key != "split" && key != "vertices") {
      throw std::invalid_argument("peg shape: unknown key '" + key + "'");
    }
  }
  s.id = j.at("id").get<std::string>();
  s.split = parse_split(j.at("split").get<std::string>());
  s.polygon.clear();
  for (const auto& v : j.at("vertices")) s.polygon.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
}

inline nlohmann::json library_to_json(const ShapeLibrary& lib) {
  return {{"format", "m3l-peg-shapes"}, {"version", 1}, {"shapes", lib.shapes()}};
}

inline ShapeLibrary library_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "m3l-peg-shapes") throw std::invalid_argument("not a peg shape library");
  if (j.value("version", 0) != 1) throw std::invalid_argument("unsupported peg shape library version");
  return ShapeLibrary(j.at("shapes").get<std::vector<PegShape>>());
}

inline ShapeLibrary load_library(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open shape library " + path);
  return library_from_json(nlohmann::json::parse(in));
}

inline void save_library(const ShapeLibrary& lib, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write shape library " + path);
  out << library_to_json(lib).dump(2) << '\n';
}

namespace detail {

inline PegShape from_mm(std::string id, Split split, std::initializer_list<Vec2> mm) {
  PegShape s{std::move(id), {}, split};
  for (const Vec2& v : mm) s.polygon.push_back(1e-3 * v);
  if (signed_area(s.polygon) < 0.0) std::reverse(s.polygon.begin(), s.polygon.end());
  return s;
}

inline PegShape regular(std::string id, int sides, double radius_mm, double phase_deg) {
  PegShape s{std::move(id), {}, Split::train};
  for (int i = 0; i < sides; ++i) {
    const double a = (phase_deg + 360.0 * i / sides) * std::numbers::pi / 180.0;
    s.polygon.push_back({1e-3 * radius_mm * std::cos(a), 1e-3 * radius_mm * std::sin(a)});
  }
  return s;
}

inline PegShape rounded(std::string id, Split split, double half_len_mm, double radius_mm, int arc_steps) {
  PegShape s{std::move(id), {}, split};
  for (int i = 0; i <= arc_steps; ++i) {
    const double a = -std::numbers::pi / 2 + std::numbers::pi * i / arc_steps;
    s.polygon.push_back({1e-3 * (half_len_mm + radius_mm * std::cos(a)), 1e-3 * radius_mm * std::sin(a)});
  }
  for (int i = 0; i <= arc_steps; ++i) {
    const double a = std::numbers::pi / 2 + std::numbers::pi * i / arc_steps;
    s.polygon.push_back({1e-3 * (-half_len_mm + radius_mm * std::cos(a)), 1e-3 * radius_mm * std::sin(a)});
  }
  return s;
}

inline PegShape half_disc(std::string id, double radius_mm, double base_mm, int arc_steps) {
  PegShape s{std::move(id), {}, Split::train};
  for (int i = 0; i <= arc_steps; ++i) {
    const double a = std::numbers::pi * i / arc_steps;
    s.polygon.push_back({1e-3 * radius_mm * std::cos(a), 1e-3 * (base_mm + radius_mm * std::sin(a))});
  }
  return s;
}

inline ShapeLibrary build_default_library() {
  const Split tr = Split::train;
  std::vector<PegShape> s;
  s.push_back(from_mm("square", tr, {{-9, -9}, {9, -9}, {9, 9}, {-9, 9}}));
  s.push_back(from_mm("cross", tr, {{-4, -11}, {4, -11}, {4, -4}, {11, -4}, {11, 4}, {4, 4}, {4, 11}, {-4, 11}, {-4, 4}, {-11, 4}, {-11, -4}, {-4, -4}}));
  s.push_back(from_mm("l_shape", tr, {{-10, -10}, {10, -10}, {10, -2}, {-2, -2}, {-2, 10}, {-10, 10}}));
  s.push_back(from_mm("t_shape", tr, {{-4, -10}, {4, -10}, {4, 4}, {11, 4}, {11, 10}, {-11, 10}, {-11, 4}, {-4, 4}}));
  s.push_back(from_mm("u_shape", tr, {{-10, -10}, {10, -10}, {10, 10}, {4, 10}, {4, -3}, {-4, -3}, {-4, 10}, {-10, 10}}));
  s.push_back(from_mm("notched_block", tr, {{-11, -7}, {11, -7}, {11, 7}, {3, 7}, {3, 2}, {-3, 2}, {-3, 7}, {-11, 7}}));
  s.push_back(regular("hexagon", 6, 10.0, 0.0));
  s.push_back(regular("octagon", 8, 10.0, 22.5));
  s.push_back(from_mm("triangle", tr, {{-10, -8}, {10, -8}, {0, 10}}));
  s.push_back(from_mm("trapezoid", tr, {{-11, -8}, {11, -8}, {6, 8}, {-6, 8}}));
  s.push_back(regular("pentagon", 5, 10.0, 90.0));
  s.push_back(from_mm("diamond", tr, {{0, -11}, {11, 0}, {0, 11}, {-11, 0}}));
  s.push_back(from_mm("h_shape", tr, {{-10, -10}, {-4, -10}, {-4, -3}, {4, -3}, {4, -10}, {10, -10}, {10, 10}, {4, 10}, {4, 3}, {-4, 3}, {-4, 10}, {-10, 10}}));
  s.push_back(from_mm("zigzag", tr, {{-10, -10}, {2, -10}, {2, -2}, {10, -2}, {10, 10}, {-2, 10}, {-2, 2}, {-10, 2}}));
  s.push_back(from_mm("arrow", tr, {{-10, -4}, {2, -4}, {2, -10}, {11, 0}, {2, 10}, {2, 4}, {-10, 4}}));
  s.push_back(from_mm("star", tr, {{11, 0}, {2.8, 2.8}, {0, 11}, {-2.8, 2.8}, {-11, 0}, {-2.8, -2.8}, {0, -11}, {2.8, -2.8}}));
  s.push_back(rounded("stadium", tr, 6.0, 5.0, 8));
  s.push_back(half_disc("half_disc", 11.0, -5.0, 12));
  s.push_back(from_mm("rectangle", Split::test, {{-7, -11}, {7, -11}, {7, 11}, {-7, 11}}));
  s.push_back(from_mm("v_shape", Split::test, {{-2, -10}, {2, -10}, {11, 10}, {5, 10}, {0, -1}, {-5, 10}, {-11, 10}}));
  return ShapeLibrary(std::move(s));
}

}  // namespace detail

/// Built-in library: 18 training pegs and the two held-out test pegs.
inline const ShapeLibrary& default_library() {
  static const ShapeLibrary lib = detail::build_default_library();
  return lib;
}

}  // namespace m3l::env
