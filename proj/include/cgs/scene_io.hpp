#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cgs/camera.hpp"
#include "cgs/primitives.hpp"
#include "cgs/rd_optimizer.hpp"
#include "cgs/renderer.hpp"
#include "cgs/temporal.hpp"

namespace cgs {

// Scene directory:
//   cameras.json            {"cameras": [{"name", "R", "t", "fx", "fy", "cx", "cy", "width", "height", "holdout"}]}
//   points.txt              "x y z" rows, '#' comments
//   images/<view>/<frame>.ppm
struct SceneData {
  std::vector<Camera> cameras;
  std::vector<std::string> view_names;
  std::vector<std::uint8_t> holdout;     // per view
  std::vector<std::vector<Image>> frames;  // frames[t][view]
  std::vector<Vec3> points;

  std::size_t frame_count() const { return frames.size(); }
  // Views of frame t with the given holdout flag.
  std::vector<TrainView> views(std::size_t t, bool held_out) const;
  // Training views of frame t, or all views when none is held out.
  std::vector<TrainView> training_views(std::size_t t) const;
  // Held-out views of frame t, or all views when none is held out.
  std::vector<TrainView> evaluation_views(std::size_t t) const;
};

// All readers throw DataError naming the offending path.
std::vector<Camera> read_cameras(const std::string& path, std::vector<std::string>* names = nullptr,
                                 std::vector<std::uint8_t>* holdout = nullptr);
void write_cameras(const std::string& path, std::span<const Camera> cameras, std::span<const std::string> names,
                   std::span<const std::uint8_t> holdout);
std::vector<Vec3> read_points(const std::string& path);
void write_points(const std::string& path, std::span<const Vec3> points);

SceneData load_scene(const std::string& dir);
void save_scene(const std::string& dir, const SceneData& scene);

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  TemporalConfig temporal;
};

// "key = value" lines, '#' comments.
std::map<std::string, std::string> read_key_values(const std::string& path);
// Unknown keys or malformed values throw DataError.
void apply_config(const std::map<std::string, std::string>& kv, RunConfig& config);
RunConfig read_config(const std::string& path);

// Lossless model directory (model.bin with every value as float64).
void save_model(const std::string& dir, const SceneModel& model);
SceneModel load_model(const std::string& dir);
Bytes serialize_model(const SceneModel& model);
SceneModel deserialize_model(std::span<const std::uint8_t> bytes);

Bytes read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace cgs
