#include "cgs/scene_io.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include <json.hpp>

#include "cgs/codec.hpp"

namespace cgs {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<TrainView> SceneData::views(std::size_t t, bool held_out) const {
  if (t >= frames.size()) throw std::invalid_argument("frame index out of range");
  std::vector<TrainView> out;
  for (std::size_t v = 0; v < cameras.size(); ++v)
    if (static_cast<bool>(holdout[v]) == held_out) out.push_back({cameras[v], frames[t][v]});
  return out;
}

std::vector<TrainView> SceneData::training_views(std::size_t t) const {
  auto v = views(t, false);
  return v.empty() ? views(t, true) : v;
}

std::vector<TrainView> SceneData::evaluation_views(std::size_t t) const {
  auto v = views(t, true);
  return v.empty() ? views(t, false) : v;
}

Bytes read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  return Bytes(std::istreambuf_iterator<char>(f), {});
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("cannot write " + path);
}

namespace {

template <std::size_t N>
std::array<double, N> json_array(const json& j, const char* key, const std::string& path) {
  if (!j.contains(key) || !j[key].is_array() || j[key].size() != N)
    throw DataError(path + ": camera field '" + key + "' must be an array of " + std::to_string(N) + " numbers");
  std::array<double, N> a{};
  for (std::size_t i = 0; i < N; ++i) a[i] = j[key][i].get<double>();
  return a;
}

}  // namespace

std::vector<Camera> read_cameras(const std::string& path, std::vector<std::string>* names,
                                 std::vector<std::uint8_t>* holdout) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path);
  std::vector<Camera> cams;
  try {
    const json doc = json::parse(f);
    const json& list = doc.is_array() ? doc : doc.at("cameras");
    for (std::size_t i = 0; i < list.size(); ++i) {
      const json& c = list[i];
      Camera cam;
      cam.rotation = json_array<9>(c, "R", path);
      cam.translation = json_array<3>(c, "t", path);
      cam.fx = c.at("fx").get<double>();
      cam.fy = c.at("fy").get<double>();
      cam.cx = c.at("cx").get<double>();
      cam.cy = c.at("cy").get<double>();
      cam.width = c.at("width").get<int>();
      cam.height = c.at("height").get<int>();
      if (cam.width <= 0 || cam.height <= 0) throw DataError(path + ": camera " + std::to_string(i) + " has no pixels");
      cams.push_back(cam);
      if (names) names->push_back(c.value("name", std::to_string(i)));
      if (holdout) holdout->push_back(c.value("holdout", false) ? 1 : 0);
    }
  } catch (const json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  if (cams.empty()) throw DataError(path + ": no cameras");
  return cams;
}

void write_cameras(const std::string& path, std::span<const Camera> cameras, std::span<const std::string> names,
                   std::span<const std::uint8_t> holdout) {
  json list = json::array();
  for (std::size_t i = 0; i < cameras.size(); ++i) {
    const Camera& c = cameras[i];
    json j;
    j["name"] = i < names.size() ? names[i] : std::to_string(i);
    j["R"] = c.rotation;
    j["t"] = c.translation;
    j["fx"] = c.fx;
    j["fy"] = c.fy;
    j["cx"] = c.cx;
    j["cy"] = c.cy;
    j["width"] = c.width;
    j["height"] = c.height;
    j["holdout"] = i < holdout.size() && holdout[i];
    list.push_back(j);
  }
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << json{{"cameras", list}}.dump(2) << "\n";
}

std::vector<Vec3> read_points(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path);
  std::vector<Vec3> pts;
  std::string line;
  for (std::size_t n = 1; std::getline(f, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    Vec3 p;
    if (!(ss >> p[0])) continue;
    if (!(ss >> p[1] >> p[2]) || !std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2]))
      throw DataError(path + ":" + std::to_string(n) + ": expected 'x y z'");
    pts.push_back(p);
  }
  if (pts.empty()) throw DataError(path + ": no points");
  return pts;
}

void write_points(const std::string& path, std::span<const Vec3> points) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f.precision(17);
  for (const auto& p : points) f << p[0] << ' ' << p[1] << ' ' << p[2] << '\n';
}

namespace {

std::string frame_name(std::size_t t) {
  std::string s = std::to_string(t);
  return std::string(s.size() < 4 ? 4 - s.size() : 0, '0') + s;
}

// Numeric frame stems of a view directory, ascending.
std::vector<std::pair<long, fs::path>> frame_files(const fs::path& dir) {
  std::vector<std::pair<long, fs::path>> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".ppm") continue;
    const std::string stem = e.path().stem().string();
    long v = 0;
    const auto [p, ec] = std::from_chars(stem.data(), stem.data() + stem.size(), v);
    if (ec != std::errc() || p != stem.data() + stem.size())
      throw DataError(e.path().string() + ": frame file name must be a number");
    out.emplace_back(v, e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

SceneData load_scene(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("scene directory not found: " + dir);
  SceneData s;
  s.cameras = read_cameras((fs::path(dir) / "cameras.json").string(), &s.view_names, &s.holdout);
  s.points = read_points((fs::path(dir) / "points.txt").string());
  std::size_t frames = 0;
  std::vector<std::vector<std::pair<long, fs::path>>> files;
  for (std::size_t v = 0; v < s.cameras.size(); ++v) {
    const fs::path vd = fs::path(dir) / "images" / s.view_names[v];
    if (!fs::is_directory(vd)) throw DataError("view directory not found: " + vd.string());
    files.push_back(frame_files(vd));
    if (files.back().empty()) throw DataError("no frames in " + vd.string());
    if (v == 0) frames = files.back().size();
    if (files.back().size() != frames) throw DataError(vd.string() + ": frame count differs from other views");
  }
  s.frames.assign(frames, {});
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t v = 0; v < s.cameras.size(); ++v) {
      if (files[v][t].first != files[0][t].first)
        throw DataError(files[v][t].second.string() + ": frame numbering differs from other views");
      Image img = read_ppm(files[v][t].second.string());
      if (img.width != s.cameras[v].width || img.height != s.cameras[v].height)
        throw DataError(files[v][t].second.string() + ": image size does not match its camera");
      s.frames[t].push_back(std::move(img));
    }
  return s;
}

void save_scene(const std::string& dir, const SceneData& s) {
  fs::create_directories(dir);
  std::vector<std::string> names = s.view_names;
  for (std::size_t v = names.size(); v < s.cameras.size(); ++v) names.push_back(std::to_string(v));
  write_cameras((fs::path(dir) / "cameras.json").string(), s.cameras, names, s.holdout);
  write_points((fs::path(dir) / "points.txt").string(), s.points);
  for (std::size_t v = 0; v < s.cameras.size(); ++v) {
    const fs::path vd = fs::path(dir) / "images" / names[v];
    fs::create_directories(vd);
    for (std::size_t t = 0; t < s.frames.size(); ++t)
      write_ppm((vd / (frame_name(t) + ".ppm")).string(), s.frames[t][v]);
  }
}

std::map<std::string, std::string> read_key_values(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path);
  std::map<std::string, std::string> kv;
  const auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  std::string line;
  for (std::size_t n = 1; std::getline(f, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError(path + ":" + std::to_string(n) + ": expected 'key = value'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

namespace {

double parse_double(const std::string& key, const std::string& v) {
  double d = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), d);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(d))
    throw DataError("config: '" + key + "' expects a number, got '" + v + "'");
  return d;
}

long long parse_int(const std::string& key, const std::string& v) {
  long long i = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), i);
  if (ec != std::errc() || p != v.data() + v.size())
    throw DataError("config: '" + key + "' expects an integer, got '" + v + "'");
  return i;
}

template <typename T>
std::function<void(const std::string&, const std::string&)> unsigned_field(T& out) {
  return [&out](const std::string& k, const std::string& v) {
    const long long i = parse_int(k, v);
    if (i < 0) throw DataError("config: '" + k + "' must be non-negative");
    out = static_cast<T>(i);
  };
}

std::function<void(const std::string&, const std::string&)> int_field(int& out) {
  return [&out](const std::string& k, const std::string& v) { out = static_cast<int>(parse_int(k, v)); };
}

std::function<void(const std::string&, const std::string&)> double_field(double& out) {
  return [&out](const std::string& k, const std::string& v) { out = parse_double(k, v); };
}

std::function<void(const std::string&, const std::string&)> bool_field(bool& out) {
  return [&out](const std::string& k, const std::string& v) {
    if (v == "true" || v == "1") out = true;
    else if (v == "false" || v == "0") out = false;
    else throw DataError("config: '" + k + "' expects true or false, got '" + v + "'");
  };
}

// levels,base_resolution,growth,log2_table_size,feature_dim
std::function<void(const std::string&, const std::string&)> grid_field(GridConfig& out) {
  return [&out](const std::string& k, const std::string& v) {
    std::vector<std::uint32_t> f;
    std::string compact = v;
    std::erase(compact, ' ');
    std::stringstream ss(compact);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      const long long i = parse_int(k, tok);
      if (i <= 0) throw DataError("config: '" + k + "' entries must be positive");
      f.push_back(static_cast<std::uint32_t>(i));
    }
    if (f.size() != 5) throw DataError("config: '" + k + "' expects levels,base,growth,log2_table,features");
    out = {f[0], f[1], f[2], f[3], f[4]};
  };
}

}  // namespace

void apply_config(const std::map<std::string, std::string>& kv, RunConfig& c) {
  std::map<std::string, std::function<void(const std::string&, const std::string&)>> fields{
      {"coupled_per_anchor", unsigned_field(c.model.coupled_per_anchor)},
      {"hyper_dim", unsigned_field(c.model.hyper_dim)},
      {"bottleneck_support", int_field(c.model.bottleneck_support)},
      {"context_grid", grid_field(c.model.context_grid)},
      {"prior_grid", grid_field(c.model.prior_grid)},
      {"location_step", double_field(c.model.location_step)},
      {"grid_step", double_field(c.model.grid_step)},
      {"lambda", double_field(c.train.lambda)},
      {"iterations", int_field(c.train.iterations)},
      {"lr_location", double_field(c.train.lr.location)},
      {"lr_covariance", double_field(c.train.lr.covariance)},
      {"lr_embedding", double_field(c.train.lr.embedding)},
      {"lr_network", double_field(c.train.lr.network)},
      {"lr_grid", double_field(c.train.lr.grid)},
      {"densify_interval", int_field(c.train.densify_interval)},
      {"densify_until", double_field(c.train.densify_until)},
      {"densify_grad_threshold", double_field(c.train.densify_grad_threshold)},
      {"prune_opacity", double_field(c.train.prune_opacity)},
      {"max_anchors", unsigned_field(c.train.max_anchors)},
      {"quantization_noise", bool_field(c.train.quantization_noise)},
      {"seed", unsigned_field(c.train.seed)},
      {"temporal.motion_grid", grid_field(c.temporal.motion_grid)},
      {"temporal.compensation_grid", grid_field(c.temporal.compensation_grid)},
      {"temporal.iterations", int_field(c.temporal.iterations)},
      {"temporal.control_interval", int_field(c.temporal.control_interval)},
      {"temporal.max_created", unsigned_field(c.temporal.max_created)},
      {"temporal.diff_threshold", double_field(c.temporal.diff_threshold)},
      {"temporal.dilation_radius", int_field(c.temporal.dilation_radius)},
      {"temporal.tau_motion", double_field(c.temporal.thresholds.motion)},
      {"temporal.tau_static_to_dynamic", double_field(c.temporal.thresholds.static_to_dynamic)},
      {"temporal.tau_dynamic_to_static", double_field(c.temporal.thresholds.dynamic_to_static)},
      {"temporal.tau_creation", double_field(c.temporal.thresholds.creation)},
      {"temporal.lambda", double_field(c.temporal.lambda)},
      {"temporal.lr_grid", double_field(c.temporal.grid_lr)},
      {"temporal.lr_network", double_field(c.temporal.network_lr)},
  };
  for (const auto& [k, v] : kv) {
    const auto it = fields.find(k);
    if (it == fields.end()) throw DataError("config: unknown key '" + k + "'");
    it->second(k, v);
  }
  c.model.lambda = c.train.lambda;
  if (c.model.coupled_per_anchor == 0) throw DataError("config: coupled_per_anchor must be positive");
  if (c.train.iterations < 0 || c.temporal.iterations < 0) throw DataError("config: iterations must be non-negative");
  if (!(c.model.location_step > 0.0) || !(c.model.grid_step > 0.0)) throw DataError("config: steps must be positive");
  try {
    c.temporal.thresholds.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("config: ") + e.what());
  }
}

RunConfig read_config(const std::string& path) {
  RunConfig c;
  try {
    apply_config(read_key_values(path), c);
  } catch (const DataError& e) {
    const std::string msg = e.what();
    throw DataError(msg.rfind(path, 0) == 0 ? msg : path + ": " + msg);
  }
  return c;
}

namespace {

constexpr std::uint32_t kModelMagic = 0x4D534743;  // "CGSM"
constexpr std::uint16_t kModelVersion = 1;

void write_grid_config(ByteWriter& w, const GridConfig& g) {
  for (std::uint32_t v : {g.levels, g.base_resolution, g.growth, g.log2_table_size, g.feature_dim}) w.u32(v);
}

GridConfig read_grid_config(ByteReader& r) {
  GridConfig g;
  g.levels = r.u32();
  g.base_resolution = r.u32();
  g.growth = r.u32();
  g.log2_table_size = r.u32();
  g.feature_dim = r.u32();
  if (g.levels == 0 || g.levels > 32 || g.log2_table_size > 26 || g.feature_dim == 0 || g.feature_dim > 64 ||
      g.base_resolution < 2 || g.growth == 0)
    throw DataError("model: invalid grid configuration");
  return g;
}

}  // namespace

Bytes serialize_model(const SceneModel& model) {
  model.validate();
  ByteWriter w;
  w.u32(kModelMagic);
  w.u16(kModelVersion);
  const ModelConfig& c = model.config;
  w.u32(c.coupled_per_anchor);
  w.u32(c.hyper_dim);
  w.u32(static_cast<std::uint32_t>(c.bottleneck_support));
  write_grid_config(w, c.context_grid);
  write_grid_config(w, c.prior_grid);
  w.f64(c.location_step);
  w.f64(c.grid_step);
  w.f64(c.lambda);
  for (const FeatureGrid* g : {&model.context_grid, &model.prior_grid}) {
    for (double v : g->lo) w.f64(v);
    for (double v : g->hi) w.f64(v);
    for (std::uint32_t p : g->primes) w.u32(p);
  }
  w.u64(model.anchors.size());
  SceneModel m = model;
  for (const auto& s : parameter_spans(m))
    for (double v : s.values) w.f64(v);
  return std::move(w.out);
}

SceneModel deserialize_model(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.u32() != kModelMagic) throw DataError("model: bad magic");
  if (r.u16() != kModelVersion) throw DataError("model: unsupported version");
  ModelConfig c;
  c.coupled_per_anchor = r.u32();
  c.hyper_dim = r.u32();
  c.bottleneck_support = static_cast<int>(r.u32());
  c.context_grid = read_grid_config(r);
  c.prior_grid = read_grid_config(r);
  c.location_step = r.f64();
  c.grid_step = r.f64();
  c.lambda = r.f64();
  if (c.coupled_per_anchor == 0 || c.coupled_per_anchor > 1024 || c.hyper_dim == 0 || c.hyper_dim > 1024 ||
      c.bottleneck_support <= 0 || c.bottleneck_support > 1024)
    throw DataError("model: invalid configuration");
  std::array<Vec3, 4> box{};
  std::array<std::array<std::uint32_t, 3>, 2> primes{};
  for (int g = 0; g < 2; ++g) {
    for (double& v : box[2 * g]) v = r.f64();
    for (double& v : box[2 * g + 1]) v = r.f64();
    for (auto& p : primes[g]) p = r.u32();
  }
  const std::uint64_t anchors = r.u64();
  const std::size_t per_anchor = (3 + kCovParams + kRefDim + kResDim * c.coupled_per_anchor) * 8;
  if (anchors > bytes.size() / per_anchor) throw DataError("model: truncated");
  SceneModel m = make_model(c, box[0], box[1]);
  m.prior_grid.lo = box[2];
  m.prior_grid.hi = box[3];
  m.context_grid.primes = primes[0];
  m.prior_grid.primes = primes[1];
  const std::vector<ResEmbedding> coupled(c.coupled_per_anchor);
  for (std::uint64_t i = 0; i < anchors; ++i) add_anchor(m, AnchorPrimitive{}, coupled);
  for (const auto& s : parameter_spans(m))
    for (double& v : s.values) v = r.f64();
  if (!r.done()) throw DataError("model: trailing bytes");
  return m;
}

void save_model(const std::string& dir, const SceneModel& model) {
  fs::create_directories(dir);
  write_file((fs::path(dir) / "model.bin").string(), serialize_model(model));
}

SceneModel load_model(const std::string& dir) {
  const std::string path = (fs::path(dir) / "model.bin").string();
  if (!fs::is_directory(dir)) throw DataError("model directory not found: " + dir);
  try {
    return deserialize_model(read_file(path));
  } catch (const DataError& e) {
    const std::string msg = e.what();
    throw DataError(msg.find(path) != std::string::npos ? msg : path + ": " + msg);
  }
}

}  // namespace cgs
