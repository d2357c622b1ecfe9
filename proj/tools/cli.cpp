#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "cgs/codec.hpp"
#include "cgs/rd_optimizer.hpp"
#include "cgs/scene_io.hpp"
#include "cgs/temporal.hpp"

namespace cgs::cli {

namespace fs = std::filesystem;

namespace {

enum class Level { kQuiet, kError, kInfo, kDebug };

class Log {
 public:
  Log(std::ostream& err) : err_(err) {
    const char* env = std::getenv("CGS_LOG");
    const std::string v = env ? env : "info";
    if (v == "quiet" || v == "off") level_ = Level::kQuiet;
    else if (v == "error") level_ = Level::kError;
    else if (v == "debug") level_ = Level::kDebug;
  }
  bool enabled(Level l) const { return l <= level_ && level_ != Level::kQuiet; }
  void info(const std::string& m) const { if (enabled(Level::kInfo)) err_ << m << "\n"; }
  void debug(const std::string& m) const { if (enabled(Level::kDebug)) err_ << m << "\n"; }
  void error(const std::string& m) const { if (enabled(Level::kError)) err_ << "error: " << m << "\n"; }

 private:
  std::ostream& err_;
  Level level_ = Level::kInfo;
};

struct Options {
  std::string config;
  std::string lambda;
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::string out;
  std::optional<int> iters;
  std::vector<std::string> inputs;
  std::string cameras;
  std::string scene;
};

RunConfig load_run_config(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : read_config(o.config);
  if (!o.lambda.empty()) {
    double l = 0.0;
    std::istringstream ss(o.lambda);
    if (o.lambda == "low" || o.lambda == "middle" || o.lambda == "high")
      l = lambda_preset(o.lambda);
    else if (!(ss >> l) || !ss.eof() || !(l >= 0.0))
      throw std::invalid_argument("--lambda expects low, middle, high or a non-negative number");
    c.train.lambda = c.model.lambda = l;
  }
  if (o.seed) c.train.seed = *o.seed;
  if (o.iters) {
    if (*o.iters < 0) throw std::invalid_argument("--iters must be non-negative");
    c.train.iterations = *o.iters;
  }
  return c;
}

void require_out(const Options& o) {
  if (o.out.empty()) throw std::invalid_argument("--out is required");
  fs::create_directories(o.out);
}

std::string out_path(const Options& o, const std::string& name) { return (fs::path(o.out) / name).string(); }

bool is_stream(const std::string& path) { return fs::is_regular_file(path); }

void require_exists(const std::string& path) {
  if (!fs::exists(path)) throw DataError("not found: " + path);
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

// Model dir or intra/static stream.
SceneModel load_any(const std::string& path, std::size_t* stream_bytes = nullptr) {
  require_exists(path);
  if (!is_stream(path)) return load_model(path);
  const Bytes b = read_file(path);
  const Bitstream bs = Bitstream::parse(b);
  if (bs.header.type == FrameType::kPredicted)
    throw DataError(path + ": predicted frame; render it together with its preceding frames");
  if (stream_bytes) *stream_bytes = b.size();
  return decode_model(bs);
}

int cmd_train_static(const Options& o, const Log& log, std::ostream&) {
  require_exists(o.inputs[0]);
  const RunConfig c = load_run_config(o);
  const SceneData scene = load_scene(o.inputs[0]);
  require_out(o);
  const auto views = scene.training_views(0);
  log.info("training on " + std::to_string(views.size()) + " views, " + std::to_string(scene.points.size()) +
           " points, lambda " + fmt(c.train.lambda) + ", " + std::to_string(c.train.iterations) + " iterations");
  const int every = std::max(1, c.train.iterations / 20);
  const TrainResult r = train_static(views, scene.points, c.model, c.train, [&](const StepLog& l) {
    const std::string line = "iter " + std::to_string(l.iteration) + " D " + fmt(l.distortion) + " R " +
                             fmt(l.rate_bits) + " bits loss " + fmt(l.loss) + " PSNR " + fmt(l.psnr, 4);
    if (l.iteration % every == 0) log.info(line);
    else log.debug(line);
  });
  save_model(o.out, r.model);
  write_metrics_csv(out_path(o, "metrics.csv"), r.log);
  log.info("wrote " + o.out + " (" + std::to_string(r.model.anchors.size()) + " anchors)");
  return kOk;
}

int cmd_encode(const Options& o, const Log& log, std::ostream&) {
  const SceneModel m = load_any(o.inputs[0]);
  require_out(o);
  const Bytes b = encode_model(m);
  write_file(out_path(o, "model.cgs"), b);
  log.info("wrote " + out_path(o, "model.cgs") + " (" + std::to_string(b.size()) + " bytes)");
  return kOk;
}

int cmd_decode(const Options& o, const Log& log, std::ostream&) {
  require_exists(o.inputs[0]);
  if (!is_stream(o.inputs[0])) throw DataError("not a bitstream file: " + o.inputs[0]);
  const SceneModel m = load_any(o.inputs[0]);
  require_out(o);
  save_model(o.out, m);
  log.info("wrote " + o.out + " (" + std::to_string(m.anchors.size()) + " anchors)");
  return kOk;
}

std::vector<Camera> load_render_cameras(const std::string& path, std::vector<std::string>& names) {
  require_exists(path);
  const std::string file = fs::is_directory(path) ? (fs::path(path) / "cameras.json").string() : path;
  return read_cameras(file, &names);
}

int cmd_render(const Options& o, const Log& log, std::ostream&) {
  if (o.cameras.empty()) throw std::invalid_argument("--cameras is required");
  for (const auto& in : o.inputs) require_exists(in);
  std::vector<std::string> names;
  const std::vector<Camera> cams = load_render_cameras(o.cameras, names);
  if (o.inputs.size() == 1) {
    const SceneModel m = load_any(o.inputs[0]);
    require_out(o);
    for (std::size_t v = 0; v < cams.size(); ++v)
      write_ppm(out_path(o, names[v] + ".ppm"), render_model(m, cams[v]));
    log.info("rendered " + std::to_string(cams.size()) + " views to " + o.out);
    return kOk;
  }
  std::vector<Bytes> streams;
  for (const auto& in : o.inputs) {
    if (!is_stream(in)) throw DataError("sequence rendering needs bitstream files: " + in);
    streams.push_back(read_file(in));
  }
  const std::vector<FrameState> states = decode_sequence(streams);
  require_out(o);
  for (const auto& s : states) {
    std::ostringstream dir;
    dir << std::setw(4) << std::setfill('0') << s.frame_index;
    fs::create_directories(out_path(o, dir.str()));
    for (std::size_t v = 0; v < cams.size(); ++v)
      write_ppm(out_path(o, dir.str() + "/" + names[v] + ".ppm"), render_frame(s, cams[v]));
  }
  log.info("rendered " + std::to_string(states.size()) + " frames of " + std::to_string(cams.size()) + " views to " +
           o.out);
  return kOk;
}

int cmd_train_sequence(const Options& o, const Log& log, std::ostream&) {
  require_exists(o.inputs[0]);
  const RunConfig c = load_run_config(o);
  const SceneData scene = load_scene(o.inputs[0]);
  require_out(o);
  std::vector<std::vector<TrainView>> frames;
  for (std::size_t t = 0; t < scene.frame_count(); ++t) frames.push_back(scene.training_views(t));
  log.info("sequence of " + std::to_string(frames.size()) + " frames, " + std::to_string(frames[0].size()) +
           " views");
  const SequenceResult r =
      train_sequence(frames, scene.points, c.model, c.train, c.temporal, [&](const std::string& m) { log.info(m); });
  for (std::size_t t = 0; t < r.streams.size(); ++t) {
    std::ostringstream name;
    name << "frame_" << std::setw(4) << std::setfill('0') << t << ".cgs";
    write_file(out_path(o, name.str()), r.streams[t]);
  }
  write_sequence_csv(out_path(o, "sequence.csv"), r.report);
  log.info("wrote " + std::to_string(r.streams.size()) + " frames to " + o.out);
  return kOk;
}

int cmd_eval(const Options& o, const Log& log, std::ostream& out) {
  if (o.scene.empty()) throw std::invalid_argument("--scene is required");
  for (const auto& in : o.inputs) require_exists(in);
  const SceneData scene = load_scene(o.scene);
  const auto views = scene.evaluation_views(0);
  std::vector<RdRow> rows;
  nlohmann::json results = nlohmann::json::array();
  for (const auto& in : o.inputs) {
    std::size_t bytes = 0;
    SceneModel m = load_any(in, &bytes);
    if (!is_stream(in)) {
      const Bytes b = encode_model(m);
      bytes = b.size();
      m = decode_model(b);
    }
    const EvalMetrics e = evaluate_views(m, views);
    rows.push_back({in, m.config.lambda, bytes, e.psnr, e.ssim});
    results.push_back({{"psnr", e.psnr}, {"ssim", e.ssim}, {"size_bytes", bytes}});
    log.debug(in + ": " + fmt(e.psnr) + " dB");
  }
  const std::string json = (results.size() == 1 ? results[0] : results).dump(2);
  out << json << "\n";
  if (!o.out.empty()) {
    require_out(o);
    std::ofstream f(out_path(o, "eval.json"));
    if (!f) throw DataError("cannot write " + out_path(o, "eval.json"));
    f << json << "\n";
    if (rows.size() >= 2) {
      std::ofstream csv(out_path(o, "rd.csv"));
      if (!csv) throw DataError("cannot write " + out_path(o, "rd.csv"));
      csv << rd_csv(rows);
    }
  }
  return kOk;
}

int cmd_info(const Options& o, const Log&, std::ostream& out) {
  require_exists(o.inputs[0]);
  const Bytes b = read_file(o.inputs[0]);
  out << describe_bitstream(Bitstream::parse(b), b.size());
  return kOk;
}

}  // namespace

std::string rd_csv(std::vector<RdRow> rows) {
  if (rows.size() < 2) throw std::invalid_argument("rd_csv: needs at least two models");
  std::stable_sort(rows.begin(), rows.end(), [](const RdRow& a, const RdRow& b) { return a.bytes < b.bytes; });
  std::ostringstream s;
  s << std::setprecision(10) << "lambda,bytes,psnr,ssim\n";
  for (const auto& r : rows) s << r.lambda << ',' << r.bytes << ',' << r.psnr << ',' << r.ssim << '\n';
  return s.str();
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Compressed Gaussian splatting codec", "cgs"};
  app.require_subcommand(1);
  app.add_option("--threads", o.threads, "worker threads (default: logical cores; 1 is reproducible)")
      ->check(CLI::NonNegativeNumber);

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--out", o.out, "output directory");
  };
  const auto add_training = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "key = value configuration file");
    sub->add_option("--lambda", o.lambda, "low | middle | high or a value");
    sub->add_option("--seed", o.seed, "random seed");
    sub->add_option("--iters", o.iters, "training iterations");
  };

  auto* train_static_cmd = app.add_subcommand("train-static", "train a static scene into a model directory");
  train_static_cmd->add_option("scene", o.inputs, "scene directory")->required()->expected(1);
  add_common(train_static_cmd);
  add_training(train_static_cmd);

  auto* train_seq_cmd = app.add_subcommand("train-sequence", "train and code a dynamic sequence");
  train_seq_cmd->add_option("sequence", o.inputs, "sequence directory")->required()->expected(1);
  add_common(train_seq_cmd);
  add_training(train_seq_cmd);

  auto* encode_cmd = app.add_subcommand("encode", "encode a model directory to model.cgs");
  encode_cmd->add_option("model", o.inputs, "model directory")->required()->expected(1);
  add_common(encode_cmd);

  auto* decode_cmd = app.add_subcommand("decode", "decode a .cgs file to a model directory");
  decode_cmd->add_option("stream", o.inputs, ".cgs file")->required()->expected(1);
  add_common(decode_cmd);

  auto* render_cmd = app.add_subcommand("render", "render a model or a coded sequence");
  render_cmd->add_option("inputs", o.inputs, "model directory, .cgs file, or I + P .cgs files")->required();
  render_cmd->add_option("--cameras", o.cameras, "cameras.json or scene directory");
  add_common(render_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "PSNR / SSIM / size of models on a scene");
  eval_cmd->add_option("models", o.inputs, "model directories or .cgs files")->required();
  eval_cmd->add_option("--scene", o.scene, "scene directory");
  add_common(eval_cmd);

  auto* info_cmd = app.add_subcommand("info", "dump a .cgs header and section table");
  info_cmd->add_option("stream", o.inputs, ".cgs file")->required()->expected(1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kUsage;
  }

  const Log log(err);
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  set_thread_count(o.threads > 0 ? o.threads : static_cast<int>(hw));

  using Handler = int (*)(const Options&, const Log&, std::ostream&);
  const std::vector<std::pair<CLI::App*, Handler>> handlers{
      {train_static_cmd, cmd_train_static}, {train_seq_cmd, cmd_train_sequence}, {encode_cmd, cmd_encode},
      {decode_cmd, cmd_decode}, {render_cmd, cmd_render}, {eval_cmd, cmd_eval}, {info_cmd, cmd_info}};
  try {
    for (const auto& [sub, handler] : handlers)
      if (sub->parsed()) return handler(o, log, out);
  } catch (const DataError& e) {
    log.error(e.what());
    return kData;
  } catch (const NumericError& e) {
    log.error(e.what());
    return kData;
  } catch (const fs::filesystem_error& e) {
    log.error(e.what());
    return kData;
  } catch (const std::invalid_argument& e) {
    log.error(e.what());
    return kUsage;
  }
  return kUsage;
}

}  // namespace cgs::cli
