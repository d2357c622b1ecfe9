#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cgs/camera.hpp"
#include "cgs/codec.hpp"
#include "cgs/primitives.hpp"
#include "cgs/rd_optimizer.hpp"
#include "cgs/renderer.hpp"
#include "cgs/spatial_prediction.hpp"

namespace cgs {

struct MotionMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  MotionMask() = default;
  MotionMask(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0) {}
  std::uint8_t& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;
};

// dilate(max_c |curr - prev| > diff_threshold, radius) with a square
// structuring element. Throws std::invalid_argument on size mismatch.
MotionMask motion_mask(const Image& prev, const Image& curr, double diff_threshold = 0.05, int dilation_radius = 2);
std::vector<MotionMask> compute_motion_masks(std::span<const Image> prev, std::span<const Image> curr,
                                             double diff_threshold = 0.05, int dilation_radius = 2);

// 1 iff the 3-sigma box of any of the Gaussians touches a motion pixel.
int view_motion_confidence(std::span<const Gaussian3D> gaussians, const MotionMask& mask, const Camera& camera);

struct TemporalThresholds {
  double motion = 0.25;              // motion confidence
  double static_to_dynamic = 2e-4;   // accumulated screen gradient
  double dynamic_to_static = 1e-3;   // accumulated deformation significance
  double creation = 4e-4;            // accumulated screen gradient

  // Throws std::invalid_argument unless creation > static_to_dynamic.
  void validate() const;
};

struct TemporalState {
  std::uint32_t frame_index = 0;
  std::vector<std::uint8_t> dynamic;       // per anchor
  std::vector<double> grad_accum;          // per anchor
  std::vector<double> significance_accum;  // per anchor
  std::vector<double> motion_confidence;   // per anchor

  std::size_t dynamic_count() const;
  void reset_accumulators();
};

// Mean view confidence per anchor (K Gaussians each); dynamic iff >= tau_m.
TemporalState disentangle(std::span<const Gaussian3D> gaussians, std::size_t k, std::span<const MotionMask> masks,
                          std::span<const Camera> cameras, double tau_m);

struct TemporalConfig {
  GridConfig motion_grid{2, 8, 2, 10, 2};
  GridConfig compensation_grid{2, 8, 2, 10, 2};
  int iterations = 300;
  int control_interval = 50;
  std::size_t max_created = 16;  // per frame
  double diff_threshold = 0.05;
  int dilation_radius = 2;
  TemporalThresholds thresholds;
  double lambda = 0.0005;
  double grid_lr = 1e-2;
  double network_lr = 2e-3;
};

// Per-frame residues: motion/compensation grids and the deformation and
// appearance heads. Zero weights give the neutral deformation.
struct TemporalResidues {
  FeatureGrid motion;
  FeatureGrid compensation;
  Affine translation;       // zeta_d -> 3
  Affine scaling;           // zeta_d -> 3 (log)
  Affine rotation;          // zeta_d -> 4 (offset from identity)
  Affine color_dynamic;     // view + zeta_d -> 3
  Affine opacity_dynamic;   // view + zeta_d -> 1
  Affine color_static;      // view + rho_s -> 3

  std::size_t zeta_dim() const { return kResDim + motion.output_dim(); }
  std::vector<std::span<double>> parameters();
  // true for grid spans of parameters(), false for heads
  std::vector<bool> grid_mask() const;
  bool operator==(const TemporalResidues&) const = default;
};

TemporalResidues make_residues(const GridConfig& motion, const GridConfig& compensation, const Vec3& lo, const Vec3& hi);
TemporalResidues zeros_like(const TemporalResidues& r);
// fp16 heads, grid tables on the grid step.
TemporalResidues quantize_residues(const TemporalResidues& r, double grid_step);

using Deformation = AffineOffsets;

// zeta_d = res embedding ++ motion grid at the previous mean.
std::vector<double> dynamic_features(const ResEmbedding& res, const TemporalResidues& r, const Vec3& position);
Deformation predict_deformation(std::span<const double> zeta_d, const TemporalResidues& r);
// Geometry by the deformation, color/opacity offsets from the view and zeta_d.
Gaussian3D deform_dynamic(const Gaussian3D& g, const Deformation& psi, std::span<const double> zeta_d,
                          const ViewEmbedding& view, const TemporalResidues& r);
// Color offset only; geometry and opacity untouched.
Gaussian3D compensate_static(const Gaussian3D& g, std::span<const double> rho_s, const ViewEmbedding& view,
                             const TemporalResidues& r);
// |t|_1 + |log s|_1 + 1 - cos(q, identity) with q canonicalized to w >= 0.
double deformation_significance(const Deformation& psi);

// Spawn request from adaptive control: copies of anchor `parent` at `location`.
struct CreatedAnchor {
  std::size_t parent;
  Vec3 location;
};

struct ControlResult {
  std::size_t to_dynamic = 0;
  std::size_t to_static = 0;
  std::vector<CreatedAnchor> created;
};

// s->d, then d->s, then creation; an anchor converts at most once per call.
// spawn_location(anchor) gives where a spawned copy goes. Accumulators are
// not reset here.
ControlResult adaptive_control(TemporalState& state, const TemporalThresholds& thresholds, std::size_t max_created,
                               const std::function<Vec3(std::size_t)>& spawn_location);

// Decoded state of one frame of a sequence.
struct FrameState {
  std::uint32_t frame_index = 0;
  SceneModel model;                  // decoded I-scene plus anchors created so far
  std::vector<Gaussian3D> reference; // per coupled: geometry of the previous frame
  std::vector<Gaussian3D> geometry;  // per coupled: geometry of this frame
  std::vector<std::uint8_t> dynamic; // per anchor
  TemporalResidues residues;
  bool predicted = false;
};

// Frame 0 state from a decoded intra model.
FrameState intra_state(const SceneModel& decoded, std::uint32_t frame_index = 0);

// Gaussians of a frame seen from a camera.
std::vector<Gaussian3D> frame_gaussians(const FrameState& s, const Camera& camera);
Image render_frame(const FrameState& s, const Camera& camera);

// Applies quantized residues, partition and created anchors (quantized, in
// coded order) to the previous state.
FrameState advance_state(const FrameState& prev, const TemporalResidues& residues, std::vector<std::uint8_t> dynamic,
                         std::span<const AnchorPrimitive> created_anchors,
                         std::span<const std::vector<ResEmbedding>> created_res);

struct PredictedObjective {
  double distortion = 0.0;
  double rate_bits = 0.0;  // size proxy of the residue grids
  double loss = 0.0;
  Image render;
  std::vector<Gaussian3D> gaussians;
  std::vector<double> screen_gradient;  // per coupled, when differentiated
  std::vector<double> significance;     // per coupled, dynamic only
};

// Loss of one view of a predicted frame: reference geometry, partition and
// base appearance (I-scene Gaussians for the view) are fixed; only the
// residues vary. Accumulates the residue gradient when grad is non-null.
PredictedObjective evaluate_predicted(const SceneModel& model, std::span<const Gaussian3D> reference,
                                      std::span<const std::uint8_t> dynamic, std::span<const Gaussian3D> base,
                                      const TemporalResidues& residues, const TrainView& view, double lambda,
                                      TemporalResidues* grad);

struct PFrameResult {
  Bytes stream;
  FrameState state;       // encoder reference (from quantized values)
  TemporalState temporal; // partition after the final control
  std::size_t created = 0;
  std::vector<StepLog> log;
};

// Trains residues of frame t against its views from the previous decoded
// state, codes them, and returns the stream with the encoder reference.
PFrameResult encode_p_frame(const FrameState& prev, std::span<const TrainView> views,
                            std::span<const TrainView> prev_views, const TemporalConfig& config, std::uint64_t seed);
FrameState decode_p_frame(std::span<const std::uint8_t> bytes, const FrameState& prev);

// Bitwise equality of two frame states.
bool frame_states_equal(const FrameState& a, const FrameState& b);

struct SequenceFrameReport {
  std::uint32_t frame = 0;
  double psnr = 0.0;
  std::size_t bytes = 0;
  std::size_t payload_bytes = 0;
  std::size_t dynamic_anchors = 0;
  std::size_t anchors = 0;
  std::size_t created = 0;
};

struct SequenceResult {
  std::vector<Bytes> streams;
  std::vector<FrameState> states;
  std::vector<TemporalState> partitions;  // per P-frame (index 0 empty)
  std::vector<SequenceFrameReport> report;
};

using SequenceProgressFn = std::function<void(const std::string&)>;

// frames[t][v]: training views of each timestamp (same cameras).
SequenceResult train_sequence(std::span<const std::vector<TrainView>> frames, std::span<const Vec3> points,
                              const ModelConfig& model_config, const TrainConfig& intra,
                              const TemporalConfig& temporal, const SequenceProgressFn& progress = {});

// Decodes an I-frame followed by P-frames.
std::vector<FrameState> decode_sequence(std::span<const Bytes> streams);

void write_sequence_csv(const std::string& path, std::span<const SequenceFrameReport> report);

}  // namespace cgs
