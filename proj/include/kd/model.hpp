#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "kd/feature_distill.hpp"

namespace kd {

struct TapSpec {
  std::string layer_id;
  double depth_fraction = 0.0;
};

// One concrete layer instantiated at a given input shape; feeds the
// parameter/FLOP accounting.
struct LayerInfo {
  std::string name;
  std::string type;  // conv2d | leaky_relu | upsample_bilinear | concat
  int c_in = 0, c_out = 0;
  int kernel = 0, stride = 1, pad = 0;
  bool bias = false;
  int h_in = 0, w_in = 0, h_out = 0, w_out = 0;
};

struct ForwardResult {
  Var logits;  // [B,num_classes,H,W], same spatial size as the input
  std::vector<FeatureMap> taps;
};

// Uniform surface every segmentation network exposes to the distillation
// engine: logits plus named intermediate feature taps.
class SegmentationModelAdapter {
 public:
  virtual ~SegmentationModelAdapter() = default;
  virtual const std::string& name() const = 0;
  virtual ForwardResult forward(const Var& images, bool with_taps = true) = 0;
  virtual std::vector<TapSpec> taps() const = 0;
  virtual std::int64_t parameter_count() const = 0;
  virtual bool trainable() const = 0;
  virtual void set_trainable(bool t) = 0;
  virtual std::vector<Var>& parameters() = 0;
  virtual const std::vector<Var>& parameters() const = 0;
  virtual std::vector<LayerInfo> layers(int in_h, int in_w) const = 0;
};

using ModelPtr = std::shared_ptr<SegmentationModelAdapter>;

struct ReferenceNetConfig {
  int base_channels = 16;
  int depth = 3;  // encoder stages; spatial size must divide 2^(depth-1)
  int num_classes = 2;
  std::vector<int> tap_stages;  // stage ids 0..2*depth-2; empty = all stages

  void validate() const;
  bool operator==(const ReferenceNetConfig&) const = default;
};

inline ReferenceNetConfig default_teacher_config() { return {16, 4, 2, {}}; }
inline ReferenceNetConfig default_student_config() { return {4, 3, 2, {}}; }

// Closed-form trainable-scalar count for a reference net; the builders'
// parameter_count must agree with this exactly.
std::int64_t reference_param_count(const ReferenceNetConfig& cfg);

ModelPtr build_reference_teacher(const ReferenceNetConfig& cfg, unsigned seed,
                                 const std::string& name = "ref-teacher");
// Same topology family; rejects configs whose parameter count exceeds a
// tenth of the default teacher's.
ModelPtr build_reference_student(const ReferenceNetConfig& cfg, unsigned seed,
                                 const std::string& name = "ref-student");

void save_checkpoint(const SegmentationModelAdapter& model, const std::string& path);
ModelPtr load_checkpoint(const std::string& path);

// Config recorded inside a checkpoint, without instantiating the model.
ReferenceNetConfig checkpoint_config(const std::string& path);

}  // namespace kd
