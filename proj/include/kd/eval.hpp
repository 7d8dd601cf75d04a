#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kd/data.hpp"
#include "kd/model.hpp"

namespace kd {

struct EvalResult {
  double mean_dice = 0.0;  // 0..1 scale
  double std_dice = 0.0;   // population std, 0..1 scale
  int n_samples = 0;
  std::string model_name;
  std::int64_t params = 0;
  std::int64_t flops = 0;  // 2 x MACs at the stated input shape
};

// 2|A.B| / (|A|+|B|); 1.0 when both masks are empty.
double dice_score(const Tensor& pred, const Tensor& gt);

// Per-pixel argmax over channels: [B,C,H,W] -> [B,H,W] class indices.
Tensor argmax_mask(const Tensor& logits);

std::int64_t count_params(const SegmentationModelAdapter& model);

// MACs of one instantiated layer; throws on unknown layer types so nothing
// is silently undercounted. Conventions: conv = c_in*k^2*c_out*h_out*w_out,
// activation = 1/element, bilinear upsample = 4/element, concat = 0.
std::int64_t layer_macs(const LayerInfo& layer);
std::int64_t estimate_flops(const SegmentationModelAdapter& model, int in_h, int in_w);

// Per-slice argmax dice against ground truth over a manifest.
std::vector<double> per_slice_dice(SegmentationModelAdapter& model, const Manifest& test,
                                   std::pair<int, int> input_hw,
                                   Normalization normalization = Normalization::kMinMax,
                                   int batch_size = 8);

EvalResult evaluate(SegmentationModelAdapter& model, const Manifest& test,
                    std::pair<int, int> input_hw,
                    Normalization normalization = Normalization::kMinMax, int batch_size = 8);

struct ReportEntry {
  EvalResult result;
  std::string role;  // teacher | student | distilled
  std::optional<double> baseline_dice_pct;
};

// report.csv plus a plain-text table; percent and 0..1 std are both kept
// explicit. Byte-deterministic for identical inputs.
void emit_report(const std::vector<ReportEntry>& entries, const std::string& csv_path,
                 std::string* human_readable = nullptr);

// One composite PNG per record: grayscale input, ground-truth contour
// (green), predicted contour (red).
void export_overlays(SegmentationModelAdapter& model, const std::vector<SliceRecord>& records,
                     const std::string& out_dir, std::pair<int, int> input_hw,
                     Normalization normalization = Normalization::kMinMax);

}  // namespace kd
