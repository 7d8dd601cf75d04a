#pragma once

#include <string>
#include <utility>
#include <vector>

#include "kd/autograd.hpp"

namespace kd {

// Intermediate activations tapped from a network layer.
struct FeatureMap {
  Var values;  // [B,C,H,W]
  std::string layer_id;
  double depth_fraction = 0.0;  // relative position in the network, in [0,1]
};

// [B,H,W], nonnegative, unit L2 per sample (all-zero maps stay zero).
struct ImportanceMap {
  Var values;
  std::string layer_id;
};

// One entry per sample: mean feature response over foreground minus background.
struct RegionContrastVector {
  Var values;  // [B]
  std::string source_layer;
};

struct LayerPairing {
  std::vector<std::pair<std::string, std::string>> pairs;  // (student, teacher) layer ids
  void validate() const;  // no student layer twice
};

// Channel-wise sum of squares, then per-sample L2 normalization.
ImportanceMap importance_map(const FeatureMap& f);

// Bilinear resample to [target_h, target_w] then renormalize to unit L2;
// returns the input untouched when the size already matches.
ImportanceMap align_spatial(const ImportanceMap& m, int target_h, int target_w);

// Mean over pairs of the L1 distance between normalized maps; the student
// map is aligned toward the teacher map's resolution.
Var importance_loss(const std::vector<ImportanceMap>& student_maps,
                    const std::vector<ImportanceMap>& teacher_maps, const LayerPairing& pairing);

// Computed on the un-normalized importance-reduced map; empty regions
// contribute a zero mean. Mask is nearest-resampled to the feature size.
RegionContrastVector region_contrast_vector(const FeatureMap& f, const Tensor& mask);

Var affinity_loss(const RegionContrastVector& v_s, const RegionContrastVector& v_t);

// importance_loss + mean-over-pairs affinity term (Eq.-3 structure).
Var mid_loss(const std::vector<FeatureMap>& student_feats,
             const std::vector<FeatureMap>& teacher_feats, const Tensor& mask,
             const LayerPairing& pairing);

// Default pairing policy: each student tap pairs with the teacher tap of
// nearest depth_fraction. Taps given as (layer_id, depth_fraction).
LayerPairing nearest_depth_pairing(const std::vector<std::pair<std::string, double>>& student_taps,
                                   const std::vector<std::pair<std::string, double>>& teacher_taps);

}  // namespace kd
