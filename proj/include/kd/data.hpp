#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kd/tensor.hpp"

namespace kd {

struct SliceRecord {
  int site = 0;  // 1..6 in the multi-site protocol
  std::string patient_id;
  int slice_index = 0;
  std::string image_path;
  std::string mask_path;
};

struct Manifest {
  std::vector<SliceRecord> records;
  std::string provenance;

  void validate() const;  // unique (site, patient_id, slice_index) triples
};

struct SitePairing {
  std::vector<std::pair<int, int>> pairs;
  void validate() const;  // disjoint pairs
};

// Per-site acquisition profile for the synthetic phantom generator; the
// differences between profiles stand in for scanner/protocol shift.
struct SiteProfile {
  double intensity_offset = 0.0;
  double contrast = 1.0;
  double noise_sigma = 0.05;
  double blur_sigma = 0.0;
};

// Cycled family of distinct acquisition profiles, sites 1..n.
std::vector<SiteProfile> default_site_profiles(int n_sites);

struct SplitRatios {
  double train = 0.8, val = 0.05, test = 0.15;
};

enum class Normalization { kMinMax, kZScore };

// Directory layout: root/site<k>/<patient_id>/img_<idx>.png + mask_<idx>.png
Manifest ingest_slices(const std::string& root_dir);

void save_manifest(const Manifest& m, const std::string& path);
Manifest load_manifest(const std::string& path);

// Deterministic 3-way partition; unit is the patient by default, the slice
// otherwise. Sizes match the ratios within one unit.
std::array<Manifest, 3> split_dataset(const Manifest& m, const SplitRatios& ratios, int seed,
                                      bool by_patient = true);

// One shard per site pair; records from unlisted sites are reported via
// `excluded` when given.
std::vector<Manifest> partition_by_sites(const Manifest& m, const SitePairing& pairing,
                                         std::vector<SliceRecord>* excluded = nullptr);

// Writes randomized-ellipse phantom slices with exact masks under out_dir,
// one subtree per site profile, plus manifest.json and phantom_meta.json.
Manifest synthesize_dataset(int n_per_site, const std::vector<SiteProfile>& site_profiles, int seed,
                            const std::string& out_dir, int image_hw = 96);

// Images bilinearly resized + normalized -> [B,1,H,W]; masks nearest-resized
// and thresholded -> [B,H,W] in {0,1}.
std::pair<Tensor, Tensor> load_batch(const std::vector<SliceRecord>& records,
                                     std::pair<int, int> target_hw,
                                     Normalization normalization = Normalization::kMinMax);

}  // namespace kd
