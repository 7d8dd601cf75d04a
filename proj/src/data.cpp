#include "kd/data.hpp"

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

namespace kd {

namespace fs = std::filesystem;
using nlohmann::json;

void Manifest::validate() const {
  std::set<std::tuple<int, std::string, int>> seen;
  for (const SliceRecord& r : records)
    if (!seen.insert({r.site, r.patient_id, r.slice_index}).second)
      throw std::invalid_argument("Manifest: duplicate record (site " + std::to_string(r.site) +
                                  ", patient " + r.patient_id + ", slice " +
                                  std::to_string(r.slice_index) + ")");
}

void SitePairing::validate() const {
  std::set<int> seen;
  for (const auto& [a, b] : pairs) {
    if (!seen.insert(a).second || !seen.insert(b).second)
      throw std::invalid_argument("SitePairing: site appears in more than one pair");
  }
}

// ---------------------------------------------------------------------------
// manifest json

namespace {

json record_to_json(const SliceRecord& r) {
  return {{"site", r.site},
          {"patient_id", r.patient_id},
          {"slice_index", r.slice_index},
          {"image_path", r.image_path},
          {"mask_path", r.mask_path}};
}

SliceRecord record_from_json(const json& j) {
  SliceRecord r;
  r.site = j.at("site").get<int>();
  r.patient_id = j.at("patient_id").get<std::string>();
  r.slice_index = j.at("slice_index").get<int>();
  r.image_path = j.at("image_path").get<std::string>();
  r.mask_path = j.at("mask_path").get<std::string>();
  return r;
}

}  // namespace

void save_manifest(const Manifest& m, const std::string& path) {
  json j = {{"provenance", m.provenance}, {"records", json::array()}};
  for (const SliceRecord& r : m.records) j["records"].push_back(record_to_json(r));
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("save_manifest: cannot write '" + path + "'");
  out << j.dump(2) << "\n";
}

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_manifest: cannot open '" + path + "'");
  json j = json::parse(in);
  Manifest m;
  m.provenance = j.at("provenance").get<std::string>();
  for (const json& rj : j.at("records")) m.records.push_back(record_from_json(rj));
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// ingestion

std::vector<SiteProfile> default_site_profiles(int n_sites) {
  if (n_sites <= 0) throw std::invalid_argument("default_site_profiles: n_sites must be positive");
  static const SiteProfile base[6] = {
      {0.00, 1.00, 0.02, 0.0}, {-0.05, 0.90, 0.05, 0.6}, {0.06, 1.10, 0.08, 0.0},
      {-0.10, 1.05, 0.03, 1.0}, {0.10, 0.85, 0.06, 0.4}, {0.03, 0.95, 0.10, 0.8},
  };
  std::vector<SiteProfile> out;
  out.reserve(static_cast<std::size_t>(n_sites));
  for (int k = 0; k < n_sites; ++k) out.push_back(base[k % 6]);
  return out;
}

Manifest ingest_slices(const std::string& root_dir) {
  if (!fs::is_directory(root_dir))
    throw std::invalid_argument("ingest_slices: '" + root_dir + "' is not a directory");
  Manifest m;
  m.provenance = "ingested from " + root_dir;

  std::vector<fs::path> site_dirs;
  for (const auto& e : fs::directory_iterator(root_dir))
    if (e.is_directory() && e.path().filename().string().rfind("site", 0) == 0)
      site_dirs.push_back(e.path());
  std::sort(site_dirs.begin(), site_dirs.end());

  for (const fs::path& sd : site_dirs) {
    const std::string sname = sd.filename().string();
    int site = 0;
    try {
      site = std::stoi(sname.substr(4));
    } catch (...) {
      throw std::invalid_argument("ingest_slices: cannot parse site index from '" + sname + "'");
    }
    std::vector<fs::path> patient_dirs;
    for (const auto& e : fs::directory_iterator(sd))
      if (e.is_directory()) patient_dirs.push_back(e.path());
    std::sort(patient_dirs.begin(), patient_dirs.end());
    for (const fs::path& pd : patient_dirs) {
      std::vector<fs::path> images;
      for (const auto& e : fs::directory_iterator(pd)) {
        const std::string fn = e.path().filename().string();
        if (fn.rfind("img_", 0) == 0 && e.path().extension() == ".png") images.push_back(e.path());
      }
      std::sort(images.begin(), images.end());
      for (const fs::path& img : images) {
        const std::string fn = img.filename().string();
        int idx = 0;
        try {
          idx = std::stoi(fn.substr(4, fn.size() - 8));
        } catch (...) {
          throw std::invalid_argument("ingest_slices: cannot parse slice index from '" + fn + "'");
        }
        const fs::path mask = pd / ("mask_" + std::to_string(idx) + ".png");
        if (!fs::exists(mask))
          throw std::invalid_argument("ingest_slices: missing mask for image '" + img.string() + "'");
        m.records.push_back({site, pd.filename().string(), idx, img.string(), mask.string()});
      }
    }
  }
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// splitting / partitioning

std::array<Manifest, 3> split_dataset(const Manifest& m, const SplitRatios& ratios, int seed,
                                      bool by_patient) {
  const std::array<double, 3> r = {ratios.train, ratios.val, ratios.test};
  double sum = 0;
  for (double v : r) {
    if (v <= 0) throw std::invalid_argument("split_dataset: ratios must be positive");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("split_dataset: ratios must sum to 1");

  // units: patient keys in first-appearance order, or slice indices
  std::vector<std::string> unit_keys;
  std::map<std::string, std::vector<std::size_t>> unit_records;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const SliceRecord& rec = m.records[i];
    const std::string key = by_patient
                                ? "s" + std::to_string(rec.site) + "/" + rec.patient_id
                                : std::to_string(i);
    auto [it, inserted] = unit_records.try_emplace(key);
    if (inserted) unit_keys.push_back(key);
    it->second.push_back(i);
  }

  std::vector<std::size_t> order(unit_keys.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937 rng(static_cast<unsigned>(seed));
  std::shuffle(order.begin(), order.end(), rng);

  // largest-remainder apportionment of unit counts
  const std::size_t n = unit_keys.size();
  std::array<std::size_t, 3> count{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = r[static_cast<std::size_t>(k)] * static_cast<double>(n);
    count[static_cast<std::size_t>(k)] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    frac[static_cast<std::size_t>(k)] = exact - std::floor(exact + 1e-9);
    assigned += count[static_cast<std::size_t>(k)];
  }
  while (assigned < n) {
    int best = 0;
    for (int k = 1; k < 3; ++k)
      if (frac[static_cast<std::size_t>(k)] > frac[static_cast<std::size_t>(best)]) best = k;
    ++count[static_cast<std::size_t>(best)];
    frac[static_cast<std::size_t>(best)] = -1;
    ++assigned;
  }

  std::array<Manifest, 3> out;
  const char* names[3] = {"train", "val", "test"};
  std::size_t pos = 0;
  for (int k = 0; k < 3; ++k) {
    std::vector<std::size_t> rec_idx;
    for (std::size_t u = 0; u < count[static_cast<std::size_t>(k)]; ++u, ++pos) {
      const auto& ids = unit_records[unit_keys[order[pos]]];
      rec_idx.insert(rec_idx.end(), ids.begin(), ids.end());
    }
    std::sort(rec_idx.begin(), rec_idx.end());  // original manifest order
    out[static_cast<std::size_t>(k)].provenance =
        m.provenance + " | " + names[k] + " split (seed " + std::to_string(seed) + ")";
    for (std::size_t i : rec_idx) out[static_cast<std::size_t>(k)].records.push_back(m.records[i]);
  }
  return out;
}

std::vector<Manifest> partition_by_sites(const Manifest& m, const SitePairing& pairing,
                                         std::vector<SliceRecord>* excluded) {
  pairing.validate();
  std::map<int, std::size_t> site_to_shard;
  for (std::size_t k = 0; k < pairing.pairs.size(); ++k) {
    site_to_shard[pairing.pairs[k].first] = k;
    site_to_shard[pairing.pairs[k].second] = k;
  }
  std::vector<Manifest> shards(pairing.pairs.size());
  for (std::size_t k = 0; k < shards.size(); ++k)
    shards[k].provenance = m.provenance + " | sites (" + std::to_string(pairing.pairs[k].first) +
                           "," + std::to_string(pairing.pairs[k].second) + ")";
  for (const SliceRecord& r : m.records) {
    auto it = site_to_shard.find(r.site);
    if (it == site_to_shard.end()) {
      if (excluded) excluded->push_back(r);
    } else {
      shards[it->second].records.push_back(r);
    }
  }
  return shards;
}

// ---------------------------------------------------------------------------
// synthesis

namespace {

void gaussian_blur_inplace(std::vector<double>& img, int h, int w, double sigma) {
  if (sigma <= 0) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double ksum = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * (i / sigma) * (i / sigma));
    ksum += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (double& k : kernel) k /= ksum;

  std::vector<double> tmp(img.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double v = 0;
      for (int i = -radius; i <= radius; ++i) {
        const int xi = std::clamp(x + i, 0, w - 1);
        v += img[static_cast<std::size_t>(y * w + xi)] * kernel[static_cast<std::size_t>(i + radius)];
      }
      tmp[static_cast<std::size_t>(y * w + x)] = v;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double v = 0;
      for (int i = -radius; i <= radius; ++i) {
        const int yi = std::clamp(y + i, 0, h - 1);
        v += tmp[static_cast<std::size_t>(yi * w + x)] * kernel[static_cast<std::size_t>(i + radius)];
      }
      img[static_cast<std::size_t>(y * w + x)] = v;
    }
}

}  // namespace

Manifest synthesize_dataset(int n_per_site, const std::vector<SiteProfile>& site_profiles, int seed,
                            const std::string& out_dir, int image_hw) {
  if (n_per_site < 1) throw std::invalid_argument("synthesize_dataset: n_per_site must be >= 1");
  if (site_profiles.empty()) throw std::invalid_argument("synthesize_dataset: no site profiles");
  if (image_hw < 16) throw std::invalid_argument("synthesize_dataset: image size too small");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::is_directory(out_dir))
    throw std::runtime_error("synthesize_dataset: cannot create out dir '" + out_dir + "'");

  const int hw = image_hw;
  constexpr int kSlicesPerPatient = 5;
  Manifest m;
  m.provenance = "synthetic phantom (seed " + std::to_string(seed) + ")";
  json meta = json::array();

  std::mt19937 rng(static_cast<unsigned>(seed));
  std::uniform_real_distribution<double> ucenter(0.3, 0.7);
  std::uniform_real_distribution<double> uradius(0.10, 0.25);
  std::uniform_real_distribution<double> uangle(0.0, 3.14159265358979);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> utexture(0.0, 1.0);

  for (std::size_t si = 0; si < site_profiles.size(); ++si) {
    const int site = static_cast<int>(si) + 1;
    const SiteProfile& prof = site_profiles[si];
    for (int n = 0; n < n_per_site; ++n) {
      const int patient = n / kSlicesPerPatient;
      const int slice = n % kSlicesPerPatient;
      const std::string patient_id = "p" + std::to_string(patient);
      const fs::path pdir = fs::path(out_dir) / ("site" + std::to_string(site)) / patient_id;
      fs::create_directories(pdir);

      const double cx = ucenter(rng) * hw, cy = ucenter(rng) * hw;
      const double rx = uradius(rng) * hw, ry = uradius(rng) * hw;
      const double theta = uangle(rng);
      const double ct = std::cos(theta), st = std::sin(theta);
      // low-frequency texture phases
      const double ph1 = utexture(rng) * 6.28318530717959, ph2 = utexture(rng) * 6.28318530717959;

      std::vector<double> img(static_cast<std::size_t>(hw) * hw);
      std::vector<std::uint8_t> mask(static_cast<std::size_t>(hw) * hw);
      for (int y = 0; y < hw; ++y) {
        for (int x = 0; x < hw; ++x) {
          const double dx = x - cx, dy = y - cy;
          const double ex = (dx * ct + dy * st) / rx;
          const double ey = (-dx * st + dy * ct) / ry;
          const bool fg = ex * ex + ey * ey <= 1.0;
          mask[static_cast<std::size_t>(y * hw + x)] = fg ? 1 : 0;
          double v = 0.30 + 0.06 * std::sin(2.0 * 3.14159265 * x / hw * 2.0 + ph1) +
                     0.06 * std::sin(2.0 * 3.14159265 * y / hw * 3.0 + ph2);
          if (fg) v = 0.70 + 0.05 * std::sin(2.0 * 3.14159265 * (x + y) / hw * 2.0 + ph1);
          v = prof.intensity_offset + prof.contrast * v;
          v += prof.noise_sigma * noise(rng);
          img[static_cast<std::size_t>(y * hw + x)] = v;
        }
      }
      gaussian_blur_inplace(img, hw, hw, prof.blur_sigma);

      cv::Mat img16(hw, hw, CV_16UC1);
      cv::Mat mask8(hw, hw, CV_8UC1);
      for (int y = 0; y < hw; ++y)
        for (int x = 0; x < hw; ++x) {
          const double v = std::clamp(img[static_cast<std::size_t>(y * hw + x)], 0.0, 1.0);
          img16.at<std::uint16_t>(y, x) = static_cast<std::uint16_t>(std::lround(v * 65535.0));
          mask8.at<std::uint8_t>(y, x) = mask[static_cast<std::size_t>(y * hw + x)] ? 255 : 0;
        }
      const fs::path ipath = pdir / ("img_" + std::to_string(slice) + ".png");
      const fs::path mpath = pdir / ("mask_" + std::to_string(slice) + ".png");
      const std::vector<int> png_params = {cv::IMWRITE_PNG_COMPRESSION, 3};
      if (!cv::imwrite(ipath.string(), img16, png_params) ||
          !cv::imwrite(mpath.string(), mask8, png_params))
        throw std::runtime_error("synthesize_dataset: cannot write under '" + out_dir + "'");

      m.records.push_back({site, patient_id, slice, ipath.string(), mpath.string()});
      meta.push_back({{"site", site},
                      {"patient_id", patient_id},
                      {"slice_index", slice},
                      {"ellipse", {{"cx", cx}, {"cy", cy}, {"rx", rx}, {"ry", ry}, {"theta", theta}}}});
    }
  }
  m.validate();
  save_manifest(m, (fs::path(out_dir) / "manifest.json").string());
  std::ofstream meta_out(fs::path(out_dir) / "phantom_meta.json", std::ios::trunc);
  meta_out << meta.dump(2) << "\n";
  return m;
}

// ---------------------------------------------------------------------------
// batch loading

std::pair<Tensor, Tensor> load_batch(const std::vector<SliceRecord>& records,
                                     std::pair<int, int> target_hw, Normalization normalization) {
  if (records.empty()) throw std::invalid_argument("load_batch: empty record list");
  const auto [th, tw] = target_hw;
  if (th < 1 || tw < 1) throw std::invalid_argument("load_batch: non-positive target size");

  const int batch = static_cast<int>(records.size());
  Tensor images({batch, 1, th, tw});
  Tensor masks({batch, th, tw});
  for (int b = 0; b < batch; ++b) {
    const SliceRecord& r = records[static_cast<std::size_t>(b)];
    cv::Mat img = cv::imread(r.image_path, cv::IMREAD_ANYDEPTH | cv::IMREAD_GRAYSCALE);
    if (img.empty()) throw std::runtime_error("load_batch: cannot read image '" + r.image_path + "'");
    cv::Mat msk = cv::imread(r.mask_path, cv::IMREAD_GRAYSCALE);
    if (msk.empty()) throw std::runtime_error("load_batch: cannot read mask '" + r.mask_path + "'");

    const double img_scale = img.depth() == CV_16U ? 65535.0 : 255.0;
    Tensor raw({1, 1, img.rows, img.cols});
    for (int y = 0; y < img.rows; ++y)
      for (int x = 0; x < img.cols; ++x)
        raw.at(0, 0, y, x) = (img.depth() == CV_16U ? img.at<std::uint16_t>(y, x)
                                                    : img.at<std::uint8_t>(y, x)) /
                             img_scale;
    Tensor resized = resize_bilinear(raw, th, tw);

    // per-slice normalization
    double lo = resized[0], hi = resized[0], mean = 0;
    for (std::int64_t i = 0; i < resized.numel(); ++i) {
      lo = std::min(lo, resized[i]);
      hi = std::max(hi, resized[i]);
      mean += resized[i];
    }
    mean /= static_cast<double>(resized.numel());
    if (normalization == Normalization::kMinMax) {
      const double range = hi - lo;
      for (std::int64_t i = 0; i < resized.numel(); ++i)
        images.vec()[static_cast<std::size_t>(static_cast<std::int64_t>(b) * th * tw + i)] =
            range > 0 ? (resized[i] - lo) / range : 0.0;
    } else {
      double var = 0;
      for (std::int64_t i = 0; i < resized.numel(); ++i) {
        const double d = resized[i] - mean;
        var += d * d;
      }
      const double sd = std::sqrt(var / static_cast<double>(resized.numel()));
      for (std::int64_t i = 0; i < resized.numel(); ++i)
        images.vec()[static_cast<std::size_t>(static_cast<std::int64_t>(b) * th * tw + i)] =
            sd > 0 ? (resized[i] - mean) / sd : 0.0;
    }

    Tensor mraw({1, msk.rows, msk.cols});
    for (int y = 0; y < msk.rows; ++y)
      for (int x = 0; x < msk.cols; ++x) {
        const double v = msk.at<std::uint8_t>(y, x) / 255.0;
        if (v > 0.25 && v < 0.75)
          throw std::runtime_error("load_batch: mask '" + r.mask_path +
                                   "' has non-binary values after thresholding");
        mraw.at3(0, y, x) = v;
      }
    Tensor mres = resize_nearest(mraw, th, tw);
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(th) * tw; ++i)
      masks.vec()[static_cast<std::size_t>(static_cast<std::int64_t>(b) * th * tw + i)] =
          mres[i] > 0.5 ? 1.0 : 0.0;
  }
  return {std::move(images), std::move(masks)};
}

}  // namespace kd
