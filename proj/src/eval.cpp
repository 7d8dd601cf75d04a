#include "kd/eval.hpp"

#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace kd {

double dice_score(const Tensor& pred, const Tensor& gt) {
  if (!pred.same_shape(gt)) throw std::invalid_argument("dice_score: shape mismatch");
  double inter = 0, a = 0, b = 0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const double p = pred[i], g = gt[i];
    if ((p != 0.0 && p != 1.0) || (g != 0.0 && g != 1.0))
      throw std::invalid_argument("dice_score: masks must be binary");
    inter += p * g;
    a += p;
    b += g;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * inter / (a + b);
}

Tensor argmax_mask(const Tensor& logits) {
  const auto& s = logits.shape();
  if (s.size() != 4) throw std::invalid_argument("argmax_mask: need [B,C,H,W]");
  const int batch = s[0], c = s[1];
  const std::int64_t plane = static_cast<std::int64_t>(s[2]) * s[3];
  Tensor out({batch, s[2], s[3]});
  for (int b = 0; b < batch; ++b) {
    const double* z = logits.data() + static_cast<std::int64_t>(b) * c * plane;
    double* o = out.data() + static_cast<std::int64_t>(b) * plane;
    for (std::int64_t i = 0; i < plane; ++i) {
      int best = 0;
      for (int ci = 1; ci < c; ++ci)
        if (z[ci * plane + i] > z[best * plane + i]) best = ci;
      o[i] = best;
    }
  }
  return out;
}

std::int64_t count_params(const SegmentationModelAdapter& model) {
  std::int64_t n = 0;
  for (const Var& p : model.parameters()) n += p->value.numel();
  return n;
}

std::int64_t layer_macs(const LayerInfo& l) {
  const std::int64_t out_elems = static_cast<std::int64_t>(l.c_out) * l.h_out * l.w_out;
  if (l.type == "conv2d")
    return static_cast<std::int64_t>(l.c_in) * l.kernel * l.kernel * out_elems;
  if (l.type == "leaky_relu") return out_elems;
  if (l.type == "upsample_bilinear") return 4 * out_elems;
  if (l.type == "concat") return 0;
  throw std::invalid_argument("layer_macs: unknown layer type '" + l.type + "' (layer '" + l.name +
                              "')");
}

std::int64_t estimate_flops(const SegmentationModelAdapter& model, int in_h, int in_w) {
  std::int64_t macs = 0;
  for (const LayerInfo& l : model.layers(in_h, in_w)) macs += layer_macs(l);
  return 2 * macs;
}

std::vector<double> per_slice_dice(SegmentationModelAdapter& model, const Manifest& test,
                                   std::pair<int, int> input_hw, Normalization normalization,
                                   int batch_size) {
  if (test.records.empty()) throw std::invalid_argument("per_slice_dice: empty test set");
  std::vector<double> dices;
  for (std::size_t start = 0; start < test.records.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(test.records.size(), start + static_cast<std::size_t>(batch_size));
    const std::vector<SliceRecord> chunk(test.records.begin() + static_cast<std::ptrdiff_t>(start),
                                         test.records.begin() + static_cast<std::ptrdiff_t>(end));
    auto [images, masks] = load_batch(chunk, input_hw, normalization);
    ForwardResult fr = model.forward(constant(std::move(images)), /*with_taps=*/false);
    const Tensor pred = argmax_mask(fr.logits->value);
    const int h = pred.dim(1), w = pred.dim(2);
    for (int b = 0; b < static_cast<int>(chunk.size()); ++b) {
      Tensor p({h, w}), g({h, w});
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) {
        p[i] = pred[static_cast<std::int64_t>(b) * h * w + i];
        g[i] = masks[static_cast<std::int64_t>(b) * h * w + i];
      }
      dices.push_back(dice_score(p, g));
    }
  }
  return dices;
}

EvalResult evaluate(SegmentationModelAdapter& model, const Manifest& test,
                    std::pair<int, int> input_hw, Normalization normalization, int batch_size) {
  const std::vector<double> dices = per_slice_dice(model, test, input_hw, normalization, batch_size);
  EvalResult r;
  r.n_samples = static_cast<int>(dices.size());
  r.model_name = model.name();
  double mean = 0;
  for (double d : dices) mean += d;
  mean /= static_cast<double>(dices.size());
  double var = 0;
  for (double d : dices) var += (d - mean) * (d - mean);
  r.mean_dice = mean;
  r.std_dice = std::sqrt(var / static_cast<double>(dices.size()));  // population std
  r.params = count_params(model);
  r.flops = estimate_flops(model, input_hw.first, input_hw.second);
  return r;
}

namespace {

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

}  // namespace

void emit_report(const std::vector<ReportEntry>& entries, const std::string& csv_path,
                 std::string* human_readable) {
  if (entries.empty()) throw std::invalid_argument("emit_report: no results");
  std::ostringstream csv;
  csv << "model,role,dice_mean_pct,dice_std,params,flops,baseline,delta_pct\n";
  std::ostringstream tab;
  tab << "Model | Role | Dice (% +- std) | Params | FLOPs | Delta vs baseline\n";
  tab << "------|------|-----------------|--------|-------|------------------\n";
  for (const ReportEntry& e : entries) {
    const double pct = e.result.mean_dice * 100.0;
    csv << e.result.model_name << "," << e.role << "," << fmt(pct) << ","
        << fmt(e.result.std_dice) << "," << e.result.params << "," << e.result.flops << ",";
    std::string delta = "--";
    if (e.baseline_dice_pct) {
      csv << fmt(*e.baseline_dice_pct);
      const double d = pct - *e.baseline_dice_pct;
      delta = (d >= 0 ? "+" : "") + fmt(d, 2) + " (" + fmt(*e.baseline_dice_pct, 2) + " to " +
              fmt(pct, 2) + ")";
      csv << "," << (d >= 0 ? "+" : "") << fmt(d, 2) << "\n";
    } else {
      csv << "--,--\n";
    }
    tab << e.result.model_name << " | " << e.role << " | " << fmt(pct, 2) << " +- "
        << fmt(e.result.std_dice) << " | " << e.result.params << " | " << e.result.flops << " | "
        << delta << "\n";
  }
  tab << "(dice_mean_pct on percent scale; dice_std on 0-1 scale; FLOPs = 2 x MACs)\n";

  std::ofstream out(csv_path, std::ios::trunc);
  if (!out) throw std::runtime_error("emit_report: cannot write '" + csv_path + "'");
  out << csv.str();
  if (human_readable) *human_readable = tab.str();
}

void export_overlays(SegmentationModelAdapter& model, const std::vector<SliceRecord>& records,
                     const std::string& out_dir, std::pair<int, int> input_hw,
                     Normalization normalization) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::is_directory(out_dir))
    throw std::runtime_error("export_overlays: cannot create out dir '" + out_dir + "'");

  auto contour = [](const Tensor& mask, int b, int h, int w, int y, int x) {
    if (mask[(static_cast<std::int64_t>(b) * h + y) * w + x] == 0.0) return false;
    auto at = [&](int yy, int xx) {
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
      return mask[(static_cast<std::int64_t>(b) * h + yy) * w + xx];
    };
    return at(y - 1, x) == 0.0 || at(y + 1, x) == 0.0 || at(y, x - 1) == 0.0 || at(y, x + 1) == 0.0;
  };

  for (std::size_t i = 0; i < records.size(); ++i) {
    const SliceRecord& r = records[i];
    auto [images, gt] = load_batch({r}, input_hw, normalization);
    ForwardResult fr = model.forward(constant(images), /*with_taps=*/false);
    const Tensor pred = argmax_mask(fr.logits->value);
    const int h = input_hw.first, w = input_hw.second;

    cv::Mat out(h, w, CV_8UC3);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const auto v = static_cast<std::uint8_t>(
            std::clamp(images.at(0, 0, y, x), 0.0, 1.0) * 255.0);
        out.at<cv::Vec3b>(y, x) = {v, v, v};
        if (contour(gt, 0, h, w, y, x)) out.at<cv::Vec3b>(y, x) = {0, 255, 0};
        if (contour(pred, 0, h, w, y, x)) out.at<cv::Vec3b>(y, x) = {0, 0, 255};
      }
    const std::string name = "site" + std::to_string(r.site) + "_" + r.patient_id + "_slice" +
                             std::to_string(r.slice_index) + "_overlay.png";
    if (!cv::imwrite((fs::path(out_dir) / name).string(), out,
                     {cv::IMWRITE_PNG_COMPRESSION, 3}))
      throw std::runtime_error("export_overlays: cannot write '" + name + "'");
  }
}

}  // namespace kd
