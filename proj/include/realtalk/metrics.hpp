#pragma once

// Image and landmark metrics: PSNR, SSIM, mouth/face landmark distance, and
// the aligned-vs-shifted sync gap; plus a report that serializes to JSON/CSV.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "realtalk/autodiff.hpp"
#include "realtalk/data_io.hpp"
#include "realtalk/error.hpp"
#include "realtalk/image.hpp"
#include "realtalk/synth_data.hpp"

namespace realtalk::metrics {

inline constexpr double kPsnrCap = 99.0;

inline void require_same_size(const Image& a, const Image& b, const char* what) {
  require(a.width == b.width && a.height == b.height, ErrorCode::shape_mismatch,
          std::string(what) + ": resolution mismatch " + std::to_string(a.width) + "x" + std::to_string(a.height) +
              " vs " + std::to_string(b.width) + "x" + std::to_string(b.height));
}

inline double mse(const Image& pred, const Image& gt) {
  require_same_size(pred, gt, "mse");
  double acc = 0;
  for (std::size_t i = 0; i < pred.rgb.size(); ++i) {
    const double d = static_cast<double>(pred.rgb[i]) - gt.rgb[i];
    acc += d * d;
  }
  return pred.rgb.empty() ? 0.0 : acc / static_cast<double>(pred.rgb.size());
}

inline double psnr_from_mse(double m) { return m < 1e-10 ? kPsnrCap : 10.0 * std::log10(1.0 / m); }

inline double psnr(const Image& pred, const Image& gt) { return psnr_from_mse(mse(pred, gt)); }

inline std::vector<double> luminance(const Image& img) {
  std::vector<double> y(img.pixels());
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = 0.299 * img.rgb[3 * i] + 0.587 * img.rgb[3 * i + 1] + 0.114 * img.rgb[3 * i + 2];
  return y;
}

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

namespace detail {

inline std::vector<double> gaussian_taps(int n, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(n));
  const double c = (n - 1) / 2.0;
  double s = 0;
  for (int i = 0; i < n; ++i) {
    g[static_cast<std::size_t>(i)] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
    s += g[static_cast<std::size_t>(i)];
  }
  for (auto& v : g) v /= s;
  return g;
}

// "Valid" separable Gaussian filtering of a w x h plane.
inline std::vector<double> filter_valid(const std::vector<double>& x, int w, int h, const std::vector<double>& g) {
  const int n = static_cast<int>(g.size());
  const int ow = w - n + 1, oh = h - n + 1;
  std::vector<double> tmp(static_cast<std::size_t>(ow) * h), out(static_cast<std::size_t>(ow) * oh);
  for (int y = 0; y < h; ++y)
    for (int x0 = 0; x0 < ow; ++x0) {
      double acc = 0;
      for (int k = 0; k < n; ++k) acc += g[static_cast<std::size_t>(k)] * x[static_cast<std::size_t>(y) * w + x0 + k];
      tmp[static_cast<std::size_t>(y) * ow + x0] = acc;
    }
  for (int y0 = 0; y0 < oh; ++y0)
    for (int x0 = 0; x0 < ow; ++x0) {
      double acc = 0;
      for (int k = 0; k < n; ++k) acc += g[static_cast<std::size_t>(k)] * tmp[static_cast<std::size_t>(y0 + k) * ow + x0];
      out[static_cast<std::size_t>(y0) * ow + x0] = acc;
    }
  return out;
}

}  // namespace detail

// Mean of the local SSIM map on luminance, Gaussian-weighted windows fully
// inside the image.
inline double ssim(const Image& pred, const Image& gt, const SsimOptions& opt = {}) {
  require_same_size(pred, gt, "ssim");
  require(pred.width >= opt.window && pred.height >= opt.window, ErrorCode::invalid_argument,
          "ssim: image smaller than the " + std::to_string(opt.window) + "x" + std::to_string(opt.window) + " window");
  const int w = pred.width, h = pred.height;
  const auto a = luminance(pred), b = luminance(gt);
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto g = detail::gaussian_taps(opt.window, opt.sigma);
  const auto mu_a = detail::filter_valid(a, w, h, g), mu_b = detail::filter_valid(b, w, h, g);
  const auto s_aa = detail::filter_valid(aa, w, h, g), s_bb = detail::filter_valid(bb, w, h, g);
  const auto s_ab = detail::filter_valid(ab, w, h, g);
  const double c1 = std::pow(opt.k1 * opt.dynamic_range, 2), c2 = std::pow(opt.k2 * opt.dynamic_range, 2);
  double acc = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double va = s_aa[i] - mu_a[i] * mu_a[i];
    const double vb = s_bb[i] - mu_b[i] * mu_b[i];
    const double cov = s_ab[i] - mu_a[i] * mu_b[i];
    acc += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
           ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
  }
  return acc / static_cast<double>(mu_a.size());
}

enum class Region { mouth, face };

// Mean over frames of the mean per-point Euclidean distance.
inline double lmd(const ad::Matrix<double>& pred, const ad::Matrix<double>& gt, Region region) {
  require(pred.rows() == gt.rows() && pred.cols() == gt.cols(), ErrorCode::shape_mismatch,
          "lmd: landmark sequences differ in shape");
  require(pred.cols() == kLandmarkDim, ErrorCode::shape_mismatch, "lmd: frames must be 204 wide");
  require(pred.rows() >= 1, ErrorCode::invalid_argument, "lmd: empty sequence");
  const int begin = region == Region::mouth ? kMouthBegin : 0;
  const int count = region == Region::mouth ? kMouthCount : kNumLandmarks;
  double total = 0;
  for (ad::Index t = 0; t < pred.rows(); ++t) {
    double frame = 0;
    for (int i = begin; i < begin + count; ++i) frame += (pred.block(t, 3 * i, 1, 3) - gt.block(t, 3 * i, 1, 3)).norm();
    total += frame / count;
  }
  return total / static_cast<double>(pred.rows());
}

// Mean aligned score minus mean shifted score.
inline double sync_eval(const ad::Matrix<double>& aligned, const ad::Matrix<double>& shifted) {
  require(aligned.size() >= 10 && shifted.size() >= 10, ErrorCode::invalid_argument,
          "sync_eval needs at least 10 windows of each kind");
  require(aligned.minCoeff() >= -1 && aligned.maxCoeff() <= 1 && shifted.minCoeff() >= -1 && shifted.maxCoeff() <= 1,
          ErrorCode::invalid_argument, "sync scores must lie in [-1, 1]");
  return aligned.mean() - shifted.mean();
}

struct MetricReport {
  std::string clip_id;
  std::string method;
  std::vector<double> psnr, ssim, m_lmd, f_lmd;  // per frame
  std::optional<double> sync_gap;
  std::map<std::string, double> extra;  // merged from external scorers

  static double mean_of(const std::vector<double>& v) {
    if (v.empty()) return std::nan("");
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }

  void merge_external(const std::map<std::string, double>& values) {
    for (const auto& [k, v] : values) extra[k] = v;
  }

  nlohmann::json to_json() const {
    auto agg = [&](const std::vector<double>& v) -> nlohmann::json {
      return v.empty() ? nlohmann::json(nullptr) : nlohmann::json(mean_of(v));
    };
    nlohmann::json j;
    j["clip_id"] = clip_id;
    j["method"] = method;
    j["per_frame"] = {{"psnr", psnr}, {"ssim", ssim}, {"m_lmd", m_lmd}, {"f_lmd", f_lmd}};
    j["aggregate"] = {{"psnr", agg(psnr)}, {"ssim", agg(ssim)}, {"m_lmd", agg(m_lmd)}, {"f_lmd", agg(f_lmd)}};
    j["aggregate"]["sync_gap"] = sync_gap ? nlohmann::json(*sync_gap) : nlohmann::json(nullptr);
    for (const auto& [k, v] : extra) j["aggregate"][k] = v;
    return j;
  }

  static std::vector<std::string> csv_header() { return {"clip_id", "method", "ssim", "psnr", "m_lmd", "f_lmd", "sync_gap"}; }

  std::vector<std::string> csv_row() const {
    auto num = [](double v) { return std::isnan(v) ? std::string() : io::format_number(v); };
    return {clip_id, method, num(mean_of(ssim)), num(mean_of(psnr)), num(mean_of(m_lmd)), num(mean_of(f_lmd)),
            sync_gap ? io::format_number(*sync_gap) : std::string()};
  }
};

inline void write_report(const MetricReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_text(dir / "metrics.json", r.to_json().dump(2) + "\n");
  std::vector<std::vector<std::string>> rows{MetricReport::csv_header(), r.csv_row()};
  std::string csv;
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) csv += (i ? "," : "") + row[i];
    csv += "\n";
  }
  io::write_text(dir / "metrics.csv", csv);
}

}  // namespace realtalk::metrics
