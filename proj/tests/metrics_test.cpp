#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "realtalk/metrics.hpp"

using namespace realtalk;
using M = ad::Matrix<double>;

namespace {

Image random_image(int w, int h, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(w, h);
  for (auto& v : img.rgb) v = u(rng);
  return img;
}

// Straightforward SSIM: for every fully-contained 11x11 window, weight the
// pixels with a 2-D Gaussian and form the local statistics directly.
double reference_ssim(const Image& a, const Image& b) {
  const int n = 11;
  const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double kernel[11][11];
  double total = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      kernel[i][j] = std::exp(-((i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0)) / (2 * sigma * sigma));
      total += kernel[i][j];
    }
  auto gray = [](const Image& im, int x, int y) {
    return 0.299 * im.at(x, y, 0) + 0.587 * im.at(x, y, 1) + 0.114 * im.at(x, y, 2);
  };
  double sum = 0;
  int count = 0;
  for (int y0 = 0; y0 + n <= a.height; ++y0)
    for (int x0 = 0; x0 + n <= a.width; ++x0) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const double w = kernel[i][j] / total;
          const double pa = gray(a, x0 + j, y0 + i), pb = gray(b, x0 + j, y0 + i);
          ma += w * pa;
          mb += w * pb;
          saa += w * pa * pa;
          sbb += w * pb * pb;
          sab += w * pa * pb;
        }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
      sum += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return sum / count;
}

M random_landmarks(int t, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  M m(t, kLandmarkDim);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace

TEST(Psnr, CapZeroAndHandComputed) {
  std::mt19937_64 rng(1);
  Image a = random_image(16, 12, rng);
  EXPECT_EQ(metrics::psnr(a, a), 99.0);
  EXPECT_NEAR(metrics::psnr(Image(8, 8, 0.0f), Image(8, 8, 1.0f)), 0.0, 1e-12);
  Image b = random_image(16, 12, rng);
  double acc = 0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) acc += std::pow(double(a.rgb[i]) - b.rgb[i], 2);
  EXPECT_NEAR(metrics::psnr(a, b), 10 * std::log10(a.rgb.size() / acc), 1e-9);
  EXPECT_EQ(metrics::psnr(a, b), metrics::psnr(b, a));
  EXPECT_THROW(metrics::psnr(a, Image(12, 16)), Error);
}

TEST(Ssim, IdentityAndWindowSize) {
  std::mt19937_64 rng(2);
  Image a = random_image(20, 15, rng);
  EXPECT_NEAR(metrics::ssim(a, a), 1.0, 1e-9);
  EXPECT_THROW(metrics::ssim(Image(10, 20), Image(10, 20)), Error);
  EXPECT_THROW(metrics::ssim(a, Image(15, 20)), Error);
}

TEST(Ssim, NegativeOfPatternIsAnticorrelated) {
  Image a(24, 24), b(24, 24);
  for (int y = 0; y < 24; ++y)
    for (int x = 0; x < 24; ++x)
      for (int c = 0; c < 3; ++c) {
        a.at(x, y, c) = ((x / 3 + y / 3) % 2) ? 0.9f : 0.1f;
        b.at(x, y, c) = 1.0f - a.at(x, y, c);
      }
  EXPECT_LT(metrics::ssim(a, b), 0.0);
}

TEST(Ssim, MatchesDirectReference) {
  Image c(16, 16, 0.4f), d(16, 16, 0.5f);
  EXPECT_NEAR(metrics::ssim(c, d), reference_ssim(c, d), 1e-6);
  std::mt19937_64 rng(3);
  for (int k = 0; k < 20; ++k) {
    const int w = 11 + k % 7, h = 11 + (k * 3) % 9;
    Image a = random_image(w, h, rng), b = random_image(w, h, rng);
    if (k % 2) {
      // Correlated pair so the structure term is not near zero.
      for (std::size_t i = 0; i < b.rgb.size(); ++i) b.rgb[i] = 0.7f * a.rgb[i] + 0.3f * b.rgb[i];
    }
    const double got = metrics::ssim(a, b);
    EXPECT_NEAR(got, reference_ssim(a, b), 1e-6) << "pair " << k;
    EXPECT_NEAR(got, metrics::ssim(b, a), 1e-12);
  }
}

TEST(Ssim, TranslationWithMatchingCrops) {
  std::mt19937_64 rng(4);
  Image a = random_image(30, 30, rng), b = random_image(30, 30, rng);
  auto crop = [](const Image& im, int ox, int oy, int w, int h) {
    Image out(w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) out.at(x, y, c) = im.at(x + ox, y + oy, c);
    return out;
  };
  // A shifted crop of both images scores the same as the same crop taken
  // from images that were translated first.
  Image a1 = crop(a, 2, 3, 20, 20), b1 = crop(b, 2, 3, 20, 20);
  Image at = crop(a, 1, 1, 29, 29), bt = crop(b, 1, 1, 29, 29);
  EXPECT_EQ(metrics::ssim(a1, b1), metrics::ssim(crop(at, 1, 2, 20, 20), crop(bt, 1, 2, 20, 20)));
  EXPECT_EQ(metrics::psnr(a1, b1), metrics::psnr(crop(at, 1, 2, 20, 20), crop(bt, 1, 2, 20, 20)));
}

TEST(Lmd, IdentityShiftAndMouthRatio) {
  std::mt19937_64 rng(5);
  M a = random_landmarks(4, rng);
  EXPECT_EQ(metrics::lmd(a, a, metrics::Region::mouth), 0.0);
  EXPECT_EQ(metrics::lmd(a, a, metrics::Region::face), 0.0);
  M shifted = a.array() + 1.0;
  EXPECT_NEAR(metrics::lmd(shifted, a, metrics::Region::mouth), std::sqrt(3.0), 1e-12);
  EXPECT_NEAR(metrics::lmd(shifted, a, metrics::Region::face), std::sqrt(3.0), 1e-12);

  M mouth_only = a;
  std::normal_distribution<double> n(0.0, 0.3);
  for (int t = 0; t < 4; ++t)
    for (int c = 3 * kMouthBegin; c < kLandmarkDim; ++c) mouth_only(t, c) += n(rng);
  const double m = metrics::lmd(mouth_only, a, metrics::Region::mouth);
  EXPECT_NEAR(metrics::lmd(mouth_only, a, metrics::Region::face), m * 20.0 / 68.0, 1e-12);
  EXPECT_EQ(metrics::lmd(mouth_only, a, metrics::Region::face), metrics::lmd(a, mouth_only, metrics::Region::face));
  EXPECT_THROW(metrics::lmd(a, M(M::Zero(3, kLandmarkDim)), metrics::Region::face), Error);
  EXPECT_THROW(metrics::lmd(M(M::Zero(4, 12)), M(M::Zero(4, 12)), metrics::Region::face), Error);
}

TEST(SyncEval, GapAndMinimumWindows) {
  M aligned = M::Constant(12, 1, 0.8), shifted = M::Constant(12, 1, -0.1);
  EXPECT_NEAR(metrics::sync_eval(aligned, shifted), 0.9, 1e-12);
  EXPECT_EQ(metrics::sync_eval(M::Ones(10, 1), M(-M::Ones(10, 1))), 2.0);
  EXPECT_THROW(metrics::sync_eval(M::Zero(9, 1), M::Zero(12, 1)), Error);
  EXPECT_THROW(metrics::sync_eval(M::Constant(12, 1, 1.5), M::Zero(12, 1)), Error);
}

TEST(MetricReport, JsonAggregatesAndCsv) {
  metrics::MetricReport r;
  r.clip_id = "clip_0000";
  r.method = "realtalk";
  r.psnr = {20.0, 30.0};
  r.ssim = {0.5, 0.7};
  r.m_lmd = {0.1, 0.3};
  r.f_lmd = {0.2, 0.2};
  r.sync_gap = 0.4;
  r.merge_external({{"emotion_score", 0.9}});
  auto j = r.to_json();
  EXPECT_DOUBLE_EQ(j["aggregate"]["psnr"].get<double>(), 25.0);
  EXPECT_DOUBLE_EQ(j["aggregate"]["ssim"].get<double>(), 0.6);
  EXPECT_DOUBLE_EQ(j["aggregate"]["m_lmd"].get<double>(), 0.2);
  EXPECT_DOUBLE_EQ(j["aggregate"]["emotion_score"].get<double>(), 0.9);
  EXPECT_EQ(j["per_frame"]["psnr"].size(), 2u);

  auto dir = std::filesystem::temp_directory_path() / "realtalk_metrics_test";
  std::filesystem::remove_all(dir);
  metrics::write_report(r, dir);
  std::ifstream csv(dir / "metrics.csv");
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  EXPECT_EQ(header, "clip_id,method,ssim,psnr,m_lmd,f_lmd,sync_gap");
  EXPECT_EQ(row.substr(0, 19), "clip_0000,realtalk,");
  auto loaded = nlohmann::json::parse(std::ifstream(dir / "metrics.json"));
  EXPECT_EQ(loaded, j);
  std::filesystem::remove_all(dir);
}
