#include "anerf/evalx.hpp"

#include "anerf/common.hpp"
#include "anerf/parallel.hpp"
#include "anerf/text_util.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

namespace anerf {

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

void require_pair(const Image& a, const Image& b) {
  require(a.same_shape(b), "metric images differ in shape");
  require(a.width > 0 && a.height > 0 && a.channels > 0, "metric images are empty");
}

std::array<double, kWindow> gaussian_taps() {
  std::array<double, kWindow> w{};
  const int r = kWindow / 2;
  double sum = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    w[i] = std::exp(-0.5 * (i - r) * (i - r) / (kSigma * kSigma));
    sum += w[i];
  }
  for (double& v : w) {
    v /= sum;
  }
  return w;
}

/// Separable weighted sum over every window that fits.
std::vector<double> filter_valid(const std::vector<double>& x, int width, int height) {
  static const std::array<double, kWindow> w = gaussian_taps();
  const int ow = width - kWindow + 1;
  const int oh = height - kWindow + 1;
  std::vector<double> rows(static_cast<size_t>(height) * ow);
  for (int y = 0; y < height; ++y) {
    for (int x0 = 0; x0 < ow; ++x0) {
      double s = 0.0;
      for (int k = 0; k < kWindow; ++k) {
        s += w[k] * x[static_cast<size_t>(y) * width + x0 + k];
      }
      rows[static_cast<size_t>(y) * ow + x0] = s;
    }
  }
  std::vector<double> out(static_cast<size_t>(oh) * ow);
  for (int y0 = 0; y0 < oh; ++y0) {
    for (int x0 = 0; x0 < ow; ++x0) {
      double s = 0.0;
      for (int k = 0; k < kWindow; ++k) {
        s += w[k] * rows[static_cast<size_t>(y0 + k) * ow + x0];
      }
      out[static_cast<size_t>(y0) * ow + x0] = s;
    }
  }
  return out;
}

}  // namespace

double psnr(const Image& a, const Image& b) {
  require_pair(a, b);
  double sum = 0.0;
  for (size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
    sum += d * d;
  }
  const double mse = sum / static_cast<double>(a.pixels.size());
  if (mse == 0.0) {
    return kPsnrCap;
  }
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

std::vector<double> luma(const Image& image) {
  const size_t n = static_cast<size_t>(image.width) * image.height;
  std::vector<double> y(n);
  if (image.channels == 1) {
    for (size_t i = 0; i < n; ++i) {
      y[i] = image.pixels[i];
    }
    return y;
  }
  require(image.channels >= 3, "luma needs one or at least three channels");
  const size_t c = static_cast<size_t>(image.channels);
  for (size_t i = 0; i < n; ++i) {
    y[i] = 0.299 * image.pixels[i * c] + 0.587 * image.pixels[i * c + 1] +
           0.114 * image.pixels[i * c + 2];
  }
  return y;
}

double ssim(const Image& a, const Image& b) {
  require_pair(a, b);
  if (a.width < kWindow || a.height < kWindow) {
    throw InvalidInputError("ssim needs images of at least 11x11 pixels, got " +
                            std::to_string(a.width) + "x" + std::to_string(a.height));
  }
  const std::vector<double> x = luma(a);
  const std::vector<double> y = luma(b);
  std::vector<double> xx(x.size());
  std::vector<double> yy(x.size());
  std::vector<double> xy(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const int w = a.width;
  const int h = a.height;
  const auto mx = filter_valid(x, w, h);
  const auto my = filter_valid(y, w, h);
  const auto mxx = filter_valid(xx, w, h);
  const auto myy = filter_valid(yy, w, h);
  const auto mxy = filter_valid(xy, w, h);
  double sum = 0.0;
  for (size_t i = 0; i < mx.size(); ++i) {
    const double vx = mxx[i] - mx[i] * mx[i];
    const double vy = myy[i] - my[i] * my[i];
    const double cxy = mxy[i] - mx[i] * my[i];
    sum += (2.0 * mx[i] * my[i] + kC1) * (2.0 * cxy + kC2) /
           ((mx[i] * mx[i] + my[i] * my[i] + kC1) * (vx + vy + kC2));
  }
  return sum / static_cast<double>(mx.size());
}

double MetricReport::mean_psnr() const {
  require(!psnr.empty(), "metric report is empty");
  return std::accumulate(psnr.begin(), psnr.end(), 0.0) / static_cast<double>(psnr.size());
}

double MetricReport::mean_ssim() const {
  require(!ssim.empty(), "metric report is empty");
  return std::accumulate(ssim.begin(), ssim.end(), 0.0) / static_cast<double>(ssim.size());
}

void MetricReport::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path);
  if (!out) {
    throw IoError("cannot write metrics to " + path.string());
  }
  out << "frame,psnr,ssim,lpips\n";
  for (size_t i = 0; i < frame_ids.size(); ++i) {
    out << frame_ids[i] << ',' << format_double(psnr[i]) << ',' << format_double(ssim[i]) << ",\n";
  }
  out << "mean," << format_double(mean_psnr()) << ',' << format_double(mean_ssim()) << ",\n";
  if (!out) {
    throw IoError("failed writing metrics to " + path.string());
  }
}

MetricReport evaluate_frames(const std::vector<Image>& rendered, const std::vector<Image>& truth,
                             const std::vector<std::string>& frame_ids) {
  require(rendered.size() == truth.size() && truth.size() == frame_ids.size(),
          "evaluation needs one rendered image and one id per ground-truth frame");
  require(!truth.empty(), "evaluation needs at least one frame");
  MetricReport report;
  report.frame_ids = frame_ids;
  report.psnr.resize(truth.size());
  report.ssim.resize(truth.size());
  parallel_for(0, static_cast<int>(truth.size()), [&](int i) {
    report.psnr[i] = psnr(rendered[i], truth[i]);
    report.ssim[i] = ssim(rendered[i], truth[i]);
  });
  return report;
}

}  // namespace anerf
