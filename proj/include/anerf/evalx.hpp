#pragma once

#include "anerf/image_io.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace anerf {

/// Reported in place of infinity for identical images.
inline constexpr double kPsnrCap = 99.0;

/// Mean over all pixels and channels of images in [0,1].
double psnr(const Image& a, const Image& b);

/// Mean local SSIM of the luma channels, 11x11 Gaussian window (sigma 1.5),
/// over window positions that fit inside the image.
double ssim(const Image& a, const Image& b);

/// Rec. 601 luma of an RGB image, or the image itself when single-channel.
std::vector<double> luma(const Image& image);

struct MetricReport {
  std::vector<std::string> frame_ids;
  std::vector<double> psnr;
  std::vector<double> ssim;

  double mean_psnr() const;
  double mean_ssim() const;
  /// Columns frame,psnr,ssim,lpips; lpips is left empty. Last row is "mean".
  void write_csv(const std::filesystem::path& path) const;
};

MetricReport evaluate_frames(const std::vector<Image>& rendered, const std::vector<Image>& truth,
                             const std::vector<std::string>& frame_ids);

}  // namespace anerf
