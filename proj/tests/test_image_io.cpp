#include "anerf/image_io.hpp"
#include "test_helpers.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <random>

using namespace anerf;

TEST(ImageIo, Png16RoundTripIsQuantized) {
  Image img(7, 5, 3);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (float& v : img.pixels) {
    v = u(rng);
  }
  const auto path = testing_util::temp_path("rt16.png");
  write_png16(img, path);
  const Image back = read_png(path);
  ASSERT_TRUE(back.same_shape(img));
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    EXPECT_EQ(back.pixels[i], quantize16(img.pixels[i]));
    EXPECT_NEAR(back.pixels[i], img.pixels[i], 1.0 / 65535.0);
  }
}

TEST(ImageIo, Png8GrayAndClamping) {
  Image img(3, 2, 1);
  img.pixels = {-1.0f, 0.0f, 0.5f, 1.0f, 2.0f, 0.25f};
  const auto path = testing_util::temp_path("rt8.png");
  write_png8(img, path);
  const Image back = read_png(path);
  ASSERT_EQ(back.channels, 1);
  EXPECT_EQ(back.pixels[0], 0.0f);
  EXPECT_EQ(back.pixels[3], 1.0f);
  EXPECT_EQ(back.pixels[4], 1.0f);
  EXPECT_NEAR(back.pixels[2], 0.5f, 1.0 / 255.0);
}

TEST(ImageIo, Errors) {
  EXPECT_THROW(read_png(testing_util::temp_path("does_not_exist.png")), IoError);
  const auto bogus = testing_util::temp_path("bogus.png");
  std::ofstream(bogus) << "not a png at all";
  EXPECT_THROW(read_png(bogus), IoError);
  EXPECT_THROW(write_png8(Image(2, 2, 2), testing_util::temp_path("two.png")),
               InvalidInputError);
}
