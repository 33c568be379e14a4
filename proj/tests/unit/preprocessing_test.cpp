#include <gtest/gtest.h>

#include <lumenseg/preprocessing.hpp>

#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "test_support.hpp"

using namespace lumenseg;
using lumenseg::testing::disk_frame;

namespace {

RawFrame raw(Image8 img) { return RawFrame{std::move(img), "frame", 0}; }

int count_on(const Mask& m) {
  int n = 0;
  for (auto v : m.data()) n += v;
  return n;
}

}  // namespace

TEST(Edges, ConstantFrameHasNoEdges) {
  Image8 img(96, 120, 3, 128);
  const auto edges = detect_edges(raw(img), PreprocConfig{});
  EXPECT_EQ(count_on(edges), 0);
}

TEST(Edges, DiskEdgesHugTheCircle) {
  const auto edges = detect_edges(raw(disk_frame(300, 300, 150, 150, 100)), PreprocConfig{});
  ASSERT_GT(count_on(edges), 0);
  for (int r = 0; r < edges.rows(); ++r) {
    for (int c = 0; c < edges.cols(); ++c) {
      if (edges.at(r, c)) EXPECT_LE(std::abs(std::hypot(r - 150.0, c - 150.0) - 100.0), 2.0) << r << "," << c;
    }
  }
  int covered = 0;
  const int samples = 720;
  for (int i = 0; i < samples; ++i) {
    const double t = 2 * std::numbers::pi * i / samples;
    const int r0 = static_cast<int>(std::lround(150 + 100 * std::sin(t)));
    const int c0 = static_cast<int>(std::lround(150 + 100 * std::cos(t)));
    bool hit = false;
    for (int dr = -1; dr <= 1 && !hit; ++dr) {
      for (int dc = -1; dc <= 1 && !hit; ++dc) hit = edges.at(r0 + dr, c0 + dc) != 0;
    }
    covered += hit;
  }
  EXPECT_GE(covered, 0.8 * samples);
}

TEST(Edges, StepEdgeGivesOneColumn) {
  Image8 img(96, 128, 3);
  for (int r = 0; r < 96; ++r) {
    for (int c = 64; c < 128; ++c) {
      for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = 255;
    }
  }
  const auto edges = detect_edges(raw(img), PreprocConfig{});
  std::set<int> cols;
  for (int r = 0; r < edges.rows(); ++r) {
    int in_row = 0;
    for (int c = 0; c < edges.cols(); ++c) {
      if (edges.at(r, c)) {
        cols.insert(c);
        ++in_row;
      }
    }
    if (r > 2 && r < 93) EXPECT_EQ(in_row, 1) << "row " << r;
  }
  ASSERT_EQ(cols.size(), 1u);
  EXPECT_NEAR(*cols.begin(), 63.5, 1.5);
}

TEST(Edges, EdgeMapIsBinaryAndDeterministic) {
  std::mt19937_64 rng(3);
  Image8 img(80, 90, 3);
  for (auto& v : img.data()) v = static_cast<std::uint8_t>(rng() % 256);
  const auto a = detect_edges(raw(img), PreprocConfig{});
  const auto b = detect_edges(raw(img), PreprocConfig{});
  EXPECT_TRUE(is_binary(a));
  EXPECT_EQ(a, b);
}

TEST(Hough, RecoversCircle) {
  PreprocConfig cfg;
  const auto edges = detect_edges(raw(disk_frame(300, 300, 150, 150, 100)), cfg);
  const auto e = fit_fov_ellipse(edges, cfg);
  ASSERT_TRUE(e.has_value());
  EXPECT_NEAR(e->center_row, 150, 2);
  EXPECT_NEAR(e->center_col, 150, 2);
  EXPECT_NEAR(e->semi_major, 100, 3);
  EXPECT_NEAR(e->semi_minor, 100, 3);
  EXPECT_GE(e->semi_major, e->semi_minor);
  EXPECT_GE(e->rotation, 0.0);
  EXPECT_LT(e->rotation, std::numbers::pi);
}

TEST(Hough, EmptyEdgeMapGivesNone) {
  EXPECT_FALSE(fit_fov_ellipse(Mask(300, 300, 1), PreprocConfig{}).has_value());
}

TEST(Hough, ConcentricCirclesPickTheOuterOne) {
  auto img = disk_frame(300, 300, 150, 150, 100);
  for (int r = 0; r < 300; ++r) {
    for (int c = 0; c < 300; ++c) {
      if (std::hypot(r - 150.0, c - 150.0) <= 30) {
        for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = 0;
      }
    }
  }
  PreprocConfig cfg;
  cfg.min_axis_fraction = 0.25;
  const auto e = fit_fov_ellipse(detect_edges(raw(img), cfg), cfg);
  ASSERT_TRUE(e.has_value());
  EXPECT_NEAR(e->semi_minor, 100, 3);
  EXPECT_NEAR(e->center_row, 150, 2);
}

TEST(Hough, RecoversTiltedEllipse) {
  Image8 img(240, 320, 3);
  const double cr = 118, cc = 165, a = 130, b = 95, th = 0.3;
  for (int r = 0; r < 240; ++r) {
    for (int c = 0; c < 320; ++c) {
      const double dx = c - cc, dy = r - cr;
      const double u = (dx * std::cos(th) + dy * std::sin(th)) / a;
      const double v = (-dx * std::sin(th) + dy * std::cos(th)) / b;
      if (u * u + v * v <= 1) {
        for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = 180;
      }
    }
  }
  PreprocConfig cfg;
  const auto e = fit_fov_ellipse(detect_edges(raw(img), cfg), cfg);
  ASSERT_TRUE(e.has_value());
  EXPECT_NEAR(e->center_row, cr, 3);
  EXPECT_NEAR(e->center_col, cc, 3);
  EXPECT_NEAR(e->semi_major, a, 4);
  EXPECT_NEAR(e->semi_minor, b, 4);
  EXPECT_NEAR(e->rotation, th, 0.1);
}

TEST(Crop, BoundingBoxOfCircle) {
  PreprocConfig cfg;
  const auto img = disk_frame(400, 400, 200, 200, 150);
  const auto e = fit_fov_ellipse(detect_edges(raw(img), cfg), cfg);
  ASSERT_TRUE(e.has_value());
  const auto out = crop_to_fov(img, e);
  EXPECT_FALSE(out.fallback);
  EXPECT_NEAR(out.rect.top, 50, 3);
  EXPECT_NEAR(out.rect.left, 50, 3);
  EXPECT_NEAR(out.rect.bottom(), 350, 3);
  EXPECT_NEAR(out.rect.right(), 350, 3);
  EXPECT_EQ(out.pixels.rows(), out.rect.height);
  EXPECT_EQ(out.pixels.cols(), out.rect.width);
}

TEST(Crop, FallbackIsCenteredSquare) {
  const Image8 wide(300, 400, 3);
  const auto a = crop_to_fov(wide, std::nullopt);
  EXPECT_TRUE(a.fallback);
  EXPECT_EQ(a.rect, (CropRect{0, 50, 300, 300}));
  const Image8 tall(400, 300, 3);
  EXPECT_EQ(crop_to_fov(tall, std::nullopt).rect, (CropRect{50, 0, 300, 300}));
}

TEST(Crop, ClampsToFrame) {
  FovEllipse e{10, 20, 50, 50, 0, 1};
  const auto rect = ellipse_bounds(e, 100, 100);
  EXPECT_EQ(rect.top, 0);
  EXPECT_EQ(rect.left, 0);
  EXPECT_EQ(rect.bottom(), 60);
  EXPECT_EQ(rect.right(), 70);
  const auto out = crop_to_fov(Image8(100, 100, 3), e);
  EXPECT_EQ(out.pixels.rows(), 60);
}

TEST(Grayscale, KnownColours) {
  auto solid = [](std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    Image8 img(2, 2, 3);
    for (int i = 0; i < 4; ++i) {
      img.at(i / 2, i % 2, 0) = r, img.at(i / 2, i % 2, 1) = g, img.at(i / 2, i % 2, 2) = b;
    }
    return to_grayscale(img);
  };
  EXPECT_EQ(solid(255, 255, 255).at(0, 0), 255);
  EXPECT_NEAR(solid(255, 0, 0).at(1, 1), 76, 1);
  EXPECT_EQ(solid(0, 0, 0).at(0, 1), 0);
  EXPECT_EQ(solid(0, 0, 0).channels(), 1);
  EXPECT_THROW(to_grayscale(Image8(2, 2, 1)), ValueError);
}

TEST(Resize, IdentityAtTargetSize) {
  std::mt19937_64 rng(1);
  Image8 img(256, 256, 3);
  for (auto& v : img.data()) v = static_cast<std::uint8_t>(rng());
  EXPECT_EQ(resize(img, 256), img);
}

TEST(Resize, ConstantStaysConstant) {
  const auto out = resize(Image8(300, 300, 1, 77), 256);
  EXPECT_EQ(out.rows(), 256);
  for (auto v : out.data()) ASSERT_EQ(v, 77);
}

TEST(Resize, MaskStaysBinary) {
  std::mt19937_64 rng(5);
  const auto m = lumenseg::testing::random_mask(300, 280, rng);
  const auto out = resize_mask(m, 256);
  EXPECT_EQ(out.rows(), 256);
  EXPECT_EQ(out.cols(), 256);
  EXPECT_TRUE(is_binary(out));
}

TEST(Preprocess, MaskReceivesSameCropAndStaysBinary) {
  auto img = disk_frame(200, 240, 100, 120, 80);
  Mask mask(200, 240, 1);
  for (int r = 90; r < 110; ++r) {
    for (int c = 100; c < 140; ++c) mask.at(r, c) = 1;
  }
  PreprocConfig cfg;
  cfg.target_size = 64;
  const auto out = preprocess(raw(img), cfg, &mask);
  ASSERT_TRUE(out.mask.has_value());
  EXPECT_EQ(out.image.rows(), 64);
  EXPECT_EQ(out.image.channels(), 1);
  EXPECT_TRUE(is_binary(*out.mask));
  EXPECT_GT(count_on(*out.mask), 0);
  EXPECT_TRUE(out.ellipse.has_value());
}

TEST(Preprocess, GrayInputIsIdempotent) {
  auto img = disk_frame(160, 200, 80, 100, 70);
  std::mt19937_64 rng(9);
  for (int r = 0; r < img.rows(); ++r) {
    for (int c = 0; c < img.cols(); ++c) {
      const auto v = static_cast<std::uint8_t>(img.at(r, c) ? 100 + rng() % 100 : 0);
      for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = v;
    }
  }
  PreprocConfig gray, rgb;
  gray.target_size = rgb.target_size = 96;
  rgb.color_mode = ColorMode::rgb;
  const auto g = preprocess(raw(img), gray);
  const auto c = preprocess(raw(img), rgb);
  ASSERT_EQ(g.crop, c.crop);
  for (int r = 0; r < 96; ++r) {
    for (int x = 0; x < 96; ++x) ASSERT_NEAR(g.image.at(r, x), c.image.at(r, x, 0), 1);
  }
}

TEST(Preprocess, Deterministic) {
  const auto img = disk_frame(128, 128, 64, 64, 50);
  PreprocConfig cfg;
  cfg.target_size = 64;
  const auto a = preprocess(raw(img), cfg);
  const auto b = preprocess(raw(img), cfg);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.crop, b.crop);
}

TEST(Preprocess, RejectsInvalidInput) {
  EXPECT_THROW(preprocess(raw(Image8(32, 100, 3)), PreprocConfig{}), ValueError);
  EXPECT_THROW(preprocess(RawFrame{Image8(100, 100, 1), "g", 0}, PreprocConfig{}), ValueError);
  PreprocConfig bad;
  bad.canny_low = 200;
  EXPECT_THROW(bad.validate(), ConfigError);
  Mask wrong(10, 10, 1);
  EXPECT_THROW(preprocess(raw(Image8(100, 100, 3)), PreprocConfig{}, &wrong), ShapeError);
}
