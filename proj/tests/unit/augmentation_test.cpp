#include <gtest/gtest.h>

#include <lumenseg/augmentation.hpp>
#include <lumenseg/metrics.hpp>

#include <random>

#include "test_support.hpp"

using namespace lumenseg;

namespace {

Image8 random_image(int rows, int cols, int channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Image8 img(rows, cols, channels);
  for (auto& v : img.data()) v = static_cast<std::uint8_t>(rng());
  return img;
}

std::vector<Sample> samples(int n, int size = 16) {
  std::vector<Sample> out;
  std::mt19937_64 rng(11);
  for (int i = 0; i < n; ++i) {
    Sample s;
    s.id = "s" + std::to_string(i);
    s.image = random_image(size, size, 1, 100 + i);
    s.mask = lumenseg::testing::random_mask(size, size, rng);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST(Augment, HalfTurnTwiceIsIdentity) {
  const auto img = random_image(20, 20, 3, 1);
  std::mt19937_64 rng(2);
  const auto mask = lumenseg::testing::random_mask(20, 20, rng);
  GeometricTransform half{2, false, false, 1.0};
  const auto once = augment_pair(img, mask, half);
  const auto twice = augment_pair(once.image, once.mask, half);
  EXPECT_EQ(twice.image, img);
  EXPECT_EQ(twice.mask, mask);
  EXPECT_NE(once.image, img);
}

TEST(Augment, HalfTurnOnNonSquareImage) {
  const auto img = random_image(12, 20, 1, 4);
  const Mask mask(12, 20, 1);
  const auto out = augment_pair(img, mask, GeometricTransform{2, false, false, 1.0});
  EXPECT_EQ(out.image.at(0, 0), img.at(11, 19));
  EXPECT_THROW(augment_pair(img, mask, GeometricTransform{1, false, false, 1.0}), ShapeError);
}

TEST(Augment, HorizontalFlipReflectsColumn) {
  Mask mask(256, 256, 1);
  mask.at(10, 3) = 1;
  const auto out = augment_pair(Image8(256, 256, 1), mask, GeometricTransform{0, true, false, 1.0});
  EXPECT_EQ(out.mask.at(10, 252), 1);
  int on = 0;
  for (auto v : out.mask.data()) on += v;
  EXPECT_EQ(on, 1);
}

TEST(Augment, QuarterTurnIsCounterClockwise) {
  Mask mask(8, 8, 1);
  mask.at(0, 7) = 1;  // top-right
  const auto out = augment_pair(Image8(8, 8, 1), mask, GeometricTransform{1, false, false, 1.0});
  EXPECT_EQ(out.mask.at(0, 0), 1);  // moves to top-left
}

TEST(Augment, FourQuarterTurnsCloseTheGroup) {
  const auto img = random_image(24, 24, 3, 7);
  std::mt19937_64 rng(8);
  const auto mask = lumenseg::testing::random_mask(24, 24, rng);
  AugmentedPair p{img, mask};
  for (int i = 0; i < 4; ++i) p = augment_pair(p.image, p.mask, GeometricTransform{1, false, false, 1.0});
  EXPECT_EQ(p.image, img);
  EXPECT_EQ(p.mask, mask);
}

TEST(Augment, NeutralZoomIsIdentity) {
  const auto img = random_image(30, 30, 3, 9);
  std::mt19937_64 rng(10);
  const auto mask = lumenseg::testing::random_mask(30, 30, rng);
  const auto out = augment_pair(img, mask, GeometricTransform{0, false, false, 1.0});
  EXPECT_EQ(out.image, img);
  EXPECT_EQ(out.mask, mask);
}

TEST(Augment, ZoomKeepsShapeAndBinarity) {
  const auto img = random_image(64, 64, 3, 12);
  std::mt19937_64 rng(13);
  const auto mask = lumenseg::testing::random_mask(64, 64, rng);
  for (double z : {0.98, 1.02, 0.8, 1.25}) {
    const auto out = augment_pair(img, mask, GeometricTransform{0, false, false, z});
    EXPECT_TRUE(out.image.same_shape(img));
    EXPECT_TRUE(out.mask.same_shape(mask));
    EXPECT_TRUE(is_binary(out.mask));
  }
}

TEST(Augment, ZoomInMagnifiesAboutTheCentre) {
  Mask mask(41, 41, 1);
  for (int r = 15; r <= 25; ++r) {
    for (int c = 15; c <= 25; ++c) mask.at(r, c) = 1;
  }
  const auto in = augment_pair(Image8(41, 41, 1), mask, GeometricTransform{0, false, false, 1.5});
  const auto out = augment_pair(Image8(41, 41, 1), mask, GeometricTransform{0, false, false, 0.75});
  auto area = [](const Mask& m) {
    int n = 0;
    for (auto v : m.data()) n += v;
    return n;
  };
  EXPECT_GT(area(in.mask), area(mask));
  EXPECT_LT(area(out.mask), area(mask));
  EXPECT_EQ(in.mask.at(20, 20), 1);
}

TEST(Augment, RejectsMismatchedOrNonBinaryInput) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(augment_pair(Image8(10, 10, 1), Mask(10, 12, 1), AugmentationSpec{}, rng), ShapeError);
  Mask bad(10, 10, 1);
  bad.at(0, 0) = 255;
  EXPECT_THROW(augment_pair(Image8(10, 10, 1), bad, AugmentationSpec{}, rng), ValueError);
}

TEST(Augment, ConfusionInvariantUnderSharedTransform) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const auto pred = lumenseg::testing::random_mask(16, 16, rng);
    const auto gt = lumenseg::testing::random_mask(16, 16, rng);
    GeometricTransform t{static_cast<int>(rng() % 4), (rng() & 1) != 0, (rng() & 1) != 0, 1.0};
    const auto a = augment_pair(Image8(16, 16, 1), pred, t);
    const auto b = augment_pair(Image8(16, 16, 1), gt, t);
    EXPECT_EQ(confusion(a.mask, b.mask), confusion(pred, gt)) << t.describe();
    EXPECT_EQ(dsc(confusion(a.mask, a.mask)), 1.0);
  }
}

TEST(ExpandDataset, DisabledSpecReturnsInput) {
  const auto in = samples(5);
  const auto out = expand_dataset(in, AugmentationSpec::none());
  ASSERT_EQ(out.size(), in.size());
  for (std::size_t i = 0; i < in.size(); ++i) EXPECT_EQ(out[i].image, in[i].image);
}

TEST(ExpandDataset, OfflineRotationsGiveFourTimes) {
  AugmentationSpec spec = AugmentationSpec::none();
  spec.rotations = {90, 180, 270};
  const auto out = expand_dataset(samples(10), spec, AugmentationMode::offline);
  EXPECT_EQ(out.size(), 40u);
}

TEST(ExpandDataset, OfflineFullSpecCount) {
  // 3 rotations + 2 flips + 2 zoom extremes, plus originals.
  const auto out = expand_dataset(samples(4), AugmentationSpec{}, AugmentationMode::offline);
  EXPECT_EQ(out.size(), 4u * 8u);
}

TEST(ExpandDataset, OnlineIsSeededAndKeepsOriginals) {
  const auto in = samples(6);
  AugmentationSpec spec;
  spec.seed = 42;
  const auto a = expand_dataset(in, spec, AugmentationMode::online, 3);
  const auto b = expand_dataset(in, spec, AugmentationMode::online, 3);
  ASSERT_EQ(a.size(), 12u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].mask, b[i].mask);
    EXPECT_EQ(a[i].augmentation, b[i].augmentation);
  }
  for (std::size_t i = 0; i < in.size(); ++i) EXPECT_EQ(a[i].image, in[i].image);
  // A later epoch redraws.
  const auto c = expand_dataset(in, spec, AugmentationMode::online, 4);
  bool differs = false;
  for (std::size_t i = in.size(); i < c.size(); ++i) differs |= c[i].augmentation != a[i].augmentation;
  EXPECT_TRUE(differs);
}

TEST(ExpandDataset, DrawsStayInsideTheSpec) {
  AugmentationSpec spec;
  spec.rotations = {180};
  spec.vertical_flip = false;
  spec.zoom_range = 0.02;
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    const auto t = draw_transform(spec, rng);
    EXPECT_TRUE(t.quarter_turns == 0 || t.quarter_turns == 2);
    EXPECT_FALSE(t.vflip);
    EXPECT_GE(t.zoom, 0.98);
    EXPECT_LE(t.zoom, 1.02);
  }
}

TEST(AugmentationSpec, Validation) {
  AugmentationSpec bad;
  bad.rotations = {45};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad.rotations = {};
  bad.zoom_range = -0.1;
  EXPECT_THROW(bad.validate(), ConfigError);
}
