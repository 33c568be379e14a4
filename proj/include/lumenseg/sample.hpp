#pragma once

#include <string>

#include "image.hpp"

namespace lumenseg {

// One annotated frame with its provenance.
struct Sample {
  std::string id;
  Image8 image;  // 1 (grayscale) or 3 (RGB) channels
  Mask mask;     // 0/1
  std::string video_id;
  int patient_id = 0;
  int frame_index = 0;
  std::string augmentation;  // empty for original frames
};

}  // namespace lumenseg
