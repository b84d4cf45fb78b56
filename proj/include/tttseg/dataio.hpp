#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tttseg/metrics.hpp"
#include "tttseg/tensor.hpp"

namespace tttseg {

// Seeded synthetic segmentation task: grayscale images of axis-aligned
// ellipses and rectangles over a noisy background. Each shape class adds a
// class-specific intensity, so both texture and geometry carry label signal.
struct SyntheticSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t num_classes = 3;  // background + (num_classes - 1) shape classes
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 3;
  double noise_std = 0.05;
  std::uint64_t seed = 0;
  std::size_t count = 8;

  void validate() const;
};

struct SegmentationSample {
  Tensor image;   // [1 x H x W]
  Tensor labels;  // [H x W], integer class indices
  std::string id;
};

struct Dataset {
  SyntheticSpec spec;
  std::vector<SegmentationSample> samples;
};

// Pure function of its SyntheticSpec: identical seeds give identical datasets.
Dataset generate(const SyntheticSpec& spec);

// Dataset directory: manifest.json plus one TSR1 file per image (f64) and
// label mask (u8). save/load round-trips are byte-identical.
void save_dataset(const Dataset& d, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// Deterministic 80/20 split by hash of the sample id.
bool is_validation_sample(const std::string& id);

// Predicted masks alongside a small manifest.
void save_predictions(const std::vector<std::pair<std::string, LabelMask>>& preds, const std::string& dir,
                      bool with_pgm);
std::vector<std::pair<std::string, LabelMask>> load_predictions(const std::string& dir);

// Binary PGM (P5), maxval 255, class c -> floor(255 c / (num_classes - 1)).
std::vector<std::uint8_t> encode_pgm(const LabelMask& mask);
void export_mask_pgm(const LabelMask& mask, const std::string& path);

}  // namespace tttseg
