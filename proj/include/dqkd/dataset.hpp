#pragma once

#include "dqkd/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dqkd {

struct ImageItem {
  Tensor image;  // (1, H, W), floats in [0, 1]
  Tensor mask;   // (H, W), strictly {0, 1}; all-zero for normal test images
  std::string id;
  bool anomalous = false;
};

struct ClassData {
  std::string name;
  std::vector<ImageItem> train;  // normal only
  std::vector<ImageItem> test;
};

struct DatasetSpec {
  std::vector<ClassData> classes;
  int image_size = 32;
  std::uint64_t seed = 0;

  int n_classes() const { return static_cast<int>(classes.size()); }
};

struct SynthOptions {
  double texture_contrast = 0.25;
  double noise_sigma = 0.02;
  double anomaly_min = 0.35;  // intensity shift magnitude range
  double anomaly_max = 0.50;
  int test_good = -1;    // default: max(2, imgs_per_class / 4)
  int test_defect = -1;  // default: max(4, imgs_per_class / 2)
};

// Procedural texture families (oriented sinusoids, checkers, directional
// blobs) with class-specific orientation; anomalies are contrast patches and
// scratch strokes with exact masks covering at most 25% of the image.
DatasetSpec generate_synthetic_dataset(int n_classes, int imgs_per_class, int image_size,
                                       std::uint64_t seed, const SynthOptions& opts = {});

// MVTec-convention tree:
//   <root>/<class>/train/good/*.pgm
//   <root>/<class>/test/<defect>/*.pgm
//   <root>/<class>/ground_truth/<defect>/*_mask.pgm
void save_dataset_dir(const DatasetSpec& ds, const std::string& root);
DatasetSpec load_dataset_dir(const std::string& root);

// Restrict to a single class.
DatasetSpec one_class_view(const DatasetSpec& ds, int class_index);

// All train images with their class indices, in deterministic order.
std::vector<std::pair<const ImageItem*, int>> all_train_images(const DatasetSpec& ds);

// 8-bit binary PGM (P5). Accepts (H, W) or (1, H, W) in [0, 1].
void write_pgm(const std::string& path, const Tensor& gray);
Tensor read_pgm(const std::string& path);  // returns (1, H, W)

}  // namespace dqkd
