#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "bbg/params.hpp"

namespace bbg {

enum class Split { kTrain, kTrainVal, kVal };

// Images are [N x C x H x W] with values in [-1, 1].
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  int num_classes = 0;
  Split split = Split::kTrain;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t resolution() const { return images.dim(2); }

  // Copies of the selected rows.
  Dataset subset(const std::vector<std::size_t>& rows) const;
  Tensor batch(const std::vector<std::size_t>& rows) const;
  Tensor image(std::size_t row) const;  // [C x H x W]
};

// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
// Pixels map affinely from [0, 255] to [-1, 1].
Dataset load_idx_dataset(const std::string& images_path,
                         const std::string& labels_path);
// Writes the dataset back as IDX (pixels rounded to the nearest byte).
// Single-channel only.
void write_idx_dataset(const Dataset& data, const std::string& images_path,
                       const std::string& labels_path);

enum class SynthKind { kGaussianBlobs, kShapes };

// kShapes: class 0 square, 1 circle, 2 triangle, rendered with random size,
// position, and intensity over light noise. kGaussianBlobs: one Gaussian bump
// per image whose position on a ring is set by the class (num_classes
// positions). Class-balanced and deterministic per seed. noise_scale
// multiplies the per-pixel Gaussian noise.
Dataset synth_dataset(SynthKind kind, std::size_t n, std::uint64_t seed,
                      std::size_t resolution = 32, int num_classes = 0,
                      double noise_scale = 1.0);

struct HoldoutSplit {
  Dataset train;      // probe-train portion
  Dataset train_val;  // fixed-seed random holdout, disjoint from train
  std::vector<std::size_t> train_rows;
  std::vector<std::size_t> val_rows;
};

HoldoutSplit split_holdout(const Dataset& data, double fraction,
                           std::uint64_t seed);

enum class AugmentMode { kBase, kLight, kNone };

struct AugmentSpec {
  AugmentMode mode = AugmentMode::kNone;
  std::size_t crop = 16;  // output resolution
};

struct CropWindow {
  double y0, x0, h, w;  // in source pixels
};

// Draws the crop window for one image; falls back to the full center window
// after 10 rejected proposals.
CropWindow sample_crop(const AugmentSpec& spec, std::size_t src_h,
                       std::size_t src_w, Rng& rng, bool* fell_back = nullptr);

// image [C x H x W] -> [C x crop x crop]. kNone is a deterministic center
// crop and resize.
Tensor augment(const Tensor& image, const AugmentSpec& spec, Rng& rng);

// Bilinear resample of a window of a [C x H x W] image to out x out.
Tensor resample(const Tensor& image, const CropWindow& window, std::size_t out);

// Applies augment() to each row of a batch [B x C x H x W].
Tensor augment_batch(const Tensor& images, const AugmentSpec& spec, Rng& rng);

}  // namespace bbg
