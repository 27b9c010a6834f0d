#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lomt/rng.hpp"
#include "lomt/tensor.hpp"

namespace lomt {

// ------------------------------------------------------------------ scenes

struct SceneConfig {
  int image_size = 32;
  int channels = 1;
  int blob_count_min = 1;
  int blob_count_max = 2;
  bool discs = true;
  bool rects = true;
  double noise_amplitude = 0.05;
  int class_threshold = 2;  // label = 1 iff blob count >= this

  void validate() const;
};

struct Blob {
  enum class Kind { disc, rectangle };
  Kind kind = Kind::disc;
  double cx = 0.0, cy = 0.0;
  double r = 0.0;             // disc radius
  double hx = 0.0, hy = 0.0;  // rectangle half extents
};

/// Unsigned distance from a pixel center to the blob's boundary curve.
double blob_boundary_distance(const Blob& blob, double x, double y);
bool blob_contains(const Blob& blob, double x, double y);

/// Blobs render as constant-intensity outlines along their boundary; the
/// interior stays empty. Summed over blobs, scaled by the per-image gain,
/// and clipped to [0,1]. Noise-free.
Tensor render_scene(const std::vector<Blob>& blobs, int size);

/// Binarized central-difference gradient magnitude of the noise-free scene,
/// threshold 0.1.
Tensor edge_target(const Tensor& scene);

/// Per-pixel blob-kind label over the *filled* region: 0 background, 1 disc,
/// 2 rectangle; overlaps go to the later-drawn blob.
Tensor seg_target(const std::vector<Blob>& blobs, int size);

/// 1 - distance-to-nearest-blob-center / image diagonal; all zeros when the
/// scene has no blobs.
Tensor dist_target(const std::vector<Blob>& blobs, int size);

std::vector<Blob> sample_blobs(const SceneConfig& config, Rng& rng);

// ----------------------------------------------------------------- samples

struct Sample {
  Tensor image;  // [1,H,W]
  Tensor edge;   // [1,H,W], values 0/1
  Tensor seg;    // [H,W], class indices
  Tensor dist;   // [1,H,W], values in [0,1]
  int label = 0;
};

constexpr int kSegClasses = 3;

struct Dataset {
  SceneConfig config;
  std::vector<Sample> samples;
  std::vector<int> train_idx, val_idx, test_idx;
  bool empty_warning = false;
};

/// Deterministic 80/10/10 split by sample index hash.
std::string split_of_index(int index);

Sample generate_sample(const SceneConfig& config, uint64_t seed, int index);

/// Pure function of (config, seed, n).
Dataset generate_dataset(const SceneConfig& config, uint64_t seed, int n);

/// Target tensor for a task target key: edge | segmentation | distance | label.
Tensor target_tensor(const Sample& sample, const std::string& key);

// ---------------------------------------------------------------- manifest

/// Writes manifest.json plus 8-bit PNGs (image, edge, segmentation) and a
/// 16-bit PNG distance field per sample.
void export_dataset(const Dataset& dataset, const std::string& dir);

Dataset load_manifest(const std::string& manifest_path);

}  // namespace lomt
