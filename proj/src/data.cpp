#include "lomt/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <stdexcept>

#include "lomt/png_io.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace lomt {

namespace {

// Blobs draw as constant-intensity outlines two pixels thick. Discs are L1
// balls and all blob dimensions snap to the half-integer grid, so boundary
// distances land on {0.5, 1.5, ...} and the outline rasterizes at exactly
// two pixels of width everywhere. The binarized gradient band of such an
// outline is then exactly its support plus a one-pixel ring, which keeps the
// edge task solvable by a single conv layer while the hollow interiors leave
// segmentation as a fill-in task.
constexpr double kOutlineHalfWidth = 1.0;
constexpr double kOutlineValue = 0.55;
constexpr double kEdgeThreshold = 0.1;
// The background is noise plus a per-image brightness floor scaled off the
// configured noise amplitude (9x, i.e. up to 0.45 at the default 0.05).
// The floor is invisible to gradients but dominates globally pooled
// intensities, which keeps the blob count from being readable off the image
// mean. kOutlineValue + the max floor stays at 1.0 so outlines never clip.
constexpr double kDcPerNoise = 9.0;
constexpr double kDcCap = 0.45;

constexpr uint64_t kSceneStream = 0x7363656e;
constexpr uint64_t kSplitSalt = 0x73706c69;

double ridge(double boundary_dist) {
  return boundary_dist < kOutlineHalfWidth ? kOutlineValue : 0.0;
}

}  // namespace

void SceneConfig::validate() const {
  if (image_size < 8) throw std::invalid_argument("scene: image size must be >= 8");
  if (channels != 1) throw std::invalid_argument("scene: only single-channel images are generated");
  if (blob_count_min < 0 || blob_count_max < blob_count_min)
    throw std::invalid_argument("scene: blob count range is empty");
  if (!discs && !rects) throw std::invalid_argument("scene: no blob kinds enabled");
  if (noise_amplitude < 0.0) throw std::invalid_argument("scene: negative noise amplitude");
  if (class_threshold < 0) throw std::invalid_argument("scene: bad class threshold");
}

double blob_boundary_distance(const Blob& blob, double x, double y) {
  const double dx = x - blob.cx;
  const double dy = y - blob.cy;
  // discs are L1 balls; rectangles are rotated 45 degrees. Every boundary
  // then runs along grid diagonals, and with half-integer extents the
  // distance lands on {0.5, 1.5, ...}, so outlines rasterize at a constant
  // two-pixel width. Distances are in diagonal grid units.
  if (blob.kind == Blob::Kind::disc) return std::abs(std::abs(dx) + std::abs(dy) - blob.r);
  const double u = dx + dy;
  const double v = dx - dy;
  return std::abs(std::max(std::abs(u) - blob.hx, std::abs(v) - blob.hy));
}

bool blob_contains(const Blob& blob, double x, double y) {
  const double dx = x - blob.cx;
  const double dy = y - blob.cy;
  if (blob.kind == Blob::Kind::disc) return std::abs(dx) + std::abs(dy) <= blob.r;
  return std::abs(dx + dy) <= blob.hx && std::abs(dx - dy) <= blob.hy;
}

Tensor render_scene(const std::vector<Blob>& blobs, int size) {
  Tensor scene({1, size, size});
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double v = 0.0;
      for (const Blob& b : blobs) v += ridge(blob_boundary_distance(b, x, y));
      scene[(size_t)y * size + x] = std::min(v, 1.0);
    }
  return scene;
}

Tensor edge_target(const Tensor& scene) {
  const int H = scene.dim(1), W = scene.dim(2);
  Tensor edge({1, H, W});
  auto at = [&](int y, int x) {
    y = std::clamp(y, 0, H - 1);
    x = std::clamp(x, 0, W - 1);
    return scene[(size_t)y * W + x];
  };
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double gx = (at(y, x + 1) - at(y, x - 1)) / 2.0;
      const double gy = (at(y + 1, x) - at(y - 1, x)) / 2.0;
      edge[(size_t)y * W + x] = std::sqrt(gx * gx + gy * gy) > kEdgeThreshold ? 1.0 : 0.0;
    }
  return edge;
}

Tensor seg_target(const std::vector<Blob>& blobs, int size) {
  Tensor seg({size, size});
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double cls = 0.0;
      for (const Blob& b : blobs)  // later-drawn blob wins
        if (blob_contains(b, x, y)) cls = b.kind == Blob::Kind::disc ? 1.0 : 2.0;
      seg[(size_t)y * size + x] = cls;
    }
  return seg;
}

Tensor dist_target(const std::vector<Blob>& blobs, int size) {
  Tensor dist({1, size, size});
  if (blobs.empty()) return dist;  // all zeros by convention
  const double diag = std::sqrt(2.0) * (size - 1);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double dmin = 1e300;
      for (const Blob& b : blobs) {
        const double dx = x - b.cx, dy = y - b.cy;
        dmin = std::min(dmin, std::sqrt(dx * dx + dy * dy));
      }
      dist[(size_t)y * size + x] = std::clamp(1.0 - dmin / diag, 0.0, 1.0);
    }
  return dist;
}

namespace {

// nearest x.5 within [lo, hi]
double snap_half(double v) { return std::floor(v) + 0.5; }

}  // namespace

std::vector<Blob> sample_blobs(const SceneConfig& config, Rng& rng) {
  const int count = config.blob_count_min + rng.below(config.blob_count_max -
                                                      config.blob_count_min + 1);
  const double s = config.image_size;
  std::vector<Blob> blobs;
  for (int i = 0; i < count; ++i) {
    Blob b;
    if (config.discs && config.rects)
      b.kind = rng.below(2) == 0 ? Blob::Kind::disc : Blob::Kind::rectangle;
    else
      b.kind = config.discs ? Blob::Kind::disc : Blob::Kind::rectangle;
    // integer centers and half-integer extents keep boundary distances on
    // the half-integer grid
    b.r = snap_half(rng.uniform(std::max(1.5, 0.12 * s), std::max(2.5, 0.20 * s)));
    // rectangles keep aspect >= 2 so a near-square never mimics a disc
    const double p = snap_half(rng.uniform(1.5, std::max(2.0, 0.09 * s)));
    const double q = snap_half(rng.uniform(std::max(3.0, 2.2 * p), std::max(4.0, 0.28 * s)));
    if (rng.below(2) == 0) {
      b.hx = p;
      b.hy = q;
    } else {
      b.hx = q;
      b.hy = p;
    }
    // keep the outline and its gradient ring away from the borders so no
    // border-clamp signature leaks blob mass past the brightness floor
    const double reach = (b.kind == Blob::Kind::disc ? b.r : 0.5 * (b.hx + b.hy)) +
                         kOutlineHalfWidth + 2.0;
    const double lo = std::min(reach, 0.5 * (s - 1));
    // a few placement attempts reduce outline crossings; overlaps stay
    // possible and later-drawn blobs still win them
    for (int attempt = 0; attempt < 8; ++attempt) {
      b.cx = std::round(rng.uniform(lo, s - 1 - lo));
      b.cy = std::round(rng.uniform(lo, s - 1 - lo));
      bool clear = true;
      for (const Blob& other : blobs) {
        const double oreach = (other.kind == Blob::Kind::disc ? other.r
                                                              : 0.5 * (other.hx + other.hy)) +
                              kOutlineHalfWidth + 2.0;
        if (std::abs(b.cx - other.cx) + std::abs(b.cy - other.cy) < reach + oreach)
          clear = false;
      }
      if (clear) break;
    }
    blobs.push_back(b);
  }
  return blobs;
}

std::string split_of_index(int index) {
  const uint64_t h = mix_seed(kSplitSalt, (uint64_t)index) % 10;
  if (h < 8) return "train";
  return h == 8 ? "val" : "test";
}

Sample generate_sample(const SceneConfig& config, uint64_t seed, int index) {
  Rng rng(mix_seed(mix_seed(seed, kSceneStream), (uint64_t)index));
  const std::vector<Blob> blobs = sample_blobs(config, rng);
  const double dc = rng.uniform(0.0, std::min(kDcCap, kDcPerNoise * config.noise_amplitude));
  const int size = config.image_size;

  Sample sample;
  const Tensor scene = render_scene(blobs, size);
  sample.image = Tensor({1, size, size});
  for (int i = 0; i < size * size; ++i) {
    const double noise = rng.uniform(0.0, config.noise_amplitude);
    sample.image[(size_t)i] = std::clamp(scene[(size_t)i] + dc + noise, 0.0, 1.0);
  }
  sample.edge = edge_target(scene);
  sample.seg = seg_target(blobs, size);
  sample.dist = dist_target(blobs, size);
  sample.label = (int)blobs.size() >= config.class_threshold ? 1 : 0;
  return sample;
}

Dataset generate_dataset(const SceneConfig& config, uint64_t seed, int n) {
  config.validate();
  if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
  Dataset ds;
  ds.config = config;
  ds.samples.reserve((size_t)n);
  for (int i = 0; i < n; ++i) {
    ds.samples.push_back(generate_sample(config, seed, i));
    const std::string split = split_of_index(i);
    if (split == "train")
      ds.train_idx.push_back(i);
    else if (split == "val")
      ds.val_idx.push_back(i);
    else
      ds.test_idx.push_back(i);
  }
  return ds;
}

Tensor target_tensor(const Sample& sample, const std::string& key) {
  if (key == "edge") return sample.edge;
  if (key == "segmentation") return sample.seg;
  if (key == "distance") return sample.dist;
  if (key == "label") return Tensor::scalar((double)sample.label);
  throw std::invalid_argument("unknown task target key: " + key);
}

// ------------------------------------------------------------------ export

namespace {

std::vector<uint8_t> to_gray8(const Tensor& t, double scale) {
  std::vector<uint8_t> px((size_t)t.numel());
  for (int i = 0; i < t.numel(); ++i)
    px[(size_t)i] = (uint8_t)std::lround(std::clamp(t[(size_t)i] * scale, 0.0, 255.0));
  return px;
}

std::string sample_stem(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%05d", index);
  return buf;
}

}  // namespace

void export_dataset(const Dataset& dataset, const std::string& dir) {
  fs::create_directories(dir);
  ordered_json manifest;
  manifest["version"] = 1;
  manifest["tasks"] = ordered_json::array({
      {{"name", "edge"}, {"kind", "dense8"}, {"target_suffix", "_edge.png"}},
      {{"name", "segmentation"},
       {"kind", "seg8"},
       {"target_suffix", "_seg.png"},
       {"classes", kSegClasses}},
      {{"name", "distance"}, {"kind", "dense16"}, {"target_suffix", "_dist.png"}},
      {{"name", "classification"}, {"kind", "label"}},
  });
  manifest["generator"] = {
      {"image_size", dataset.config.image_size},
      {"channels", dataset.config.channels},
      {"blob_count_min", dataset.config.blob_count_min},
      {"blob_count_max", dataset.config.blob_count_max},
      {"discs", dataset.config.discs},
      {"rects", dataset.config.rects},
      {"noise_amplitude", dataset.config.noise_amplitude},
      {"class_threshold", dataset.config.class_threshold},
  };
  manifest["samples"] = ordered_json::array();

  const int size = dataset.config.image_size;
  for (size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& s = dataset.samples[i];
    const std::string stem = sample_stem((int)i);
    write_png_gray8(dir + "/" + stem + ".png", size, size, to_gray8(s.image, 255.0));
    write_png_gray8(dir + "/" + stem + "_edge.png", size, size, to_gray8(s.edge, 255.0));
    write_png_gray8(dir + "/" + stem + "_seg.png", size, size,
                    to_gray8(s.seg, 255.0 / (kSegClasses - 1)));
    std::vector<uint16_t> dist16((size_t)s.dist.numel());
    for (int k = 0; k < s.dist.numel(); ++k)
      dist16[(size_t)k] = (uint16_t)std::lround(std::clamp(s.dist[(size_t)k], 0.0, 1.0) * 65535.0);
    write_png_gray16(dir + "/" + stem + "_dist.png", size, size, dist16);

    ordered_json entry;
    entry["image"] = stem + ".png";
    entry["targets"] = {{"edge", stem + "_edge.png"},
                        {"segmentation", stem + "_seg.png"},
                        {"distance", stem + "_dist.png"}};
    entry["label"] = s.label;
    entry["split"] = split_of_index((int)i);
    manifest["samples"].push_back(entry);
  }

  std::ofstream out(dir + "/manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + dir);
  out << manifest.dump(2) << "\n";
}

Dataset load_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("missing file: " + manifest_path);
  ordered_json manifest;
  try {
    in >> manifest;
  } catch (const std::exception& e) {
    throw std::runtime_error("manifest parse error in " + manifest_path + ": " + e.what());
  }
  if (!manifest.contains("version") || manifest["version"] != 1)
    throw std::runtime_error("unsupported manifest version in " + manifest_path);

  const fs::path root = fs::path(manifest_path).parent_path();

  struct TaskDecl {
    std::string kind;
    int classes = 0;
  };
  std::map<std::string, TaskDecl> tasks;
  for (const auto& t : manifest.at("tasks")) {
    TaskDecl decl;
    decl.kind = t.at("kind").get<std::string>();
    if (decl.kind != "dense8" && decl.kind != "seg8" && decl.kind != "dense16" &&
        decl.kind != "label")
      throw std::runtime_error("unknown task kind in manifest: " + decl.kind);
    if (t.contains("classes")) decl.classes = t["classes"].get<int>();
    tasks[t.at("name").get<std::string>()] = decl;
  }

  Dataset ds;
  if (manifest.contains("generator")) {
    const auto& g = manifest["generator"];
    ds.config.image_size = g.value("image_size", 32);
    ds.config.channels = g.value("channels", 1);
    ds.config.blob_count_min = g.value("blob_count_min", 1);
    ds.config.blob_count_max = g.value("blob_count_max", 2);
    ds.config.discs = g.value("discs", true);
    ds.config.rects = g.value("rects", true);
    ds.config.noise_amplitude = g.value("noise_amplitude", 0.05);
    ds.config.class_threshold = g.value("class_threshold", 2);
  }

  auto load_gray = [&](const std::string& rel) {
    const fs::path p = root / rel;
    if (!fs::exists(p)) throw std::runtime_error("missing file: " + p.string());
    return read_png_gray(p.string());
  };

  int index = 0;
  for (const auto& entry : manifest.at("samples")) {
    Sample s;
    GrayImage img = load_gray(entry.at("image").get<std::string>());
    const int H = img.height, W = img.width;
    const double img_scale = img.bit_depth == 16 ? 65535.0 : 255.0;
    s.image = Tensor({1, H, W});
    for (int i = 0; i < H * W; ++i) s.image[(size_t)i] = img.px[(size_t)i] / img_scale;

    for (const auto& [task, path] : entry.at("targets").items()) {
      auto it = tasks.find(task);
      if (it == tasks.end()) throw std::runtime_error("unknown task key in manifest: " + task);
      GrayImage t = load_gray(path.get<std::string>());
      if (t.width != W || t.height != H)
        throw std::runtime_error("dimension mismatch between image and target " + task +
                                 " for sample " + std::to_string(index));
      const double scale = t.bit_depth == 16 ? 65535.0 : 255.0;
      if (it->second.kind == "seg8") {
        s.seg = Tensor({H, W});
        for (int i = 0; i < H * W; ++i)
          s.seg[(size_t)i] =
              std::round(t.px[(size_t)i] / scale * (double)(it->second.classes - 1));
      } else {
        Tensor dense({1, H, W});
        for (int i = 0; i < H * W; ++i) dense[(size_t)i] = t.px[(size_t)i] / scale;
        if (task == "edge")
          s.edge = std::move(dense);
        else if (task == "distance")
          s.dist = std::move(dense);
        else
          throw std::runtime_error("unknown dense task key in manifest: " + task);
      }
    }
    s.label = entry.value("label", 0);

    const std::string split = entry.at("split").get<std::string>();
    if (split == "train")
      ds.train_idx.push_back(index);
    else if (split == "val")
      ds.val_idx.push_back(index);
    else if (split == "test")
      ds.test_idx.push_back(index);
    else
      throw std::runtime_error("unknown split in manifest: " + split);
    ds.samples.push_back(std::move(s));
    ++index;
  }
  ds.empty_warning = ds.samples.empty();
  return ds;
}

}  // namespace lomt
