#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "lomt/model.hpp"
#include "lomt/prox.hpp"

namespace lomt {

/// Every layer of a pattern is fully zero; lambda was far too large.
struct AllZeroPattern : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ----------------------------------------------------------------- types

struct LayerPattern {
  int layer_id = 0;
  std::vector<uint8_t> zero_channels;  // true = channel group exactly zero
};

struct SparsityPattern {
  std::vector<LayerPattern> layers;  // backbone topological order
  std::string task_name;
  double lambda = 0.0;
  uint64_t seed = 0;

  double zero_fraction(size_t layer_index) const;
};

struct TapSelection {
  std::map<std::string, int> taps;  // task -> selected layer_id
};

struct CompressionReport {
  long long total_parameters = 0;
  long long nonzero_parameters = 0;
  double compression_ratio = 0.0;
};

// ------------------------------------------------------------- operations

/// Channel flag true iff every group member is exactly zero.
SparsityPattern extract_pattern(const ModelGraph& model, const GroupIndex& index);

/// Deepest layer with at least one active (non-zero) channel. A fully zero
/// pattern is an error, never a silent fallback.
int last_active_layer(const SparsityPattern& pattern);

CompressionReport compression_ratio(long long total, long long nonzero);

struct PatternRender {
  std::string svg;
  std::string csv;
};

/// One row per task, one cell per layer shaded by its zero-channel fraction;
/// the selected tap layer is outlined. The CSV mirrors the fractions with six
/// decimal places.
PatternRender render_pattern(const std::vector<SparsityPattern>& patterns);

/// tap(task) = last_active_layer(pattern). Patterns only; no weights move
/// from phase 1 to phase 2.
TapSelection plan_lomt(const std::map<std::string, SparsityPattern>& patterns);

}  // namespace lomt
