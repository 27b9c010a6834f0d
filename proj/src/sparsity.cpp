#include "lomt/sparsity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace lomt {

double SparsityPattern::zero_fraction(size_t layer_index) const {
  const auto& flags = layers.at(layer_index).zero_channels;
  if (flags.empty()) return 0.0;
  int z = 0;
  for (uint8_t f : flags) z += f ? 1 : 0;
  return (double)z / (double)flags.size();
}

SparsityPattern extract_pattern(const ModelGraph& model, const GroupIndex& index) {
  index.check_fresh(model);
  SparsityPattern pattern;
  pattern.lambda = index.lambda;
  pattern.seed = model.init_seed;
  SparsityStats stats = sparsity_stats(model, index);
  std::map<int, LayerPattern> by_layer;
  for (size_t gi = 0; gi < index.groups.size(); ++gi) {
    const ParameterGroup& g = index.groups[gi];
    LayerPattern& lp = by_layer[g.layer_id];
    lp.layer_id = g.layer_id;
    if ((int)lp.zero_channels.size() <= g.channel) lp.zero_channels.resize((size_t)g.channel + 1);
    lp.zero_channels[(size_t)g.channel] = stats.per_group_zero_flags[gi];
  }
  for (auto& [layer, lp] : by_layer) pattern.layers.push_back(std::move(lp));
  return pattern;
}

int last_active_layer(const SparsityPattern& pattern) {
  if (pattern.layers.empty()) throw std::invalid_argument("last_active_layer: empty pattern");
  int last = -1;
  for (const auto& lp : pattern.layers) {
    const bool active = std::any_of(lp.zero_channels.begin(), lp.zero_channels.end(),
                                    [](uint8_t f) { return f == 0; });
    if (active) last = std::max(last, lp.layer_id);
  }
  if (last < 0)
    throw AllZeroPattern("last_active_layer: every layer is fully zero (task " +
                         pattern.task_name + ", lambda far too large)");
  return last;
}

CompressionReport compression_ratio(long long total, long long nonzero) {
  if (nonzero < 1) throw std::invalid_argument("compression_ratio: nonzero must be >= 1");
  if (nonzero > total) throw std::invalid_argument("compression_ratio: nonzero exceeds total");
  CompressionReport r;
  r.total_parameters = total;
  r.nonzero_parameters = nonzero;
  r.compression_ratio = (double)total / (double)nonzero;
  return r;
}

PatternRender render_pattern(const std::vector<SparsityPattern>& patterns) {
  if (patterns.empty()) throw std::invalid_argument("render_pattern: no patterns");
  const size_t L = patterns.front().layers.size();
  for (const auto& p : patterns) {
    if (p.layers.size() != L)
      throw std::invalid_argument("render_pattern: patterns cover different backbones");
    for (size_t i = 0; i < L; ++i)
      if (p.layers[i].layer_id != patterns.front().layers[i].layer_id ||
          p.layers[i].zero_channels.size() != patterns.front().layers[i].zero_channels.size())
        throw std::invalid_argument("render_pattern: patterns cover different backbones");
  }

  std::ostringstream csv;
  csv << "task";
  for (size_t i = 0; i < L; ++i) csv << "," << patterns.front().layers[i].layer_id;
  csv << "\n";

  const int cell = 22, pad = 4, label_w = 120;
  const int width = label_w + (int)L * cell + 2 * pad;
  const int height = (int)patterns.size() * cell + 2 * pad;
  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << width
      << "\" height=\"" << height << "\">\n";

  char buf[32];
  for (size_t r = 0; r < patterns.size(); ++r) {
    const SparsityPattern& p = patterns[r];
    int tap = -1;
    try {
      tap = last_active_layer(p);
    } catch (const std::exception&) {
      tap = -1;  // fully zero pattern: render without an outline
    }
    svg << "  <text x=\"" << pad << "\" y=\"" << pad + (int)r * cell + cell - 7
        << "\" font-size=\"11\" font-family=\"monospace\">" << p.task_name << "</text>\n";
    csv << p.task_name;
    for (size_t c = 0; c < L; ++c) {
      const double frac = p.zero_fraction(c);
      std::snprintf(buf, sizeof buf, "%.6f", frac);
      csv << "," << buf;
      const int shade = 255 - (int)std::lround(frac * 255.0);
      const int x = label_w + (int)c * cell;
      const int y = pad + (int)r * cell;
      svg << "  <rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell - 2
          << "\" height=\"" << cell - 2 << "\" fill=\"rgb(" << shade << "," << shade << ","
          << shade << ")\" stroke=\"";
      if (p.layers[c].layer_id == tap)
        svg << "#e67e22\" stroke-width=\"3\"";
      else
        svg << "#555555\" stroke-width=\"1\"";
      svg << "/>\n";
    }
    csv << "\n";
  }
  svg << "</svg>\n";
  return {svg.str(), csv.str()};
}

TapSelection plan_lomt(const std::map<std::string, SparsityPattern>& patterns) {
  if (patterns.empty()) throw std::invalid_argument("plan_lomt: no patterns");
  const SparsityPattern& first = patterns.begin()->second;
  for (const auto& [task, p] : patterns) {
    if (p.layers.size() != first.layers.size())
      throw std::invalid_argument("plan_lomt: patterns cover different backbones");
  }
  TapSelection sel;
  for (const auto& [task, p] : patterns) sel.taps[task] = last_active_layer(p);
  return sel;
}

}  // namespace lomt
