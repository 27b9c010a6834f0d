#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "lomt/sparsity.hpp"

using namespace lomt;

namespace {

SparsityPattern pattern_from_flags(const std::vector<std::vector<int>>& rows,
                                   const std::string& task = "task") {
  SparsityPattern p;
  p.task_name = task;
  for (size_t i = 0; i < rows.size(); ++i) {
    LayerPattern lp;
    lp.layer_id = (int)i;
    for (int f : rows[i]) lp.zero_channels.push_back((uint8_t)f);
    p.layers.push_back(lp);
  }
  return p;
}

void zero_layer(ModelGraph& m, int layer) {
  for (auto& p : m.params)
    if (p.layer_id == layer)
      for (double& x : p.values().v) x = 0.0;
}

size_t count_occurrences(const std::string& hay, const std::string& needle) {
  size_t n = 0, pos = 0;
  while ((pos = hay.find(needle, pos)) != std::string::npos) {
    ++n;
    pos += needle.size();
  }
  return n;
}

}  // namespace

TEST_CASE("extract_pattern flips exactly the zeroed layer") {
  ModelGraph m = build_backbone(BackboneSpec::standard(3, 4), 17);
  GroupIndex idx = build_channel_groups(m, 0.2);

  SparsityPattern dense = extract_pattern(m, idx);
  CHECK(dense.layers.size() == 6);  // row count equals backbone conv layer count
  for (const auto& lp : dense.layers)
    for (uint8_t f : lp.zero_channels) CHECK(f == 0);

  zero_layer(m, 3);
  SparsityPattern zp = extract_pattern(m, idx);
  for (const auto& lp : zp.layers) {
    for (uint8_t f : lp.zero_channels) CHECK(f == (lp.layer_id == 3 ? 1 : 0));
  }
  CHECK(zp.lambda == idx.lambda);
  CHECK(zp.seed == m.init_seed);
}

TEST_CASE("last_active_layer rule") {
  // [active, active, zero, zero] -> 1
  CHECK(last_active_layer(pattern_from_flags({{0, 0}, {0, 1}, {1, 1}, {1, 1}})) == 1);
  // interior zero layers are skipped; residual path carries values
  CHECK(last_active_layer(pattern_from_flags({{0, 0}, {1, 1}, {0, 1}, {1, 1}})) == 2);
  // no zero layers at all -> last index
  CHECK(last_active_layer(pattern_from_flags({{0, 0}, {0, 0}, {0, 0}})) == 2);
  // all layers fully zero -> explicit error
  CHECK_THROWS(last_active_layer(pattern_from_flags({{1, 1}, {1, 1}})));
  // empty pattern -> error
  CHECK_THROWS(last_active_layer(SparsityPattern{}));
}

TEST_CASE("last_active_layer is invariant under appending fully-zero layers") {
  auto base = pattern_from_flags({{0, 1}, {0, 0}, {1, 1}});
  const int before = last_active_layer(base);
  auto extended = base;
  for (int k = 0; k < 3; ++k) {
    LayerPattern lp;
    lp.layer_id = (int)extended.layers.size();
    lp.zero_channels = {1, 1};
    extended.layers.push_back(lp);
    CHECK(last_active_layer(extended) == before);
  }
}

TEST_CASE("compression_ratio arithmetic") {
  // paper values, backbone parameter counts in millions
  CHECK(compression_ratio(23630000, 1500000).compression_ratio ==
        doctest::Approx(15.75).epsilon(0.01 / 15.75));
  CHECK(compression_ratio(23630000, 7290000).compression_ratio ==
        doctest::Approx(3.24).epsilon(0.01 / 3.24));

  CHECK(compression_ratio(100, 100).compression_ratio == 1.0);
  CHECK(compression_ratio(100, 25).compression_ratio == 4.0);
  CHECK_THROWS(compression_ratio(100, 0));
  CHECK_THROWS(compression_ratio(10, 20));

  // CR(x, x) = 1 and strictly decreasing in nonzero for fixed total
  for (long long x : {1ll, 7ll, 123456ll}) CHECK(compression_ratio(x, x).compression_ratio == 1.0);
  double prev = compression_ratio(1000, 1).compression_ratio;
  for (long long nz = 2; nz <= 1000; nz += 37) {
    const double cur = compression_ratio(1000, nz).compression_ratio;
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("render_pattern produces the documented CSV and SVG grid") {
  // two tasks, 6 layers -> SVG with 2x6 cells, CSV with header + 2 rows
  auto p1 = pattern_from_flags({{0, 0}, {0, 0}, {0, 1}, {0, 0}, {1, 1}, {1, 1}}, "edge");
  auto p2 = pattern_from_flags({{0, 0}, {0, 0}, {0, 0}, {0, 0}, {0, 0}, {0, 1}}, "depth");
  PatternRender r = render_pattern({p1, p2});
  CHECK(count_occurrences(r.svg, "<rect") == 12);
  CHECK(count_occurrences(r.svg, "stroke=\"#e67e22\"") == 2);  // one tap outline per task

  std::istringstream csv(r.csv);
  std::string line;
  std::getline(csv, line);
  CHECK(line == "task,0,1,2,3,4,5");
  std::getline(csv, line);
  CHECK(line == "edge,0.000000,0.000000,0.500000,0.000000,1.000000,1.000000");
  std::getline(csv, line);
  CHECK(line == "depth,0.000000,0.000000,0.000000,0.000000,0.000000,0.500000");
  CHECK(!std::getline(csv, line));

  // single dense pattern -> one fully unshaded row
  auto dense = pattern_from_flags({{0, 0}, {0, 0}, {0, 0}}, "t");
  PatternRender rd = render_pattern({dense});
  CHECK(count_occurrences(rd.svg, "fill=\"rgb(255,255,255)\"") == 3);

  // constructed fractions 0, 0.5, 1.0
  auto fr = pattern_from_flags({{0, 0}, {0, 1}, {1, 1}}, "t");
  PatternRender rf = render_pattern({fr});
  CHECK(rf.csv.find("t,0.000000,0.500000,1.000000") != std::string::npos);

  // mixed backbone specs are rejected
  auto shorter = pattern_from_flags({{0, 0}, {0, 0}}, "bad");
  CHECK_THROWS(render_pattern({p1, shorter}));
}

TEST_CASE("plan_lomt composes the last-active rule") {
  std::map<std::string, SparsityPattern> pats;
  pats["T1"] = pattern_from_flags({{0}, {0}, {0}, {0}, {1}, {1}}, "T1");  // last active 3
  pats["T2"] = pattern_from_flags({{0}, {0}, {0}, {0}, {0}, {0}}, "T2");  // dense -> 5
  TapSelection sel = plan_lomt(pats);
  CHECK(sel.taps.at("T1") == 3);
  CHECK(sel.taps.at("T2") == 5);

  // purity: same patterns give the same selection
  TapSelection again = plan_lomt(pats);
  CHECK(again.taps == sel.taps);

  // all patterns dense -> taps all final
  std::map<std::string, SparsityPattern> dense;
  dense["A"] = pattern_from_flags({{0}, {0}, {0}}, "A");
  dense["B"] = pattern_from_flags({{0}, {0}, {0}}, "B");
  TapSelection dsel = plan_lomt(dense);
  CHECK(dsel.taps.at("A") == 2);
  CHECK(dsel.taps.at("B") == 2);

  // any fully zero pattern is an error
  std::map<std::string, SparsityPattern> bad;
  bad["A"] = pattern_from_flags({{1}, {1}}, "A");
  CHECK_THROWS(plan_lomt(bad));
  CHECK_THROWS(plan_lomt({}));
}
