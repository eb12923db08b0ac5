#include "mtner/relation_grid.h"

#include <ostream>
#include <stdexcept>

namespace mtner {

RelationGrid::RelationGrid(int n)
    : n_(n), labels_(static_cast<std::size_t>(n) * n, RelationLabel::kNone) {
  if (n < 1) throw std::invalid_argument("relation grid needs at least one token");
}

namespace {

int priority(RelationLabel label) {
  switch (label) {
    case RelationLabel::kBeginEnd: return 2;
    case RelationLabel::kStarInside: return 1;
    case RelationLabel::kNone: return 0;
  }
  return 0;
}

}  // namespace

void RelationGrid::merge(int i, int j, RelationLabel label) {
  for (auto [a, b] : {std::pair{i, j}, std::pair{j, i}}) {
    auto& cell = labels_[a * n_ + b];
    if (priority(label) > priority(cell)) cell = label;
  }
}

RelationGrid build_grid(const Sentence& sentence) {
  RelationGrid grid(static_cast<int>(sentence.tokens.size()));
  for (const auto& m : sentence.mentions) {
    const std::vector<int> toks = m.tokens();
    const int b = toks.front();
    const int e = toks.back();
    grid.merge(b, e, RelationLabel::kBeginEnd);
    for (std::size_t x = 0; x < toks.size(); ++x) {
      for (std::size_t y = x + 1; y < toks.size(); ++y) {
        const bool inside_x = toks[x] != b && toks[x] != e;
        const bool inside_y = toks[y] != b && toks[y] != e;
        if (inside_x || inside_y) grid.merge(toks[x], toks[y], RelationLabel::kStarInside);
      }
    }
  }
  return grid;
}

ClassCounts class_distribution(const std::vector<RelationGrid>& grids) {
  if (grids.empty()) throw std::invalid_argument("class_distribution: no grids");
  ClassCounts counts{};
  for (const auto& g : grids)
    for (RelationLabel l : g.cells()) ++counts[static_cast<int>(l)];
  return counts;
}

void dump_grid(std::ostream& out, const RelationGrid& grid) {
  for (int i = 0; i < grid.n(); ++i) {
    for (int j = 0; j < grid.n(); ++j) {
      if (j) out << ' ';
      out << static_cast<int>(grid.at(i, j));
    }
    out << '\n';
  }
}

}  // namespace mtner
