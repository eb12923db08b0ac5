#ifndef MTNER_RELATION_GRID_H_
#define MTNER_RELATION_GRID_H_

#include <array>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "mtner/corpus.h"

namespace mtner {

enum class RelationLabel : std::uint8_t { kNone = 0, kBeginEnd = 1, kStarInside = 2 };

inline constexpr int kRelationClasses = 3;

// Symmetric n x n token-pair labels.
class RelationGrid {
 public:
  explicit RelationGrid(int n);

  int n() const { return n_; }
  RelationLabel at(int i, int j) const { return labels_[i * n_ + j]; }
  // Sets (i, j) and (j, i), keeping the higher-priority label
  // (BeginEnd > StarInside > None).
  void merge(int i, int j, RelationLabel label);
  const std::vector<RelationLabel>& cells() const { return labels_; }

  bool operator==(const RelationGrid&) const = default;

 private:
  int n_;
  std::vector<RelationLabel> labels_;
};

// For each mention with first token b, last token e and interior tokens I:
// (b, e) is BeginEnd, every same-mention pair touching I is StarInside.
RelationGrid build_grid(const Sentence& sentence);

using ClassCounts = std::array<std::int64_t, kRelationClasses>;

ClassCounts class_distribution(const std::vector<RelationGrid>& grids);

// n lines of n space-separated label ids.
void dump_grid(std::ostream& out, const RelationGrid& grid);

}  // namespace mtner

#endif  // MTNER_RELATION_GRID_H_
