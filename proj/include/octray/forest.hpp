#pragma once

// Linear forest of quadtrees (d = 2) or octrees (d = 3). Each rank stores a
// contiguous, sorted range of leaves; partition markers holding every rank's
// first position are replicated on all ranks, so ownership of any position
// is known without communication.

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "octray/bytes.hpp"
#include "octray/geometry.hpp"
#include "octray/runtime.hpp"

namespace octray {

inline constexpr int max_level(int dim) { return dim == 2 ? 19 : 18; }

inline void check_dim(int dim) {
  if (dim != 2 && dim != 3) throw std::invalid_argument("forest dimension must be 2 or 3");
}

/// Position on the space-filling curve: tree and Morton index at max level.
struct Position {
  std::int32_t tree = 0;
  std::uint64_t morton = 0;
  friend auto operator<=>(const Position&, const Position&) = default;
};

/// A tree node; leaves are ordered by (tree, morton, level), which puts every
/// ancestor directly before its descendants.
struct LeafKey {
  std::int32_t tree = 0;
  std::int32_t level = 0;
  std::uint64_t morton = 0;

  friend bool operator==(const LeafKey&, const LeafKey&) = default;
  friend std::strong_ordering operator<=>(const LeafKey& a, const LeafKey& b) {
    if (auto c = a.tree <=> b.tree; c != 0) return c;
    if (auto c = a.morton <=> b.morton; c != 0) return c;
    return a.level <=> b.level;
  }
  Position position() const { return {tree, morton}; }
};

using PartitionMarker = Position;

namespace octree {

inline std::uint64_t span(int dim, int level) {
  return std::uint64_t{1} << (dim * (max_level(dim) - level));
}

inline std::uint64_t interleave(int dim, const std::array<std::uint32_t, 3>& a) {
  std::uint64_t m = 0;
  for (int b = 0; b < max_level(dim); ++b)
    for (int k = 0; k < dim; ++k) m |= static_cast<std::uint64_t>((a[k] >> b) & 1u) << (dim * b + k);
  return m;
}

inline std::array<std::uint32_t, 3> deinterleave(int dim, std::uint64_t m) {
  std::array<std::uint32_t, 3> a{0, 0, 0};
  for (int b = 0; b < max_level(dim); ++b)
    for (int k = 0; k < dim; ++k) a[k] |= static_cast<std::uint32_t>((m >> (dim * b + k)) & 1u) << b;
  return a;
}

inline LeafKey root(std::int32_t tree) { return {tree, 0, 0}; }

inline LeafKey from_anchor(int dim, std::int32_t tree, int level, const std::array<std::uint32_t, 3>& a) {
  const std::uint32_t h = std::uint32_t{1} << (max_level(dim) - level);
  for (int k = 0; k < dim; ++k)
    if (a[k] % h != 0 || a[k] >= (std::uint32_t{1} << max_level(dim)))
      throw std::invalid_argument("anchor not aligned to its level");
  return {tree, level, interleave(dim, a)};
}

inline std::array<std::uint32_t, 3> anchor(int dim, const LeafKey& k) { return deinterleave(dim, k.morton); }

inline Position last_position(int dim, const LeafKey& k) { return {k.tree, k.morton + span(dim, k.level) - 1}; }

inline LeafKey child(int dim, const LeafKey& k, int c) {
  return {k.tree, k.level + 1, k.morton + static_cast<std::uint64_t>(c) * span(dim, k.level + 1)};
}

inline LeafKey parent(int dim, const LeafKey& k) {
  const std::uint64_t s = span(dim, k.level - 1);
  return {k.tree, k.level - 1, k.morton - k.morton % s};
}

inline int child_id(int dim, const LeafKey& k) {
  if (k.level == 0) return 0;
  return static_cast<int>((k.morton / span(dim, k.level)) % (std::uint64_t{1} << dim));
}

/// a equals b or is an ancestor of b.
inline bool contains(int dim, const LeafKey& a, const LeafKey& b) {
  return a.tree == b.tree && a.level <= b.level && b.morton >= a.morton &&
         b.morton - a.morton < span(dim, a.level);
}

inline bool is_sibling(int dim, const LeafKey& a, const LeafKey& b) {
  return a.level == b.level && a.level > 0 && a.tree == b.tree &&
         a.morton / span(dim, a.level - 1) == b.morton / span(dim, b.level - 1);
}

/// Nearest common ancestor of two nodes in the same tree.
inline LeafKey common_ancestor(int dim, const LeafKey& a, const LeafKey& b) {
  int level = std::min(a.level, b.level);
  while (level > 0 && a.morton / span(dim, level) != b.morton / span(dim, level)) --level;
  const std::uint64_t s = span(dim, level);
  return {a.tree, level, a.morton - a.morton % s};
}

/// Reference sub-cube of a node within its tree.
inline Subcube subcube(int dim, const LeafKey& k) {
  const auto a = anchor(dim, k);
  const double unit = 1.0 / static_cast<double>(std::uint64_t{1} << max_level(dim));
  Subcube sc;
  for (int d = 0; d < dim; ++d) sc.lower[static_cast<std::size_t>(d)] = a[static_cast<std::size_t>(d)] * unit;
  sc.size = std::ldexp(1.0, -k.level);
  return sc;
}

/// Coarsest aligned nodes exactly covering positions [from, to) of one tree.
inline void fill_gap(int dim, std::int32_t tree, std::uint64_t from, std::uint64_t to,
                     std::vector<LeafKey>& out) {
  while (from < to) {
    int level = 0;
    while (from % span(dim, level) != 0 || from + span(dim, level) > to) ++level;
    out.push_back({tree, level, from});
    from += span(dim, level);
  }
}

/// Fills every position in [from, to), possibly across trees.
inline void fill_range(int dim, Position from, Position to, std::vector<LeafKey>& out) {
  const std::uint64_t full = span(dim, 0);
  while (from < to) {
    if (from.tree < to.tree) {
      fill_gap(dim, from.tree, from.morton, full, out);
      from = {from.tree + 1, 0};
    } else {
      fill_gap(dim, from.tree, from.morton, to.morton, out);
      from = to;
    }
  }
}

}  // namespace octree

/// Rank owning a position: the last rank whose marker is not after it.
/// markers has num_ranks + 1 entries, the last one past the end of the forest.
inline int owner_of(std::span<const PartitionMarker> markers, Position p) {
  auto it = std::upper_bound(markers.begin(), markers.end() - 1, p);
  if (it == markers.begin()) return 0;
  return static_cast<int>(it - markers.begin()) - 1;
}

template <class Payload>
struct Leaf {
  LeafKey key;
  bool visible = true;
  Payload payload{};
};

struct NoPayload {};

template <class Payload = NoPayload>
class Forest {
 public:
  using LeafT = Leaf<Payload>;

  Forest() = default;
  Forest(int dim, int num_trees, int rank, int num_ranks) : dim_(dim), num_trees_(num_trees), rank_(rank), P_(num_ranks) {
    check_dim(dim);
    if (num_trees < 1) throw std::invalid_argument("forest needs at least one tree");
    markers_.assign(static_cast<std::size_t>(num_ranks) + 1, end_position());
    markers_[0] = {};
  }

  /// Every rank holds the full sorted leaf list; keep a contiguous share by count.
  static Forest from_replicated(int dim, int num_trees, std::vector<LeafT> all, int rank, int num_ranks) {
    Forest f(dim, num_trees, rank, num_ranks);
    const std::size_t N = all.size();
    auto begin_of = [&](int q) { return N * static_cast<std::size_t>(q) / static_cast<std::size_t>(num_ranks); };
    for (int q = 0; q <= num_ranks; ++q)
      f.markers_[static_cast<std::size_t>(q)] = q == num_ranks || begin_of(q) == N
                                                    ? f.end_position()
                                                    : all[begin_of(q)].key.position();
    f.normalize_markers();
    f.leaves_.assign(std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(begin_of(rank))),
                     std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(begin_of(rank + 1))));
    return f;
  }

  int dim() const { return dim_; }
  int num_trees() const { return num_trees_; }
  int rank() const { return rank_; }
  int num_ranks() const { return P_; }
  Position end_position() const { return {num_trees_, 0}; }

  std::vector<LeafT>& leaves() { return leaves_; }
  const std::vector<LeafT>& leaves() const { return leaves_; }
  const std::vector<PartitionMarker>& markers() const { return markers_; }
  void set_markers(std::vector<PartitionMarker> m) {
    if (m.size() != static_cast<std::size_t>(P_) + 1) throw std::invalid_argument("marker count mismatch");
    markers_ = std::move(m);
  }

  int owner(Position p) const { return owner_of(markers_, p); }

  /// Sorted, non-overlapping, inside this rank's marker range.
  void validate() const {
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      const auto& k = leaves_[i].key;
      if (k.tree < 0 || k.tree >= num_trees_ || k.level < 0 || k.level > max_level(dim_) ||
          k.morton % octree::span(dim_, k.level) != 0)
        throw std::logic_error("invalid leaf key");
      if (i > 0) {
        const auto& p = leaves_[i - 1].key;
        if (!(p < k) || octree::last_position(dim_, p) >= k.position())
          throw std::logic_error("leaves unsorted or overlapping at index " + std::to_string(i));
      }
    }
    if (!leaves_.empty()) {
      if (owner(leaves_.front().key.position()) != rank_ ||
          owner(octree::last_position(dim_, leaves_.back().key)) != rank_)
        throw std::logic_error("leaves outside this rank's partition range");
    }
  }

  /// Empty ranks take their successor's marker; the first marker is the
  /// forest start.
  void normalize_markers() {
    for (int q = P_ - 1; q >= 0; --q) {
      auto& m = markers_[static_cast<std::size_t>(q)];
      m = std::min(m, markers_[static_cast<std::size_t>(q) + 1]);
    }
    markers_[0] = {};
  }

  // -------------------------------------------------------------------------
  // Traversals

  /// Depth-first over local leaves. visit(node) is called for every interior
  /// node entered and returns false to prune; leaf(leaf, index) is called for
  /// every local leaf not pruned. Each tree's traversal starts at the common
  /// ancestor of its local leaves.
  void search_local(const std::function<bool(const LeafKey&)>& visit,
                    const std::function<void(LeafT&, std::size_t)>& leaf) {
    std::size_t lo = 0;
    while (lo < leaves_.size()) {
      const auto tree = leaves_[lo].key.tree;
      std::size_t hi = lo;
      while (hi < leaves_.size() && leaves_[hi].key.tree == tree) ++hi;
      const LeafKey top = octree::common_ancestor(dim_, leaves_[lo].key, leaves_[hi - 1].key);
      recurse_local(top, lo, hi, visit, leaf);
      lo = hi;
    }
  }

  void search_local(const std::function<bool(const LeafKey&)>& visit,
                    const std::function<void(const LeafT&, std::size_t)>& leaf) const {
    const_cast<Forest*>(this)->search_local(visit, [&](LeafT& l, std::size_t i) { leaf(l, i); });
  }

  // -------------------------------------------------------------------------
  // Coarsening

  struct CoarsenResult {
    std::size_t families = 0;           ///< families replaced by their parent
    std::size_t edge_fragments = 0;     ///< partial families at the range edges (possibly straddling)
  };

  /// Replaces every complete local family by its parent; one level per call.
  CoarsenResult coarsen(const std::function<Payload(const LeafKey& parent, std::span<LeafT> children)>& merge) {
    CoarsenResult res;
    const std::size_t F = std::size_t{1} << dim_;
    std::vector<LeafT> out;
    out.reserve(leaves_.size());
    std::size_t i = 0;
    while (i < leaves_.size()) {
      if (is_family_at(i)) {
        const LeafKey p = octree::parent(dim_, leaves_[i].key);
        std::span<LeafT> kids(leaves_.data() + i, F);
        LeafT parent{p, false, merge(p, kids)};
        for (const auto& k : kids) parent.visible = parent.visible || k.visible;
        out.push_back(std::move(parent));
        ++res.families;
        i += F;
      } else {
        out.push_back(std::move(leaves_[i]));
        ++i;
      }
    }
    res.edge_fragments = edge_fragments();
    leaves_ = std::move(out);
    return res;
  }

  bool is_family_at(std::size_t i) const {
    const std::size_t F = std::size_t{1} << dim_;
    if (i + F > leaves_.size()) return false;
    const auto& k0 = leaves_[i].key;
    if (k0.level == 0 || octree::child_id(dim_, k0) != 0) return false;
    for (std::size_t c = 1; c < F; ++c) {
      const auto& k = leaves_[i + c].key;
      if (!octree::is_sibling(dim_, k0, k) || octree::child_id(dim_, k) != static_cast<int>(c)) return false;
    }
    return true;
  }

  // -------------------------------------------------------------------------
  // Debug dump: one line per leaf "tree level a0 a1 [a2] rank visible"

  void dump(std::ostream& os) const {
    for (const auto& l : leaves_) {
      const auto a = octree::anchor(dim_, l.key);
      os << l.key.tree << ' ' << l.key.level;
      for (int k = 0; k < dim_; ++k) os << ' ' << a[static_cast<std::size_t>(k)];
      os << ' ' << rank_ << ' ' << (l.visible ? 1 : 0) << '\n';
    }
  }

  std::string dump() const {
    std::ostringstream os;
    dump(os);
    return os.str();
  }

 private:
  void recurse_local(const LeafKey& node, std::size_t lo, std::size_t hi,
                     const std::function<bool(const LeafKey&)>& visit,
                     const std::function<void(LeafT&, std::size_t)>& leaf) {
    if (hi - lo == 1 && leaves_[lo].key == node) {
      leaf(leaves_[lo], lo);
      return;
    }
    if (!visit(node)) return;
    const int F = 1 << dim_;
    std::size_t b = lo;
    for (int c = 0; c < F; ++c) {
      const LeafKey ch = octree::child(dim_, node, c);
      const Position end = {ch.tree, ch.morton + octree::span(dim_, ch.level)};
      std::size_t e = b;
      while (e < hi && leaves_[e].key.position() < end) ++e;
      if (e > b) recurse_local(ch, b, e, visit, leaf);
      b = e;
    }
  }

  std::size_t edge_fragments() const {
    std::size_t n = 0;
    if (leaves_.empty()) return 0;
    const auto& first = leaves_.front().key;
    if (first.level > 0 && octree::child_id(dim_, first) != 0) {
      std::size_t k = 1;
      while (k < leaves_.size() && octree::is_sibling(dim_, first, leaves_[k].key)) ++k;
      if (octree::child_id(dim_, leaves_[k - 1].key) == (1 << dim_) - 1) ++n;
    }
    const auto& last = leaves_.back().key;
    if (last.level > 0 && octree::child_id(dim_, last) != (1 << dim_) - 1) {
      std::size_t k = leaves_.size() - 1;
      while (k > 0 && octree::is_sibling(dim_, last, leaves_[k - 1].key)) --k;
      if (octree::child_id(dim_, leaves_[k].key) == 0) ++n;
    }
    return n;
  }

  int dim_ = 2;
  int num_trees_ = 1;
  int rank_ = 0;
  int P_ = 1;
  std::vector<LeafT> leaves_;
  std::vector<PartitionMarker> markers_{Position{}, Position{1, 0}};
};

// ---------------------------------------------------------------------------
// Virtual traversal of the partition

/// Descends virtual nodes of every tree using only the markers. visit(node,
/// first_rank, last_rank) returns false to prune; terminal(node, rank) is
/// called where a single rank owns everything under a node.
inline void search_partition(int dim, int num_trees, std::span<const PartitionMarker> markers,
                             const std::function<bool(const LeafKey&, int, int)>& visit,
                             const std::function<void(const LeafKey&, int)>& terminal) {
  std::function<void(const LeafKey&)> rec = [&](const LeafKey& node) {
    const int pf = owner_of(markers, node.position());
    const int pl = owner_of(markers, octree::last_position(dim, node));
    if (!visit(node, pf, pl)) return;
    if (pf == pl || node.level == max_level(dim)) {
      terminal(node, pf);
      return;
    }
    for (int c = 0; c < (1 << dim); ++c) rec(octree::child(dim, node, c));
  };
  for (std::int32_t t = 0; t < num_trees; ++t) rec(octree::root(t));
}

// ---------------------------------------------------------------------------
// Completion

/// Adds the fewest coarse leaves, flagged invisible, that make the sorted
/// input a complete forest over all trees. Single-rank form.
template <class Payload>
std::vector<Leaf<Payload>> complete_leaves(int dim, int num_trees, std::vector<Leaf<Payload>> input) {
  check_dim(dim);
  std::vector<Leaf<Payload>> out;
  out.reserve(input.size() * 2 + static_cast<std::size_t>(num_trees));
  Position cur{};
  std::vector<LeafKey> gap;
  for (std::size_t i = 0; i < input.size(); ++i) {
    const auto& k = input[i].key;
    if (k.tree < 0 || k.tree >= num_trees) throw std::invalid_argument("leaf tree out of range");
    if (k.position() < cur) throw std::invalid_argument("input leaves unsorted or overlapping");
    gap.clear();
    octree::fill_range(dim, cur, k.position(), gap);
    for (const auto& g : gap) out.push_back({g, false, Payload{}});
    const auto last = octree::last_position(dim, k);
    cur = last.morton + 1 == octree::span(dim, 0) ? Position{k.tree + 1, 0} : Position{k.tree, last.morton + 1};
    out.push_back(std::move(input[i]));
  }
  gap.clear();
  octree::fill_range(dim, cur, Position{num_trees, 0}, gap);
  for (const auto& g : gap) out.push_back({g, false, Payload{}});
  return out;
}

namespace detail {

inline Position end_of(int dim, const LeafKey& k) {
  const auto last = octree::last_position(dim, k);
  return last.morton + 1 == octree::span(dim, 0) ? Position{k.tree + 1, 0} : Position{k.tree, last.morton + 1};
}

}  // namespace detail

/// Distributed completion. Leaves on each rank must be sorted and globally
/// ordered by rank. Each rank fills the gap in front of its first leaf; the
/// last non-empty rank also fills up to the end. Markers are recomputed.
template <class Payload>
Forest<Payload> build_complete(int dim, int num_trees, std::vector<Leaf<Payload>> visible, Comm& comm) {
  check_dim(dim);
  const int P = comm.size(), me = comm.rank();
  for (std::size_t i = 1; i < visible.size(); ++i)
    if (detail::end_of(dim, visible[i - 1].key) > visible[i].key.position())
      throw std::invalid_argument("build_complete: input leaves unsorted or overlapping");

  struct Summary {
    std::uint8_t nonempty;
    Position first, end;
  };
  Summary mine{0, {}, {}};
  if (!visible.empty()) mine = {1, visible.front().key.position(), detail::end_of(dim, visible.back().key)};
  const auto all = replicate_markers(comm, mine);

  // start of the gap in front of each rank; the first non-empty rank fills from the start
  std::vector<Position> begin(static_cast<std::size_t>(P) + 1, Position{num_trees, 0});
  Position prev_end{};
  int last_nonempty = -1;
  for (int q = 0; q < P; ++q) {
    if (!all[static_cast<std::size_t>(q)].nonempty) continue;
    if (all[static_cast<std::size_t>(q)].first < prev_end)
      throw std::invalid_argument("build_complete: ranks overlap or are out of order");
    begin[static_cast<std::size_t>(q)] = prev_end;
    prev_end = all[static_cast<std::size_t>(q)].end;
    last_nonempty = q;
  }

  Forest<Payload> f(dim, num_trees, me, P);
  std::vector<PartitionMarker> markers(static_cast<std::size_t>(P) + 1, Position{num_trees, 0});
  if (last_nonempty < 0) {
    // nothing visible anywhere: rank 0 takes every root
    markers[0] = {};
    if (me == 0)
      for (std::int32_t t = 0; t < num_trees; ++t) f.leaves().push_back({octree::root(t), false, Payload{}});
  } else {
    for (int q = 0; q < P; ++q)
      if (all[static_cast<std::size_t>(q)].nonempty) markers[static_cast<std::size_t>(q)] = begin[static_cast<std::size_t>(q)];
    if (mine.nonempty) {
      std::vector<Leaf<Payload>> local;
      std::vector<LeafKey> gap;
      octree::fill_range(dim, begin[static_cast<std::size_t>(me)], visible.front().key.position(), gap);
      for (const auto& g : gap) local.push_back({g, false, Payload{}});
      Position cur = visible.front().key.position();
      for (auto& l : visible) {
        gap.clear();
        octree::fill_range(dim, cur, l.key.position(), gap);
        for (const auto& g : gap) local.push_back({g, false, Payload{}});
        cur = detail::end_of(dim, l.key);
        local.push_back(std::move(l));
      }
      if (me == last_nonempty) {
        gap.clear();
        octree::fill_range(dim, cur, Position{num_trees, 0}, gap);
        for (const auto& g : gap) local.push_back({g, false, Payload{}});
      }
      f.leaves() = std::move(local);
    }
  }
  f.set_markers(std::move(markers));
  f.normalize_markers();
  return f;
}

// ---------------------------------------------------------------------------
// Weighted partition and transfer

struct RelocationRange {
  std::size_t begin = 0, end = 0;  ///< local leaf index range
  int to = 0;
};

struct PartitionPlan {
  std::vector<PartitionMarker> old_markers;
  std::vector<PartitionMarker> new_markers;
  std::vector<RelocationRange> ranges;  ///< ascending, covering all local leaves
};

/// Splits the global leaf sequence into contiguous rank ranges by weight.
///
/// Cut q is first placed at the earliest allowed boundary whose weight prefix
/// reaches q/P of the total. Moving a cut across zero-weight leaves changes no
/// rank's weight, so within that slack the cut is pulled toward q/P of the
/// leaf count. With keep_families, boundaries between consecutive same-level
/// siblings are not allowed.
template <class Payload>
PartitionPlan partition_weighted(const Forest<Payload>& f, std::span<const std::uint64_t> weights, Comm& comm,
                                 bool keep_families = true) {
  using u128 = unsigned __int128;
  const auto& L = f.leaves();
  if (weights.size() != L.size()) throw std::invalid_argument("partition_weighted: one weight per leaf required");
  const int P = comm.size(), me = comm.rank(), dim = f.dim();
  const std::size_t n = L.size();

  auto joined = [&](const LeafKey& prev, const LeafKey& cur) {
    return keep_families && octree::is_sibling(dim, prev, cur);
  };

  struct Summary {
    std::uint64_t count, wsum;
    LeafKey first, last;
  };
  Summary mine{n, 0, {}, {}};
  for (auto w : weights) mine.wsum += w;
  if (n > 0) {
    mine.first = L.front().key;
    mine.last = L.back().key;
  }
  const auto all = replicate_markers(comm, mine);

  std::uint64_t N = 0, off = 0, W = 0, base = 0;
  bool has_prev = false;
  LeafKey prev_last{};
  for (int q = 0; q < P; ++q) {
    const auto& s = all[static_cast<std::size_t>(q)];
    if (q == me) {
      off = N;
      base = W;
    }
    if (q < me && s.count > 0) {
      has_prev = true;
      prev_last = s.last;
    }
    N += s.count;
    W += s.wsum;
  }

  // boundary before local leaf i: global index, weight prefix, allowed
  std::vector<std::uint64_t> sw(n);
  std::vector<std::uint8_t> allowed(n);
  for (std::size_t i = 0, acc = base; i < n; ++i) {
    sw[i] = acc;
    acc += weights[i];
    allowed[i] = i == 0 ? !(has_prev && joined(prev_last, L[0].key)) : !joined(L[i - 1].key, L[i].key);
  }
  auto reaches = [&](std::uint64_t v, int q) {
    return static_cast<u128>(v) * static_cast<u128>(P) >= static_cast<u128>(q) * static_cast<u128>(W);
  };

  // round 1: per cut, the first allowed boundary reaching the threshold
  struct Candidate {
    std::uint64_t first, value, last;
    std::uint8_t valid;
  };
  std::vector<Candidate> cand(static_cast<std::size_t>(P), Candidate{0, 0, 0, 0});
  for (int q = 1; q < P; ++q) {
    auto& c = cand[static_cast<std::size_t>(q)];
    for (std::size_t i = 0; i < n; ++i) {
      if (!allowed[i] || !reaches(sw[i], q)) continue;
      if (!c.valid) c = {off + i, sw[i], off + i, 1};
      else if (sw[i] == c.value) c.last = off + i;
      else break;
    }
  }
  ByteWriter w1;
  w1.put_bytes(cand.data(), cand.size() * sizeof(Candidate));
  const auto round1 = comm.allgather(w1.take());

  // the end of the sequence is an allowed boundary with value W, known to all
  std::vector<std::uint64_t> target(static_cast<std::size_t>(P) + 1, N);
  target[0] = 0;
  for (int q = 1; q < P; ++q) {
    Candidate best{N, W, N, 1};
    for (const auto& b : round1) {
      ByteReader r(b);
      Candidate c{};
      for (int k = 0; k <= q; ++k) c = r.get<Candidate>();
      if (!c.valid) continue;
      if (c.value < best.value) best = c;
      else if (c.value == best.value) {
        best.first = std::min(best.first, c.first);
        best.last = std::max(best.last, c.last);
      }
    }
    const std::uint64_t by_count = static_cast<std::uint64_t>(static_cast<u128>(q) * N / static_cast<u128>(P));
    target[static_cast<std::size_t>(q)] = std::clamp(by_count, best.first, best.last);
  }

  // round 2: snap each target down to an allowed boundary and publish its position
  struct Cut {
    std::uint64_t index;
    Position pos;
    std::uint8_t valid;
  };
  std::vector<Cut> cuts(static_cast<std::size_t>(P), Cut{0, {}, 0});
  for (int q = 1; q < P; ++q) {
    const auto t = target[static_cast<std::size_t>(q)];
    for (std::size_t i = n; i-- > 0;)
      if (allowed[i] && off + i <= t) {
        cuts[static_cast<std::size_t>(q)] = {off + i, L[i].key.position(), 1};
        break;
      }
  }
  ByteWriter w2;
  w2.put_bytes(cuts.data(), cuts.size() * sizeof(Cut));
  const auto round2 = comm.allgather(w2.take());

  std::vector<std::uint64_t> cut(static_cast<std::size_t>(P) + 1, N);
  cut[0] = 0;
  PartitionPlan plan;
  plan.old_markers = f.markers();
  plan.new_markers.assign(static_cast<std::size_t>(P) + 1, f.end_position());
  plan.new_markers[0] = {};
  for (int q = 1; q < P; ++q) {
    const auto qi = static_cast<std::size_t>(q);
    Cut best{N, f.end_position(), target[qi] == N};
    for (const auto& b : round2) {
      ByteReader r(b);
      Cut c{};
      for (int k = 0; k <= q; ++k) c = r.get<Cut>();
      if (c.valid && (!best.valid || c.index > best.index)) best = c;
    }
    if (!best.valid) throw std::logic_error("partition_weighted: no allowed boundary below target");
    cut[qi] = best.index;
    plan.new_markers[qi] = best.pos;
  }

  for (std::size_t i = 0; i < n;) {
    const std::uint64_t g = off + i;
    const int to = static_cast<int>(std::upper_bound(cut.begin(), cut.end() - 1, g) - cut.begin()) - 1;
    const std::size_t j = std::min<std::uint64_t>(n, cut[static_cast<std::size_t>(to) + 1] - off);
    plan.ranges.push_back({i, j, to});
    i = j;
  }
  return plan;
}

namespace detail {

/// Ranks whose position range [m[q], m[q+1]) is non-empty and meets [lo, hi).
inline std::vector<int> overlapping_ranks(std::span<const PartitionMarker> m, Position lo, Position hi) {
  std::vector<int> out;
  if (!(lo < hi)) return out;
  const int P = static_cast<int>(m.size()) - 1;
  for (int q = 0; q < P; ++q) {
    const auto a = m[static_cast<std::size_t>(q)], b = m[static_cast<std::size_t>(q) + 1];
    if (a < b && a < hi && lo < b) out.push_back(q);
  }
  return out;
}

}  // namespace detail

inline constexpr Tag kTagTransfer = 0x0100;

/// Moves leaves and payloads to their new owners. Senders and receivers are
/// both derived from the old and new markers, so every rank knows exactly
/// which messages to expect.
template <class Payload>
Forest<Payload> transfer(Forest<Payload>&& f, const PartitionPlan& plan, Comm& comm,
                         const std::function<void(const Payload&, ByteWriter&)>& marshal,
                         const std::function<Payload(ByteReader&)>& unmarshal, Tag tag = kTagTransfer) {
  const int P = comm.size(), me = comm.rank();
  const auto& om = plan.old_markers;
  const auto& nm = plan.new_markers;
  const auto mi = static_cast<std::size_t>(me);
  auto& L = f.leaves();

  // receivers: ranks whose new range meets my old range; senders: the reverse
  const auto receivers = detail::overlapping_ranks(nm, om[mi], om[mi + 1]);
  const auto senders = detail::overlapping_ranks(om, nm[mi], nm[mi + 1]);

  std::vector<RecvHandle> recvs;
  std::vector<int> recv_from;
  for (int q : senders)
    if (q != me) {
      recvs.push_back(comm.post_recv(q, tag));
      recv_from.push_back(q);
    }

  std::vector<Leaf<Payload>> keep;
  for (int q : receivers) {
    const auto range = std::find_if(plan.ranges.begin(), plan.ranges.end(), [&](const RelocationRange& r) { return r.to == q; });
    if (q == me) {
      if (range != plan.ranges.end())
        for (std::size_t i = range->begin; i < range->end; ++i) keep.push_back(std::move(L[i]));
      continue;
    }
    ByteWriter w;
    const std::size_t cnt = range == plan.ranges.end() ? 0 : range->end - range->begin;
    w.put_varint(cnt);
    for (std::size_t i = 0; i < cnt; ++i) {
      const auto& l = L[range->begin + i];
      w.put(l.key.tree);
      w.put(static_cast<std::uint8_t>(l.key.level));
      w.put(l.key.morton);
      w.put(static_cast<std::uint8_t>(l.visible));
      marshal(l.payload, w);
    }
    comm.post_send(q, tag, w.take());
  }
  for (const auto& r : plan.ranges)
    if (std::find(receivers.begin(), receivers.end(), r.to) == receivers.end())
      throw std::logic_error("transfer: relocation target outside the marker overlap");

  comm.wait_all(recvs);

  // assemble in sender rank order, which is global leaf order
  std::vector<std::pair<int, std::vector<Leaf<Payload>>>> parts;
  for (std::size_t k = 0; k < recvs.size(); ++k) {
    ByteReader r(recvs[k].data);
    const auto cnt = r.get_varint();
    std::vector<Leaf<Payload>> got;
    got.reserve(cnt);
    for (std::uint64_t i = 0; i < cnt; ++i) {
      Leaf<Payload> l;
      l.key.tree = r.get<std::int32_t>();
      l.key.level = r.get<std::uint8_t>();
      l.key.morton = r.get<std::uint64_t>();
      l.visible = r.get<std::uint8_t>() != 0;
      l.payload = unmarshal(r);
      got.push_back(std::move(l));
    }
    if (!r.done()) r.fail("transfer: trailing bytes in message from rank " + std::to_string(recv_from[k]));
    parts.emplace_back(recv_from[k], std::move(got));
  }
  parts.emplace_back(me, std::move(keep));
  std::sort(parts.begin(), parts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

  Forest<Payload> out(f.dim(), f.num_trees(), me, P);
  for (auto& [q, v] : parts)
    for (auto& l : v) out.leaves().push_back(std::move(l));
  out.set_markers(nm);
  return out;
}

/// partition_weighted followed by transfer.
template <class Payload>
Forest<Payload> repartition(Forest<Payload>&& f, std::span<const std::uint64_t> weights, Comm& comm,
                            const std::function<void(const Payload&, ByteWriter&)>& marshal,
                            const std::function<Payload(ByteReader&)>& unmarshal, bool keep_families = true) {
  const auto plan = partition_weighted(f, weights, comm, keep_families);
  return transfer(std::move(f), plan, comm, marshal, unmarshal);
}

}  // namespace octray
