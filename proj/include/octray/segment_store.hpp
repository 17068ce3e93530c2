#pragma once

// Per-image quadtree of rectangles holding per-pixel ray segment lists.
//
// A node at level l covers a square of edge 2^(L-l) pixels; leaves hold at
// most one rectangular payload that fits inside the node. Payloads store one
// segment list per pixel in row-major order over their rectangle.

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "octray/bytes.hpp"
#include "octray/geometry.hpp"
#include "octray/segment_algebra.hpp"

namespace octray {

/// Segments of one pixel, ordered by x_in (camera-nearest first).
using PixelList = std::vector<RaySegment>;

inline constexpr std::size_t kCompactThreshold = 16;

/// Fold of a pixel list; the camera-nearest segment is applied last.
inline Segment3 finalize_pixel(const PixelList& list) {
  Segment3 acc = identity_segment3();
  for (auto it = list.rbegin(); it != list.rend(); ++it) acc = aggregate(it->ch, acc);
  return acc;
}

/// Aggregates runs of touching segments into single segments.
inline void compact(PixelList& list) {
  if (list.size() < 2) return;
  PixelList out;
  out.reserve(list.size());
  out.push_back(list.front());
  for (std::size_t k = 1; k < list.size(); ++k) {
    auto& last = out.back();
    const auto& s = list[k];
    if (same_coordinate(last.x_out, s.x_in)) {
      last.ch = aggregate(last.ch, s.ch);
      last.x_out = s.x_out;
    } else {
      out.push_back(s);
    }
  }
  list = std::move(out);
}

/// Merge-sort step over two ordered lists; overlaps are resolved by averaging.
inline PixelList merge_lists(const PixelList& a, const PixelList& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  PixelList out;
  out.reserve(a.size() + b.size() + 2);
  detail::merge_resolve(a, b, out);
  if (out.size() > kCompactThreshold) compact(out);
  return out;
}

/// Ordered by x_in with no positive-length overlaps.
inline bool is_ordered(const PixelList& list) {
  for (std::size_t k = 0; k < list.size(); ++k) {
    if (!(list[k].x_in <= list[k].x_out)) return false;
    if (k > 0 && list[k - 1].x_out > list[k].x_in && !same_coordinate(list[k - 1].x_out, list[k].x_in)) return false;
  }
  return true;
}

inline int depth_for(int w, int h) {
  if (w < 1 || h < 1) throw std::invalid_argument("image size must be positive");
  int L = 0;
  while ((1 << L) < std::max(w, h)) ++L;
  return L;
}

/// Smallest tile exponent t whose visible tile count fits the writer count.
inline int choose_tile_exponent(int L, int writers, const std::function<std::size_t(int)>& visible_tiles) {
  if (writers < 1) throw std::invalid_argument("need at least one writer");
  for (int t = 0; t < L; ++t)
    if (visible_tiles(t) <= static_cast<std::size_t>(writers)) return t;
  return L;
}

struct RectPayload {
  PixelRect rect;
  std::vector<PixelList> lists;  ///< row-major over rect

  PixelList& at(int i, int j) {
    return lists[static_cast<std::size_t>(j - rect.j0) * static_cast<std::size_t>(rect.width()) +
                 static_cast<std::size_t>(i - rect.i0)];
  }
  const PixelList& at(int i, int j) const { return const_cast<RectPayload*>(this)->at(i, j); }

  std::size_t segment_count() const {
    std::size_t n = 0;
    for (const auto& l : lists) n += l.size();
    return n;
  }

  /// The part of this payload inside r, moving the lists out.
  RectPayload take(const PixelRect& r) {
    RectPayload out;
    out.rect = rect.intersect(r);
    if (out.rect.empty()) return out;
    out.lists.reserve(static_cast<std::size_t>(out.rect.area()));
    for (int j = out.rect.j0; j < out.rect.j1; ++j)
      for (int i = out.rect.i0; i < out.rect.i1; ++i) out.lists.push_back(std::move(at(i, j)));
    return out;
  }
};

class ImageSegmentTree {
 public:
  ImageSegmentTree() : ImageSegmentTree(0, 1, 1) {}
  ImageSegmentTree(int instance, int w, int h) : instance_(instance), w_(w), h_(h), L_(depth_for(w, h)) {}

  int instance() const { return instance_; }
  int width() const { return w_; }
  int height() const { return h_; }
  int depth() const { return L_; }

  /// With a tile exponent set, inserted rectangles are first cut at tile
  /// lines so that no payload straddles a tile.
  void set_tile_exponent(int t) {
    if (t < 0 || t > L_) throw std::invalid_argument("tile exponent out of range");
    tile_ = t;
  }
  int tile_exponent() const { return tile_; }

  void insert_rect(const PixelRect& rect, std::vector<PixelList> lists) {
    if (rect.empty()) return;
    if (rect.i0 < 0 || rect.j0 < 0 || rect.i1 > w_ || rect.j1 > h_)
      throw std::out_of_range("insert_rect: rectangle outside the image");
    if (lists.size() != static_cast<std::size_t>(rect.area()))
      throw std::invalid_argument("insert_rect: one list per pixel required");
    RectPayload p{rect, std::move(lists)};
    for (int j = rect.j0; j < rect.j1; ++j)
      for (int i = rect.i0; i < rect.i1; ++i)
        for (auto& s : p.at(i, j)) s.pixel = {instance_, i, j};
    if (tile_ < 0) {
      insert(root_, root_area(), std::move(p));
      return;
    }
    const int T = 1 << tile_;
    for (int tj = rect.j0 / T; tj * T < rect.j1; ++tj)
      for (int ti = rect.i0 / T; ti * T < rect.i1; ++ti)
        insert(root_, root_area(), p.take({ti * T, tj * T, (ti + 1) * T, (tj + 1) * T}));
  }

  /// Union of two trees of the same image; both inputs are consumed.
  static ImageSegmentTree merge(ImageSegmentTree a, ImageSegmentTree b) {
    if (a.instance_ != b.instance_ || a.w_ != b.w_ || a.h_ != b.h_)
      throw std::invalid_argument("merge_trees: trees belong to different images");
    a.merge_node(a.root_, a.root_area(), std::move(b.root_));
    return a;
  }

  /// Splits into per-tile fragments keyed by (tile column, tile row).
  std::map<std::pair<int, int>, ImageSegmentTree> split_tiles(int t) && {
    if (t < 0 || t > L_) throw std::invalid_argument("tile exponent out of range");
    std::map<std::pair<int, int>, ImageSegmentTree> out;
    auto fragment = [&](int ti, int tj) -> ImageSegmentTree& {
      auto it = out.find({ti, tj});
      if (it == out.end()) {
        it = out.emplace(std::make_pair(ti, tj), ImageSegmentTree(instance_, w_, h_)).first;
        it->second.tile_ = t;
      }
      return it->second;
    };
    std::function<void(Node&, Area, int)> rec = [&](Node& n, Area a, int level) {
      if (level == L_ - t) {
        if (n.empty()) return;
        auto& f = fragment(a.x0 >> t, a.y0 >> t);
        f.node_at(level, a) = std::move(n);
        return;
      }
      if (n.leaf()) {
        if (!n.payload) return;
        // payload above tile level: cut it at tile lines
        auto& p = *n.payload;
        const int T = 1 << t;
        for (int tj = p.rect.j0 / T; tj * T < p.rect.j1; ++tj)
          for (int ti = p.rect.i0 / T; ti * T < p.rect.i1; ++ti) {
            auto& f = fragment(ti, tj);
            f.insert(f.root_, f.root_area(), p.take({ti * T, tj * T, (ti + 1) * T, (tj + 1) * T}));
          }
        return;
      }
      for (int c = 0; c < 4; ++c) rec((*n.kids)[static_cast<std::size_t>(c)], a.child(c), level + 1);
    };
    rec(root_, root_area(), 0);
    root_ = Node{};
    return out;
  }

  // -------------------------------------------------------------------------
  // inspection

  void for_each_payload(const std::function<void(const RectPayload&)>& fn) const {
    std::function<void(const Node&)> rec = [&](const Node& n) {
      if (n.payload) fn(*n.payload);
      if (n.kids)
        for (const auto& k : *n.kids) rec(k);
    };
    rec(root_);
  }

  void for_each_pixel(const std::function<void(int i, int j, const PixelList&)>& fn) const {
    for_each_payload([&](const RectPayload& p) {
      for (int j = p.rect.j0; j < p.rect.j1; ++j)
        for (int i = p.rect.i0; i < p.rect.i1; ++i)
          if (!p.at(i, j).empty()) fn(i, j, p.at(i, j));
    });
  }

  std::map<std::pair<int, int>, PixelList> pixel_map() const {
    std::map<std::pair<int, int>, PixelList> m;
    for_each_pixel([&](int i, int j, const PixelList& l) { m[{i, j}] = l; });
    return m;
  }

  std::size_t segment_count() const {
    std::size_t n = 0;
    for_each_payload([&](const RectPayload& p) { n += p.segment_count(); });
    return n;
  }

  /// Aggregates every run of touching segments, whatever the list length.
  void compact_all() {
    std::function<void(Node&)> rec = [&](Node& n) {
      if (n.payload)
        for (auto& l : n.payload->lists) compact(l);
      if (n.kids)
        for (auto& k : *n.kids) rec(k);
    };
    rec(root_);
  }

  std::size_t node_count() const {
    std::size_t n = 0;
    std::function<void(const Node&)> rec = [&](const Node& x) {
      ++n;
      if (x.kids)
        for (const auto& k : *x.kids) rec(k);
    };
    rec(root_);
    return n;
  }

  bool empty() const { return root_.empty(); }

  /// Payloads fit their nodes, lie in the image, are disjoint and ordered.
  void validate() const {
    std::vector<PixelRect> rects;
    std::function<void(const Node&, Area)> rec = [&](const Node& n, Area a) {
      if (n.payload && n.kids) throw std::logic_error("interior node with payload");
      if (n.payload) {
        const auto& p = *n.payload;
        const PixelRect area{a.x0, a.y0, a.x0 + a.size, a.y0 + a.size};
        if (p.rect.empty() || !(p.rect.intersect(area) == p.rect)) throw std::logic_error("payload outside its node");
        if (p.rect.i1 > w_ || p.rect.j1 > h_) throw std::logic_error("payload outside the image");
        if (p.lists.size() != static_cast<std::size_t>(p.rect.area())) throw std::logic_error("payload size mismatch");
        for (const auto& l : p.lists)
          if (!is_ordered(l)) throw std::logic_error("pixel list not ordered");
        rects.push_back(p.rect);
      }
      if (n.kids)
        for (int c = 0; c < 4; ++c) rec((*n.kids)[static_cast<std::size_t>(c)], a.child(c));
    };
    rec(root_, root_area());
    for (std::size_t x = 0; x < rects.size(); ++x)
      for (std::size_t y = x + 1; y < rects.size(); ++y)
        if (!rects[x].intersect(rects[y]).empty()) throw std::logic_error("overlapping payloads");
  }

  // -------------------------------------------------------------------------
  // wire format

  static constexpr std::uint32_t kMagic = 0x4745534f;  // "OSEG"
  static constexpr std::uint16_t kVersion = 1;

  Bytes marshal() const {
    ByteWriter nodes;
    std::uint64_t node_count = 0;
    std::vector<const RectPayload*> order;
    std::function<void(const Node&)> rec = [&](const Node& n) {
      ++node_count;
      if (n.kids) {
        nodes.put(std::uint8_t{2});
        for (const auto& k : *n.kids) rec(k);
      } else if (n.payload) {
        const auto& p = *n.payload;
        nodes.put(std::uint8_t{1});
        nodes.put_varint(static_cast<std::uint64_t>(p.rect.i0));
        nodes.put_varint(static_cast<std::uint64_t>(p.rect.j0));
        nodes.put_varint(static_cast<std::uint64_t>(p.rect.width()));
        nodes.put_varint(static_cast<std::uint64_t>(p.rect.height()));
        for (const auto& l : p.lists) nodes.put_varint(l.size());
        order.push_back(&p);
      } else {
        nodes.put(std::uint8_t{0});
      }
    };
    rec(root_);

    ByteWriter w;
    w.put(kMagic);
    w.put(kVersion);
    w.put(static_cast<std::int32_t>(instance_));
    w.put(static_cast<std::int32_t>(w_));
    w.put(static_cast<std::int32_t>(h_));
    w.put(static_cast<std::int8_t>(tile_));
    w.put(node_count);
    w.put(static_cast<std::uint64_t>(segment_count()));
    w.put_bytes(nodes.buffer().data(), nodes.size());
    for (const auto* p : order)
      for (const auto& l : p->lists)
        for (const auto& s : l) {
          w.put(s.x_in);
          w.put(s.x_out);
          for (const auto& c : s.ch) {
            w.put(c.A);
            w.put(c.B);
          }
        }
    return w.take();
  }

  static ImageSegmentTree unmarshal(const Bytes& bytes) {
    ByteReader r(bytes);
    if (r.get<std::uint32_t>() != kMagic) throw DecodeError("bad magic", 0);
    if (r.get<std::uint16_t>() != kVersion) throw DecodeError("unsupported version", 4);
    const auto instance = r.get<std::int32_t>();
    const auto w = r.get<std::int32_t>();
    const auto h = r.get<std::int32_t>();
    const auto tile = r.get<std::int8_t>();
    if (w < 1 || h < 1 || w > (1 << 24) || h > (1 << 24)) r.fail("bad image size");
    ImageSegmentTree t(instance, w, h);
    if (tile < -1 || tile > t.L_) r.fail("bad tile exponent");
    t.tile_ = tile;
    const auto nodes = r.get<std::uint64_t>();
    const auto segs = r.get<std::uint64_t>();

    std::uint64_t seen_nodes = 0, seen_segs = 0;
    std::vector<std::pair<RectPayload*, std::vector<std::uint64_t>>> counts;
    std::function<void(Node&, Area, int)> rec = [&](Node& n, Area a, int level) {
      if (++seen_nodes > nodes) r.fail("more nodes than announced");
      const auto tag = r.get<std::uint8_t>();
      if (tag == 2) {
        if (level >= t.L_) r.fail("interior node below pixel level");
        n.kids = std::make_unique<std::array<Node, 4>>();
        for (int c = 0; c < 4; ++c) rec((*n.kids)[static_cast<std::size_t>(c)], a.child(c), level + 1);
      } else if (tag == 1) {
        auto p = std::make_unique<RectPayload>();
        const auto i0 = r.get_varint(), j0 = r.get_varint(), pw = r.get_varint(), ph = r.get_varint();
        if (pw == 0 || ph == 0 || i0 < static_cast<std::uint64_t>(a.x0) || j0 < static_cast<std::uint64_t>(a.y0) ||
            i0 + pw > static_cast<std::uint64_t>(std::min(a.x0 + a.size, w)) ||
            j0 + ph > static_cast<std::uint64_t>(std::min(a.y0 + a.size, h)))
          r.fail("payload rectangle outside its node");
        p->rect = {static_cast<int>(i0), static_cast<int>(j0), static_cast<int>(i0 + pw), static_cast<int>(j0 + ph)};
        std::vector<std::uint64_t> c(pw * ph);
        for (auto& x : c) {
          x = r.get_varint();
          seen_segs += x;
          if (seen_segs > segs) r.fail("more segments than announced");
        }
        p->lists.resize(c.size());
        counts.emplace_back(p.get(), std::move(c));
        n.payload = std::move(p);
      } else if (tag != 0) {
        r.fail("bad node tag");
      }
    };
    rec(t.root_, t.root_area(), 0);
    if (seen_nodes != nodes) r.fail("node count mismatch");
    if (seen_segs != segs) r.fail("segment count mismatch");
    if (r.remaining() != segs * 64) r.fail("segment block size mismatch");
    for (auto& [p, c] : counts)
      for (std::size_t k = 0; k < c.size(); ++k) {
        const int i = p->rect.i0 + static_cast<int>(k % static_cast<std::size_t>(p->rect.width()));
        const int j = p->rect.j0 + static_cast<int>(k / static_cast<std::size_t>(p->rect.width()));
        auto& l = p->lists[k];
        l.resize(c[k]);
        for (auto& s : l) {
          s.pixel = {instance, i, j};
          s.x_in = r.get<double>();
          s.x_out = r.get<double>();
          for (auto& ch : s.ch) {
            ch.A = r.get<double>();
            ch.B = r.get<double>();
          }
        }
        if (!is_ordered(l)) r.fail("pixel list not ordered");
      }
    return t;
  }

 private:
  struct Node {
    std::unique_ptr<std::array<Node, 4>> kids;
    std::unique_ptr<RectPayload> payload;
    bool leaf() const { return !kids; }
    bool empty() const {
      if (payload) return false;
      if (kids)
        for (const auto& k : *kids)
          if (!k.empty()) return false;
      return true;
    }
  };

  struct Area {
    int x0 = 0, y0 = 0, size = 1;
    Area child(int c) const {
      const int s = size / 2;
      return {x0 + (c & 1) * s, y0 + (c >> 1) * s, s};
    }
    PixelRect rect() const { return {x0, y0, x0 + size, y0 + size}; }
  };

  Area root_area() const { return {0, 0, 1 << L_}; }

  static bool union_is_rect(const PixelRect& a, const PixelRect& b) {
    const auto u = a.unite(b);
    return u.area() == a.area() + b.area() - a.intersect(b).area();
  }

  static void merge_payload(RectPayload& dst, RectPayload&& src) {
    RectPayload m;
    m.rect = dst.rect.unite(src.rect);
    m.lists.resize(static_cast<std::size_t>(m.rect.area()));
    for (int j = dst.rect.j0; j < dst.rect.j1; ++j)
      for (int i = dst.rect.i0; i < dst.rect.i1; ++i) m.at(i, j) = std::move(dst.at(i, j));
    for (int j = src.rect.j0; j < src.rect.j1; ++j)
      for (int i = src.rect.i0; i < src.rect.i1; ++i) {
        auto& l = m.at(i, j);
        l = l.empty() ? std::move(src.at(i, j)) : merge_lists(l, src.at(i, j));
      }
    dst = std::move(m);
  }

  void insert(Node& n, Area a, RectPayload&& p) {
    if (p.rect.empty()) return;
    if (n.leaf()) {
      if (!n.payload) {
        // descend to the smallest node enclosing the rectangle
        if (a.size > 1) {
          for (int c = 0; c < 4; ++c)
            if (a.child(c).rect().intersect(p.rect) == p.rect) {
              n.kids = std::make_unique<std::array<Node, 4>>();
              insert((*n.kids)[static_cast<std::size_t>(c)], a.child(c), std::move(p));
              return;
            }
        }
        n.payload = std::make_unique<RectPayload>(std::move(p));
        return;
      }
      if (union_is_rect(n.payload->rect, p.rect)) {
        merge_payload(*n.payload, std::move(p));
        return;
      }
      auto own = std::move(n.payload);
      n.kids = std::make_unique<std::array<Node, 4>>();
      distribute(n, a, std::move(*own));
    }
    distribute(n, a, std::move(p));
  }

  void distribute(Node& n, Area a, RectPayload&& p) {
    for (int c = 0; c < 4; ++c) {
      const Area ca = a.child(c);
      auto piece = p.take(ca.rect());
      if (!piece.rect.empty()) insert((*n.kids)[static_cast<std::size_t>(c)], ca, std::move(piece));
    }
  }

  void insert_all(Node& dst, Area a, Node&& src) {
    if (src.payload) insert(dst, a, std::move(*src.payload));
    if (src.kids)
      for (int c = 0; c < 4; ++c) insert_all(dst, a, std::move((*src.kids)[static_cast<std::size_t>(c)]));
  }

  void merge_node(Node& x, Area a, Node&& y) {
    if (y.empty()) return;
    if (x.empty()) {
      x = std::move(y);
      return;
    }
    if (!x.leaf() && !y.leaf()) {
      for (int c = 0; c < 4; ++c)
        merge_node((*x.kids)[static_cast<std::size_t>(c)], a.child(c), std::move((*y.kids)[static_cast<std::size_t>(c)]));
      return;
    }
    insert_all(x, a, std::move(y));
  }

  /// Node at the given level covering area a, creating the path as needed.
  Node& node_at(int level, Area a) {
    Node* n = &root_;
    Area cur = root_area();
    for (int l = 0; l < level; ++l) {
      if (!n->kids) n->kids = std::make_unique<std::array<Node, 4>>();
      const int c = (a.x0 >= cur.x0 + cur.size / 2 ? 1 : 0) + (a.y0 >= cur.y0 + cur.size / 2 ? 2 : 0);
      cur = cur.child(c);
      n = &(*n->kids)[static_cast<std::size_t>(c)];
    }
    return *n;
  }

  int instance_ = 0;
  int w_ = 1, h_ = 1;
  int L_ = 0;
  int tile_ = -1;
  Node root_;
};

inline ImageSegmentTree merge_trees(ImageSegmentTree a, ImageSegmentTree b) {
  return ImageSegmentTree::merge(std::move(a), std::move(b));
}

}  // namespace octray
