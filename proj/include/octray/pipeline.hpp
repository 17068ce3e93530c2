#pragma once

// Parallel rendering of a partitioned forest into one image per instance.
//
// Phases, in order: copy the visible leaves into a visualization forest and
// repartition it by pixel count; render every visible leaf into per-instance
// segment trees; optionally coarsen and repartition a few times; send the
// segments to the ranks owning the image tiles they touch; composite and
// write the tiles into PPM files.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "octray/bytes.hpp"
#include "octray/forest.hpp"
#include "octray/geometry.hpp"
#include "octray/integrators.hpp"
#include "octray/runtime.hpp"
#include "octray/segment_algebra.hpp"
#include "octray/segment_store.hpp"

namespace octray {

inline constexpr Tag kTagPrepartition = 0x0101;
inline constexpr Tag kTagCoarsen = 0x0102;
inline constexpr Tag kTagComposite = 0x0103;

// ---------------------------------------------------------------------------
// configuration

struct Background {
  std::array<double, kChannels> color{0, 0, 0};
  int checker_cells = 0;  ///< > 0 selects the cube-face checker skybox
  std::array<std::array<double, kChannels>, 3> checker{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};

  /// Background intensity seen along world direction `dir`.
  std::array<double, kChannels> at(Vec3 dir) const {
    if (checker_cells <= 0) return color;
    int axis = 0;
    for (int k = 1; k < 3; ++k)
      if (std::abs(dir[k]) > std::abs(dir[axis])) axis = k;
    const double m = std::abs(dir[axis]);
    if (!(m > 0)) return color;
    const int face = 2 * axis + (dir[axis] > 0 ? 1 : 0);
    const int p = axis == 0 ? 1 : 0, q = axis == 2 ? 1 : 2;
    auto cell = [&](double s) {
      const int c = static_cast<int>(std::floor((s / m + 1) * 0.5 * checker_cells));
      return std::clamp(c, 0, checker_cells - 1);
    };
    return checker[static_cast<std::size_t>((cell(dir[p]) + cell(dir[q]) + face) % 3)];
  }
};

struct ImageInstance {
  int id = 0;  ///< used in the output file name
  Camera camera;
  Background background;
};

struct RenderConfig {
  int coarsen_cycles = 0;
  std::uint64_t min_leaves_per_rank = 1;  ///< coarsening stops below this average
  int writers = 1;
  IntegratorConfig integrator;
  bool skip_prepartition = false;
  std::string output_prefix;  ///< empty: tiles are composited but not written

  void validate(int num_ranks) const {
    if (coarsen_cycles < 0) throw std::invalid_argument("coarsening cycles must be >= 0");
    if (writers < 1 || writers > num_ranks)
      throw std::invalid_argument("writers must be between 1 and the number of ranks");
    integrator.validate();
  }
};

// ---------------------------------------------------------------------------
// scene interface

/// Every scene provides its tree geometry and a per-leaf data codec.
template <class S>
concept SceneBase = requires(const S& s, const typename S::Data& d, ByteWriter& w, ByteReader& r) {
  { s.dim() } -> std::convertible_to<int>;
  { s.trees() } -> std::convertible_to<const std::vector<ControlPointGrid>&>;
  S::marshal(d, w);
  { S::unmarshal(r) } -> std::convertible_to<typename S::Data>;
};

/// Volume scenes give optical coefficients at a world point.
template <class S>
concept VolumeScene = SceneBase<S> && requires(const S& s, const typename S::Data& d, Vec3 p, int inst) {
  { s.coefficients(d, p, inst) } -> std::convertible_to<ChannelCoefficients>;
};

/// Surface scenes give a material at local element coordinates.
template <class S>
concept SurfaceScene = SceneBase<S> && requires(const S& s, const typename S::Data& d, double t, int inst) {
  { s.material(d, t, t, inst) } -> std::convertible_to<SurfaceMaterial>;
};

// ---------------------------------------------------------------------------
// view geometry

struct LeafKeyHash {
  std::size_t operator()(const LeafKey& k) const {
    std::uint64_t h = k.morton * 0x9e3779b97f4a7c15ull;
    h ^= (static_cast<std::uint64_t>(static_cast<std::uint32_t>(k.tree)) << 8 | static_cast<std::uint64_t>(k.level)) +
         0x7f4a7c159e3779b9ull + (h << 6) + (h >> 2);
    return static_cast<std::size_t>(h);
  }
};

/// Camera-space tree geometry per instance plus a per-render cache of node
/// pixel rectangles.
class ViewGeometry {
 public:
  ViewGeometry(int dim, const std::vector<ControlPointGrid>& trees, const std::vector<ImageInstance>& instances)
      : dim_(dim), instances_(&instances) {
    for (const auto& g : trees) bases_.emplace_back(g.degree);
    for (const auto& inst : instances) {
      inst.camera.validate();
      std::vector<ControlPointGrid> cam;
      for (const auto& g : trees) cam.push_back(transform_control_points(inst.camera, g));
      camera_grids_.push_back(std::move(cam));
    }
  }

  int dim() const { return dim_; }
  int num_instances() const { return static_cast<int>(instances_->size()); }
  int num_trees() const { return static_cast<int>(bases_.size()); }
  const ImageInstance& instance(int k) const { return (*instances_)[static_cast<std::size_t>(k)]; }
  const ControlPointGrid& camera_grid(int k, int tree) const {
    return camera_grids_[static_cast<std::size_t>(k)][static_cast<std::size_t>(tree)];
  }
  const LagrangeBasis& basis(int tree) const { return bases_[static_cast<std::size_t>(tree)]; }

  /// Pixel rectangle of a node per instance.
  const std::vector<PixelRect>& rects(const LeafKey& key) {
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    std::vector<PixelRect> r;
    const Subcube sc = octree::subcube(dim_, key);
    for (int k = 0; k < num_instances(); ++k)
      r.push_back(project_to_pixels(element_aabb(camera_grid(k, key.tree), basis(key.tree), sc), instance(k).camera));
    return cache_.emplace(key, std::move(r)).first->second;
  }

  bool visible(const LeafKey& key) {
    for (const auto& r : rects(key))
      if (!r.empty()) return true;
    return false;
  }

  std::size_t cache_size() const { return cache_.size(); }

 private:
  int dim_;
  const std::vector<ImageInstance>* instances_;
  std::vector<LagrangeBasis> bases_;
  std::vector<std::vector<ControlPointGrid>> camera_grids_;
  std::unordered_map<LeafKey, std::vector<PixelRect>, LeafKeyHash> cache_;
};

// ---------------------------------------------------------------------------
// tiles

struct TileId {
  int instance = 0, ti = 0, tj = 0;
  friend auto operator<=>(const TileId&, const TileId&) = default;
};

/// Square 2^t tiles over every instance image, owned round-robin by the
/// first `writers` ranks in row-major order per instance.
class TileLayout {
 public:
  TileLayout() = default;
  TileLayout(const std::vector<ImageInstance>& instances, int writers) : writers_(writers) {
    if (instances.empty()) throw std::invalid_argument("at least one image instance required");
    int L = 1 << 30;
    for (const auto& i : instances) L = std::min(L, depth_for(i.camera.w, i.camera.h));
    auto count = [&](int t) {
      std::size_t n = 0;
      for (const auto& i : instances) n += tiles_along(i.camera.w, t) * tiles_along(i.camera.h, t);
      return n;
    };
    t_ = choose_tile_exponent(L, writers, count);
    int first = 0;
    for (const auto& i : instances) {
      first_.push_back(first);
      cols_.push_back(static_cast<int>(tiles_along(i.camera.w, t_)));
      rows_.push_back(static_cast<int>(tiles_along(i.camera.h, t_)));
      w_.push_back(i.camera.w);
      h_.push_back(i.camera.h);
      first += cols_.back() * rows_.back();
    }
    total_ = first;
  }

  int exponent() const { return t_; }
  int size() const { return 1 << t_; }
  int writers() const { return writers_; }
  int total_tiles() const { return total_; }

  int owner(const TileId& id) const {
    const auto k = static_cast<std::size_t>(id.instance);
    return (first_[k] + id.tj * cols_[k] + id.ti) % writers_;
  }

  PixelRect rect(const TileId& id) const {
    const int T = size();
    const auto k = static_cast<std::size_t>(id.instance);
    return PixelRect{id.ti * T, id.tj * T, std::min((id.ti + 1) * T, w_[k]), std::min((id.tj + 1) * T, h_[k])};
  }

  template <class F>
  void for_each_tile(int instance, const PixelRect& r, F&& fn) const {
    if (r.empty()) return;
    const int t = t_;
    for (int tj = r.j0 >> t; tj <= (r.j1 - 1) >> t; ++tj)
      for (int ti = r.i0 >> t; ti <= (r.i1 - 1) >> t; ++ti) fn(TileId{instance, ti, tj});
  }

  /// The single tile containing r, if any.
  std::optional<TileId> single_tile(int instance, const PixelRect& r) const {
    if (r.empty()) return std::nullopt;
    const int t = t_;
    if ((r.i0 >> t) != ((r.i1 - 1) >> t) || (r.j0 >> t) != ((r.j1 - 1) >> t)) return std::nullopt;
    return TileId{instance, r.i0 >> t, r.j0 >> t};
  }

  std::vector<TileId> tiles_of(int rank) const {
    std::vector<TileId> out;
    for (std::size_t k = 0; k < first_.size(); ++k)
      for (int tj = 0; tj < rows_[k]; ++tj)
        for (int ti = 0; ti < cols_[k]; ++ti) {
          const TileId id{static_cast<int>(k), ti, tj};
          if (owner(id) == rank) out.push_back(id);
        }
    return out;
  }

  /// Whether r meets a tile owned by `rank` in this instance.
  bool touches_rank(int instance, const PixelRect& r, int rank) const {
    bool hit = false;
    for_each_tile(instance, r, [&](const TileId& id) { hit = hit || owner(id) == rank; });
    return hit;
  }

 private:
  static std::size_t tiles_along(int n, int t) { return static_cast<std::size_t>(((n - 1) >> t) + 1); }

  int t_ = 0;
  int writers_ = 1;
  int total_ = 0;
  std::vector<int> first_, cols_, rows_, w_, h_;
};

// ---------------------------------------------------------------------------
// visualization forest payload

template <class Data>
struct VPayload {
  Data data{};
  std::uint64_t pixels = 0;               ///< visible pixel count over all instances
  std::vector<ImageSegmentTree> images;   ///< one per instance once rendered

  std::uint64_t segments() const {
    std::uint64_t n = 0;
    for (const auto& t : images) n += t.segment_count();
    return n;
  }
};

template <class Scene>
void marshal_vpayload(const VPayload<typename Scene::Data>& p, ByteWriter& w) {
  Scene::marshal(p.data, w);
  w.put_varint(p.pixels);
  w.put_varint(p.images.size());
  for (const auto& t : p.images) {
    const Bytes b = t.marshal();
    w.put_varint(b.size());
    w.put_bytes(b.data(), b.size());
  }
}

template <class Scene>
VPayload<typename Scene::Data> unmarshal_vpayload(ByteReader& r) {
  VPayload<typename Scene::Data> p;
  p.data = Scene::unmarshal(r);
  p.pixels = r.get_varint();
  const auto n = r.get_varint();
  if (n > 4096) r.fail("vforest payload: implausible instance count");
  for (std::uint64_t k = 0; k < n; ++k) {
    const auto len = r.get_varint();
    if (len > r.remaining()) r.fail("vforest payload: segment tree length exceeds message");
    Bytes b(static_cast<std::size_t>(len));
    r.get_bytes(b.data(), b.size());
    p.images.push_back(ImageSegmentTree::unmarshal(b));
  }
  return p;
}

// ---------------------------------------------------------------------------
// statistics and output

struct TileImage {
  TileId id;
  PixelRect rect;
  std::vector<double> rgb;  ///< row-major over rect, before clamping and quantization
};

struct RenderStats {
  std::uint64_t input_leaves = 0;
  std::uint64_t vforest_leaves = 0;
  std::uint64_t visible_leaves = 0;
  std::vector<std::uint64_t> segments;  ///< after rendering, then after each coarsening cycle
  int coarsen_cycles_done = 0;
  std::uint64_t sends = 0;              ///< compositing messages sent
  std::uint64_t receives = 0;           ///< compositing messages expected
  std::uint64_t composite_bytes = 0;    ///< compositing bytes sent
  std::vector<std::pair<std::string, double>> phase_seconds;
};

struct RenderOutput {
  RenderStats stats;
  std::vector<TileImage> tiles;
};

// ---------------------------------------------------------------------------
// phase 1: culling and pre-partition

/// Copies the leaves visible in any instance into a new, minimally completed
/// forest, repartitioned by visible pixel count. The input is not modified.
template <SceneBase Scene>
Forest<VPayload<typename Scene::Data>> cull_prepartition(const Forest<typename Scene::Data>& input, ViewGeometry& geo,
                                                         Comm& comm, bool keep_families, bool skip = false) {
  using Data = typename Scene::Data;
  using VP = VPayload<Data>;
  auto pixels_of = [&](const LeafKey& k) {
    std::uint64_t n = 0;
    for (const auto& r : geo.rects(k)) n += static_cast<std::uint64_t>(r.area());
    return n;
  };

  if (skip) {
    Forest<VP> vf(input.dim(), input.num_trees(), comm.rank(), comm.size());
    for (const auto& l : input.leaves()) {
      const auto px = pixels_of(l.key);
      vf.leaves().push_back({l.key, px > 0, VP{l.payload, px, {}}});
    }
    vf.set_markers(input.markers());
    return vf;
  }

  std::vector<Leaf<VP>> visible;
  input.search_local([&](const LeafKey& node) { return geo.visible(node); },
                     [&](const Leaf<Data>& l, std::size_t) {
                       const auto px = pixels_of(l.key);
                       if (px > 0) visible.push_back({l.key, true, VP{l.payload, px, {}}});
                     });
  auto vf = build_complete(input.dim(), input.num_trees(), std::move(visible), comm);
  std::vector<std::uint64_t> w;
  w.reserve(vf.leaves().size());
  for (const auto& l : vf.leaves()) w.push_back(l.payload.pixels);
  const auto plan = partition_weighted(vf, w, comm, keep_families);
  return transfer<VP>(std::move(vf), plan, comm, marshal_vpayload<Scene>, unmarshal_vpayload<Scene>, kTagPrepartition);
}

// ---------------------------------------------------------------------------
// phase 2: leaf rendering

namespace detail {

/// Ray parameter intervals inside a 3D element, from its six faces.
inline std::vector<std::pair<double, double>> element_chords(const std::array<std::array<Vec3, 4>, 6>& faces, Vec3 r) {
  std::vector<double> a;
  IntersectOptions opt;
  opt.closed_domain = true;
  for (const auto& f : faces)
    for (const auto& h : intersect_ray_bilinear(f, r, {}, opt)) a.push_back(h.alpha);
  std::sort(a.begin(), a.end());
  std::vector<double> u;
  for (double x : a)
    if (u.empty() || std::abs(x - u.back()) > 1e-9 * std::max(1.0, std::abs(x))) u.push_back(x);
  std::vector<std::pair<double, double>> out;
  for (std::size_t k = 0; k + 1 < u.size(); k += 2) out.emplace_back(u[k], u[k + 1]);
  return out;
}

inline std::string leaf_name(const LeafKey& k) {
  return "(" + std::to_string(k.tree) + ", " + std::to_string(k.level) + ", " + std::to_string(k.morton) + ")";
}

}  // namespace detail

/// Segments of every pixel in each instance rectangle of one leaf.
template <SceneBase Scene>
void render_leaf(Leaf<VPayload<typename Scene::Data>>& leaf, const Scene& scene, ViewGeometry& geo,
                 const IntegratorConfig& cfg, int tile_exponent) {
  const auto& key = leaf.key;
  const auto rects = geo.rects(key);
  const Subcube sc = octree::subcube(scene.dim(), key);
  const auto& basis = geo.basis(key.tree);
  auto& images = leaf.payload.images;
  for (int k = 0; k < geo.num_instances(); ++k) {
    const auto& inst = geo.instance(k);
    const Camera& cam = inst.camera;
    if (static_cast<int>(images.size()) <= k) {
      images.emplace_back(k, cam.w, cam.h);
      images.back().set_tile_exponent(tile_exponent);
    }
    const PixelRect& rect = rects[static_cast<std::size_t>(k)];
    if (rect.empty()) continue;
    const auto& cg = geo.camera_grid(k, key.tree);

    std::array<std::array<Vec3, 4>, 6> faces{};
    std::array<Vec3, 4> patch{};
    if constexpr (VolumeScene<Scene>) {
      for (int f = 0; f < 6; ++f) faces[static_cast<std::size_t>(f)] = volume_face_corners(cg, basis, sc, f);
    } else {
      patch = surface_corners(cg, basis, sc);
    }

    std::vector<PixelList> lists(static_cast<std::size_t>(rect.area()));
    PixelRect used;
    for (int j = rect.j0; j < rect.j1; ++j)
      for (int i = rect.i0; i < rect.i1; ++i) {
        auto& list = lists[static_cast<std::size_t>(j - rect.j0) * static_cast<std::size_t>(rect.width()) +
                           static_cast<std::size_t>(i - rect.i0)];
        const PixelIndex pix{k, i, j};
        const Vec3 rc = ray_direction_camera(cam, i, j);
        try {
          if constexpr (VolumeScene<Scene>) {
            const Vec3 rw = ray_direction_world(cam, i, j);
            const double rn = norm(rw);
            for (auto [a0, a1] : detail::element_chords(faces, rc)) {
              a0 = std::max(a0, 1.0);
              a1 = std::min(a1, cam.alpha_max());
              if (!(a1 > a0)) continue;
              // x runs from the far end toward the camera
              auto field = [&](double x) { return scene.coefficients(leaf.payload.data, cam.o + (a1 - x / rn) * rw, k); };
              const auto res = segeval(field, 0.0, (a1 - a0) * rn, cfg);
              list.push_back(RaySegment{pix, a0, a1, res.seg});
            }
          } else {
            IntersectOptions opt;
            opt.alpha_min = 1.0;
            opt.alpha_max = cam.alpha_max();
            for (const auto& h : intersect_ray_bilinear(patch, rc, {}, opt)) {
              if (!(h.cos_phi > 0)) continue;
              const SurfaceMaterial m = scene.material(leaf.payload.data, h.t1, h.t2, k);
              list.push_back(RaySegment{pix, h.alpha, h.alpha, surface_segment(m, h.cos_phi)});
            }
          }
        } catch (const IntegratorError& e) {
          throw IntegratorError("leaf " + detail::leaf_name(key) + " pixel (" + std::to_string(i) + ", " +
                                std::to_string(j) + ") instance " + std::to_string(k) + ": " + e.what());
        }
        if (list.size() > 1)
          std::sort(list.begin(), list.end(), [](const RaySegment& a, const RaySegment& b) { return a.x_in < b.x_in; });
        if (!list.empty()) used = used.unite(PixelRect{i, j, i + 1, j + 1});
      }
    if (used.empty()) continue;
    std::vector<PixelList> kept;
    kept.reserve(static_cast<std::size_t>(used.area()));
    for (int j = used.j0; j < used.j1; ++j)
      for (int i = used.i0; i < used.i1; ++i)
        kept.push_back(std::move(lists[static_cast<std::size_t>(j - rect.j0) * static_cast<std::size_t>(rect.width()) +
                                       static_cast<std::size_t>(i - rect.i0)]));
    images[static_cast<std::size_t>(k)].insert_rect(used, std::move(kept));
  }
}

namespace detail {

inline bool node_is_local(int dim, std::span<const PartitionMarker> markers, int me, const LeafKey& node) {
  const auto m = static_cast<std::size_t>(me);
  return !(node.position() < markers[m]) && octree::last_position(dim, node) < markers[m + 1];
}

}  // namespace detail

/// Top-down pass over the local visible leaves. With `receivers`, records
/// the owners of the tiles this rank's content may reach: a local node whose
/// rectangle lies in one tile records that tile's owner for its subtree,
/// leaves record every tile their rectangle touches. With `on_leaf`, calls
/// it for every visible leaf.
template <class VP>
void visible_traversal(Forest<VP>& vf, ViewGeometry& geo, const TileLayout& tiles, std::set<int>* receivers,
                       const std::function<void(Leaf<VP>&)>& on_leaf) {
  const int dim = vf.dim(), me = vf.rank(), K = geo.num_instances();
  const std::uint32_t all = (std::uint32_t{1} << K) - 1;
  const auto& markers = vf.markers();
  struct Frame {
    LeafKey key;
    std::uint32_t resolved;
  };
  std::vector<Frame> stack;
  auto parent_mask = [&](const LeafKey& node) -> std::uint32_t {
    while (!stack.empty() && !octree::contains(dim, stack.back().key, node)) stack.pop_back();
    return stack.empty() ? 0u : stack.back().resolved;
  };
  auto visit = [&](const LeafKey& node) {
    if (!geo.visible(node)) return false;
    if (!receivers) return true;
    std::uint32_t mask = parent_mask(node);
    const auto& r = geo.rects(node);
    const bool local = detail::node_is_local(dim, markers, me, node);
    for (int k = 0; k < K; ++k) {
      if (mask >> k & 1u) continue;
      const auto& rk = r[static_cast<std::size_t>(k)];
      if (rk.empty()) {
        mask |= 1u << k;
      } else if (local) {
        if (auto t = tiles.single_tile(k, rk)) {
          receivers->insert(tiles.owner(*t));
          mask |= 1u << k;
        }
      }
    }
    stack.push_back({node, mask});
    return on_leaf || mask != all;
  };
  auto leaf = [&](Leaf<VP>& l, std::size_t) {
    if (!l.visible) return;
    if (receivers) {
      const std::uint32_t mask = parent_mask(l.key);
      const auto& r = geo.rects(l.key);
      for (int k = 0; k < K; ++k)
        if (!(mask >> k & 1u))
          tiles.for_each_tile(k, r[static_cast<std::size_t>(k)], [&](const TileId& t) { receivers->insert(tiles.owner(t)); });
    }
    if (on_leaf) on_leaf(l);
  };
  vf.search_local(visit, leaf);
}

/// Renders every visible local leaf; returns the number of segments made.
template <SceneBase Scene>
std::uint64_t render_leaves(Forest<VPayload<typename Scene::Data>>& vf, const Scene& scene, ViewGeometry& geo,
                            const IntegratorConfig& cfg, const TileLayout& tiles, std::set<int>* receivers = nullptr) {
  using VP = VPayload<typename Scene::Data>;
  std::uint64_t n = 0;
  visible_traversal<VP>(vf, geo, tiles, receivers, [&](Leaf<VP>& l) {
    render_leaf(l, scene, geo, cfg, tiles.exponent());
    n += l.payload.segments();
  });
  return n;
}

// ---------------------------------------------------------------------------
// phase 3: coarsening and post-partition

template <SceneBase Scene>
Forest<VPayload<typename Scene::Data>> coarsen_postpartition(Forest<VPayload<typename Scene::Data>>&& vf,
                                                             const RenderConfig& cfg, Comm& comm, RenderStats& stats) {
  using VP = VPayload<typename Scene::Data>;
  const int P = comm.size();
  for (int c = 0; c < cfg.coarsen_cycles; ++c) {
    ByteWriter w;
    w.put<std::uint64_t>(vf.leaves().size());
    std::uint64_t total = 0;
    for (const auto& b : comm.allgather(w.take())) total += ByteReader(b).get<std::uint64_t>();
    if (total < cfg.min_leaves_per_rank * static_cast<std::uint64_t>(P)) break;

    vf.coarsen([](const LeafKey&, std::span<Leaf<VP>> kids) {
      VP out;
      for (auto& kid : kids) {
        out.pixels += kid.payload.pixels;
        auto& im = kid.payload.images;
        for (std::size_t k = 0; k < im.size(); ++k) {
          if (out.images.size() <= k) {
            out.images.push_back(std::move(im[k]));
          } else {
            out.images[k] = merge_trees(std::move(out.images[k]), std::move(im[k]));
          }
        }
      }
      for (auto& t : out.images) t.compact_all();
      return out;
    });

    std::vector<std::uint64_t> weights;
    weights.reserve(vf.leaves().size());
    for (const auto& l : vf.leaves()) weights.push_back(l.payload.segments());
    const auto plan = partition_weighted(vf, weights, comm, c + 1 < cfg.coarsen_cycles);
    vf = transfer<VP>(std::move(vf), plan, comm, marshal_vpayload<Scene>, unmarshal_vpayload<Scene>, kTagCoarsen);

    std::uint64_t segs = 0;
    for (const auto& l : vf.leaves()) segs += l.payload.segments();
    stats.segments.push_back(segs);
    ++stats.coarsen_cycles_done;
  }
  return std::move(vf);
}

// ---------------------------------------------------------------------------
// phase 4: discovery

/// Send side: every receiver whose sender search would list this rank. The
/// walk follows the partition like search_partition and keeps, per path,
/// the writers whose tiles each node's rectangle still touches.
inline std::set<int> expected_receivers(int dim, int num_trees, std::span<const PartitionMarker> markers, int me,
                                        ViewGeometry& geo, const TileLayout& tiles) {
  std::set<int> out;
  const int W = tiles.writers(), K = geo.num_instances();
  std::function<void(const LeafKey&, const std::vector<char>&)> rec = [&](const LeafKey& node,
                                                                           const std::vector<char>& alive) {
    const int pf = owner_of(markers, node.position());
    const int pl = owner_of(markers, octree::last_position(dim, node));
    if (me < pf || me > pl) return;
    const auto& r = geo.rects(node);
    std::vector<char> now(static_cast<std::size_t>(W), 0);
    bool any = false;
    for (int q = 0; q < W; ++q) {
      if (!alive[static_cast<std::size_t>(q)]) continue;
      for (int k = 0; k < K && !now[static_cast<std::size_t>(q)]; ++k)
        if (tiles.touches_rank(k, r[static_cast<std::size_t>(k)], q)) now[static_cast<std::size_t>(q)] = 1;
      any = any || now[static_cast<std::size_t>(q)];
    }
    if (!any) return;
    if (pf == pl || node.level == max_level(dim)) {
      if (pf == me)
        for (int q = 0; q < W; ++q)
          if (now[static_cast<std::size_t>(q)]) out.insert(q);
      return;
    }
    for (int c = 0; c < (1 << dim); ++c) rec(octree::child(dim, node, c), now);
  };
  const std::vector<char> start(static_cast<std::size_t>(W), 1);
  for (std::int32_t t = 0; t < num_trees; ++t) rec(octree::root(t), start);
  return out;
}

/// Receive side: ranks that may hold content inside one of my tiles.
inline std::set<int> determine_senders(int dim, int num_trees, std::span<const PartitionMarker> markers, int me,
                                       ViewGeometry& geo, const TileLayout& tiles) {
  std::set<int> out;
  if (me >= tiles.writers()) return out;
  const int K = geo.num_instances();
  search_partition(
      dim, num_trees, markers,
      [&](const LeafKey& node, int, int) {
        const auto& r = geo.rects(node);
        for (int k = 0; k < K; ++k)
          if (tiles.touches_rank(k, r[static_cast<std::size_t>(k)], me)) return true;
        return false;
      },
      [&](const LeafKey&, int p) { out.insert(p); });
  return out;
}

struct SendSummary {
  std::set<int> receivers;
  std::uint64_t bytes = 0;
  std::uint64_t fragments = 0;
};

/// Cuts the local segment trees at tile lines, merges them per tile and
/// posts one message per receiver; receivers without content get an empty
/// message.
template <class VP>
SendSummary post_fragments(Forest<VP>& vf, const std::set<int>& discovered, const std::set<int>& expected,
                           const TileLayout& tiles, Comm& comm) {
  for (int q : discovered)
    if (!expected.count(q))
      throw std::logic_error("discovery: receiver " + std::to_string(q) + " would not expect rank " +
                             std::to_string(comm.rank()));
  std::map<TileId, ImageSegmentTree> acc;
  for (auto& l : vf.leaves()) {
    auto& images = l.payload.images;
    for (std::size_t k = 0; k < images.size(); ++k) {
      if (images[k].empty()) continue;
      for (auto& [tile, frag] : std::move(images[k]).split_tiles(tiles.exponent())) {
        const TileId id{static_cast<int>(k), tile.first, tile.second};
        auto it = acc.find(id);
        if (it == acc.end()) {
          acc.emplace(id, std::move(frag));
        } else {
          it->second = merge_trees(std::move(it->second), std::move(frag));
        }
      }
    }
    images.clear();
  }
  std::map<int, std::vector<std::pair<TileId, const ImageSegmentTree*>>> by_owner;
  for (const auto& [id, t] : acc) {
    const int q = tiles.owner(id);
    if (!discovered.count(q))
      throw std::logic_error("discovery: segments for tile owner " + std::to_string(q) + " without a recorded receiver");
    by_owner[q].push_back({id, &t});
  }
  SendSummary s;
  s.receivers = expected;
  for (int q : expected) {
    ByteWriter w;
    const auto& frags = by_owner[q];
    w.put_varint(frags.size());
    for (const auto& [id, t] : frags) {
      w.put_varint(static_cast<std::uint64_t>(id.instance));
      w.put_varint(static_cast<std::uint64_t>(id.ti));
      w.put_varint(static_cast<std::uint64_t>(id.tj));
      const Bytes b = t->marshal();
      w.put_varint(b.size());
      w.put_bytes(b.data(), b.size());
      ++s.fragments;
    }
    s.bytes += w.size();
    comm.post_send(q, kTagComposite, w.take());
  }
  return s;
}

// ---------------------------------------------------------------------------
// phase 5: compositing and output

inline std::uint8_t quantize(double I) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(I, 0.0, 1.0) * 255.0));
}

inline std::string ppm_header(int w, int h) { return "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n"; }

inline std::string image_path(const std::string& prefix, int id) { return prefix + "_" + std::to_string(id) + ".ppm"; }

/// Creates every instance file at full size, header included.
inline void create_image_files(const std::vector<ImageInstance>& instances, const std::string& prefix) {
  for (const auto& inst : instances) {
    const std::string path = image_path(prefix, inst.id);
    const std::string head = ppm_header(inst.camera.w, inst.camera.h);
    {
      std::ofstream f(path, std::ios::binary | std::ios::trunc);
      if (!f || !f.write(head.data(), static_cast<std::streamsize>(head.size())))
        throw std::runtime_error("cannot create " + path);
    }
    std::error_code ec;
    std::filesystem::resize_file(
        path, head.size() + static_cast<std::uintmax_t>(inst.camera.w) * static_cast<std::uintmax_t>(inst.camera.h) * 3, ec);
    if (ec) throw std::runtime_error("cannot size " + path + ": " + ec.message());
  }
}

/// Writes a tile at its byte offsets; rows run top to bottom in the file.
inline void write_tile(const std::string& path, int w, int h, const TileImage& tile) {
  std::FILE* f = std::fopen(path.c_str(), "r+b");
  if (!f) throw std::runtime_error("cannot open " + path + ": " + std::strerror(errno));
  const std::size_t head = ppm_header(w, h).size();
  const PixelRect& r = tile.rect;
  std::vector<std::uint8_t> row(static_cast<std::size_t>(r.width()) * 3);
  for (int j = r.j0; j < r.j1; ++j) {
    for (int i = r.i0; i < r.i1; ++i)
      for (int c = 0; c < 3; ++c)
        row[static_cast<std::size_t>(i - r.i0) * 3 + static_cast<std::size_t>(c)] = quantize(
            tile.rgb[(static_cast<std::size_t>(j - r.j0) * static_cast<std::size_t>(r.width()) +
                      static_cast<std::size_t>(i - r.i0)) * 3 + static_cast<std::size_t>(c)]);
    const long off = static_cast<long>(head + (static_cast<std::size_t>(h - 1 - j) * static_cast<std::size_t>(w) +
                                               static_cast<std::size_t>(r.i0)) * 3);
    if (std::fseek(f, off, SEEK_SET) != 0 || std::fwrite(row.data(), 1, row.size(), f) != row.size()) {
      const std::string err = std::strerror(errno);
      std::fclose(f);
      throw std::runtime_error("write failed: " + path + " at offset " + std::to_string(off) + ": " + err);
    }
  }
  if (std::fclose(f) != 0) throw std::runtime_error("close failed: " + path);
}

/// Receives the fragments of this rank's tiles, merging them as they
/// arrive, and turns each pixel into an intensity.
inline std::vector<TileImage> composite_tiles(Comm& comm, const std::set<int>& senders, ViewGeometry& geo,
                                              const TileLayout& tiles) {
  const int me = comm.rank();
  std::map<TileId, ImageSegmentTree> acc;
  std::vector<RecvHandle> recvs;
  std::vector<int> from;
  for (int p : senders) {
    recvs.push_back(comm.post_recv(p, kTagComposite));
    from.push_back(p);
  }
  for (std::size_t done = 0; done < recvs.size(); ++done) {
    const std::size_t idx = comm.wait_any(recvs);
    ByteReader r(recvs[idx].data);
    const auto n = r.get_varint();
    for (std::uint64_t f = 0; f < n; ++f) {
      TileId id;
      id.instance = static_cast<int>(r.get_varint());
      id.ti = static_cast<int>(r.get_varint());
      id.tj = static_cast<int>(r.get_varint());
      if (id.instance < 0 || id.instance >= geo.num_instances()) r.fail("composite: instance out of range");
      const auto len = r.get_varint();
      if (len > r.remaining()) r.fail("composite: fragment length exceeds message");
      Bytes b(static_cast<std::size_t>(len));
      r.get_bytes(b.data(), b.size());
      auto frag = ImageSegmentTree::unmarshal(b);
      if (tiles.owner(id) != me)
        throw std::logic_error("composite: rank " + std::to_string(me) + " received a tile it does not own");
      const PixelRect tr = tiles.rect(id);
      frag.for_each_payload([&](const RectPayload& p) {
        if (!tr.contains(p.rect))
          throw std::logic_error("composite: segments outside the tile from rank " + std::to_string(from[idx]));
      });
      auto it = acc.find(id);
      if (it == acc.end()) {
        acc.emplace(id, std::move(frag));
      } else {
        it->second = merge_trees(std::move(it->second), std::move(frag));
      }
    }
    if (!r.done()) r.fail("composite: trailing bytes from rank " + std::to_string(from[idx]));
    recvs[idx].data.clear();
  }

  std::vector<TileImage> out;
  for (const TileId& id : tiles.tiles_of(me)) {
    const auto& inst = geo.instance(id.instance);
    TileImage img{id, tiles.rect(id), {}};
    const auto W = static_cast<std::size_t>(img.rect.width());
    std::vector<Segment3> seg(static_cast<std::size_t>(img.rect.area()), identity_segment3());
    if (auto it = acc.find(id); it != acc.end())
      it->second.for_each_pixel([&](int i, int j, const PixelList& l) {
        seg[static_cast<std::size_t>(j - img.rect.j0) * W + static_cast<std::size_t>(i - img.rect.i0)] = finalize_pixel(l);
      });
    img.rgb.resize(seg.size() * 3);
    for (int j = img.rect.j0; j < img.rect.j1; ++j)
      for (int i = img.rect.i0; i < img.rect.i1; ++i) {
        const std::size_t p = static_cast<std::size_t>(j - img.rect.j0) * W + static_cast<std::size_t>(i - img.rect.i0);
        const auto bg = inst.background.at(normalized(ray_direction_world(inst.camera, i, j)));
        for (int c = 0; c < kChannels; ++c)
          img.rgb[p * 3 + static_cast<std::size_t>(c)] = apply_background(seg[p][static_cast<std::size_t>(c)], bg[static_cast<std::size_t>(c)]);
      }
    out.push_back(std::move(img));
  }
  return out;
}

// ---------------------------------------------------------------------------
// the whole render

/// Collective over all ranks of `comm`; `input` is this rank's part of the
/// scene forest and is not modified.
template <SceneBase Scene>
RenderOutput render(const Forest<typename Scene::Data>& input, const Scene& scene,
                    const std::vector<ImageInstance>& instances, const RenderConfig& cfg, Comm& comm) {
  static_assert(VolumeScene<Scene> || SurfaceScene<Scene>, "scene must provide coefficients or materials");
  using Clock = std::chrono::steady_clock;
  cfg.validate(comm.size());
  if (instances.size() > 31) throw std::invalid_argument("at most 31 image instances");
  RenderOutput out;
  auto& st = out.stats;
  auto t0 = Clock::now();
  auto lap = [&](const char* name) {
    const auto t1 = Clock::now();
    st.phase_seconds.emplace_back(name, std::chrono::duration<double>(t1 - t0).count());
    t0 = t1;
  };

  ViewGeometry geo(scene.dim(), scene.trees(), instances);
  const TileLayout tiles(instances, cfg.writers);
  st.input_leaves = input.leaves().size();

  auto vf = cull_prepartition<Scene>(input, geo, comm, cfg.coarsen_cycles > 0, cfg.skip_prepartition);
  st.vforest_leaves = vf.leaves().size();
  for (const auto& l : vf.leaves()) st.visible_leaves += l.visible ? 1 : 0;
  lap("prepartition");

  const bool fused = cfg.coarsen_cycles == 0;
  std::set<int> discovered;
  st.segments.push_back(render_leaves(vf, scene, geo, cfg.integrator, tiles, fused ? &discovered : nullptr));
  for (auto& l : vf.leaves()) l.payload.data = typename Scene::Data{};
  lap("render");

  if (!fused) {
    vf = coarsen_postpartition<Scene>(std::move(vf), cfg, comm, st);
    lap("coarsen");
    visible_traversal<VPayload<typename Scene::Data>>(vf, geo, tiles, &discovered, nullptr);
  }

  const auto expected = expected_receivers(vf.dim(), vf.num_trees(), vf.markers(), comm.rank(), geo, tiles);
  const auto sent = post_fragments(vf, discovered, expected, tiles, comm);
  st.sends = sent.receivers.size();
  st.composite_bytes = sent.bytes;
  const auto senders = determine_senders(vf.dim(), vf.num_trees(), vf.markers(), comm.rank(), geo, tiles);
  st.receives = senders.size();
  lap("discovery");

  if (!cfg.output_prefix.empty() && comm.rank() == 0) create_image_files(instances, cfg.output_prefix);
  if (!cfg.output_prefix.empty()) comm.barrier();
  out.tiles = composite_tiles(comm, senders, geo, tiles);
  if (!cfg.output_prefix.empty()) {
    for (const auto& t : out.tiles) {
      const auto& inst = instances[static_cast<std::size_t>(t.id.instance)];
      write_tile(image_path(cfg.output_prefix, inst.id), inst.camera.w, inst.camera.h, t);
    }
    comm.barrier();
  }
  lap("composite");
  return out;
}

// ---------------------------------------------------------------------------
// reading results back

/// Full-image intensities of one instance from all ranks' tiles; pixel
/// (i, j) at index 3 (j w + i).
inline std::vector<double> assemble_instance(const std::vector<TileImage>& tiles, int instance, int w, int h) {
  std::vector<double> img(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3,
                          std::numeric_limits<double>::quiet_NaN());
  for (const auto& t : tiles) {
    if (t.id.instance != instance) continue;
    for (int j = t.rect.j0; j < t.rect.j1; ++j)
      for (int i = t.rect.i0; i < t.rect.i1; ++i)
        for (int c = 0; c < 3; ++c)
          img[(static_cast<std::size_t>(j) * static_cast<std::size_t>(w) + static_cast<std::size_t>(i)) * 3 +
              static_cast<std::size_t>(c)] =
              t.rgb[(static_cast<std::size_t>(j - t.rect.j0) * static_cast<std::size_t>(t.rect.width()) +
                     static_cast<std::size_t>(i - t.rect.i0)) * 3 + static_cast<std::size_t>(c)];
  }
  return img;
}

struct PpmImage {
  int w = 0, h = 0;
  std::vector<std::uint8_t> rgb;  ///< file order: top row first

  /// Channel c of pixel (i, j), j counted upward from the bottom row.
  std::uint8_t at(int i, int j, int c) const {
    return rgb[(static_cast<std::size_t>(h - 1 - j) * static_cast<std::size_t>(w) + static_cast<std::size_t>(i)) * 3 +
               static_cast<std::size_t>(c)];
  }
};

inline PpmImage read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string magic;
  PpmImage img;
  int maxval = 0;
  f >> magic >> img.w >> img.h >> maxval;
  if (!f || magic != "P6" || img.w < 1 || img.h < 1 || maxval != 255) throw std::runtime_error("bad PPM header in " + path);
  if (f.get() != '\n') throw std::runtime_error("bad PPM header in " + path);
  img.rgb.resize(static_cast<std::size_t>(img.w) * static_cast<std::size_t>(img.h) * 3);
  if (!f.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size())))
    throw std::runtime_error("truncated PPM " + path);
  if (f.peek() != std::char_traits<char>::eof()) throw std::runtime_error("trailing bytes in PPM " + path);
  return img;
}

}  // namespace octray
