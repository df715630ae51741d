// Sparse regularised keypoint correspondences.
//
// Distinctive points are detected in the fixed image with the Foerstner operator;
// each one gets an NGF matching cost for every displacement of a dense lattice.
// A minimum spanning tree over the keypoints defines a part-based model whose
// exact min-marginals are found by two-pass min-sum belief propagation, with
// quadratic messages evaluated by separable distance transforms. Marginals are
// refined by repeating the search from the moving image and averaging.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <queue>
#include <span>
#include <vector>

#include "pulmoreg/core.hpp"
#include "pulmoreg/correspondence.hpp"
#include "pulmoreg/image.hpp"
#include "pulmoreg/lower_envelope.hpp"
#include "pulmoreg/parallel.hpp"
#include "pulmoreg/transform.hpp"

namespace pulmoreg {

/// Quantised displacements {-half_a..half_a} * step per axis, x-fastest label order.
struct DisplacementLattice {
  double step = 2.0;
  Index3 half{16, 16, 16};

  /// {0, +-step, ..., +-radius}^3.
  static DisplacementLattice cubic(double step, double radius) {
    if (!(step > 0.0) || radius < 0.0) throw ValidationError("lattice step must be positive and radius non-negative");
    const int h = static_cast<int>(std::floor(radius / step + 1e-9));
    return DisplacementLattice{step, {h, h, h}};
  }

  int side(int a) const { return 2 * half[a] + 1; }
  std::size_t size() const {
    return static_cast<std::size_t>(side(0)) * static_cast<std::size_t>(side(1)) * static_cast<std::size_t>(side(2));
  }

  /// Per-axis lattice offsets (in steps, -half..half) of a label.
  Index3 offsets(std::size_t label) const {
    const auto sx = static_cast<std::size_t>(side(0)), sy = static_cast<std::size_t>(side(1));
    return {static_cast<int>(label % sx) - half[0], static_cast<int>((label / sx) % sy) - half[1],
            static_cast<int>(label / (sx * sy)) - half[2]};
  }

  std::size_t label(const Index3& off) const {
    return static_cast<std::size_t>(off[0] + half[0]) +
           static_cast<std::size_t>(side(0)) *
               (static_cast<std::size_t>(off[1] + half[1]) +
                static_cast<std::size_t>(side(1)) * static_cast<std::size_t>(off[2] + half[2]));
  }

  Vec3 displacement(std::size_t label) const {
    const auto o = offsets(label);
    return Vec3{o[0] * step, o[1] * step, o[2] * step};
  }

  std::size_t zero_label() const { return label({0, 0, 0}); }

  /// Label of the opposite displacement.
  std::size_t negated(std::size_t label) const {
    const auto o = offsets(label);
    return this->label({-o[0], -o[1], -o[2]});
  }
};

struct KeypointSet {
  std::vector<Vec3> points;
  std::vector<double> scores;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

struct KeypointOptions {
  /// Structure tensor smoothing (mm).
  double sigma = 1.4;
  /// Non-maximum suppression window: voxels within Chebyshev distance radius.
  int suppression_radius = 3;
  /// Distinctiveness below this counts as flat.
  double min_score = 1e-6;
  /// Keep only the highest-scoring keypoints (0 = no limit).
  std::size_t max_keypoints = 0;
};

/// Foerstner distinctiveness 1 / trace(T^-1), T the smoothed structure tensor.
inline Image3D foerstner_response(const Image3D& img, double sigma_mm) {
  const auto grad = gradient(img);
  const auto& g = img.grid();
  std::array<Image3D, 6> t;
  const int pairs[6][2] = {{0, 0}, {0, 1}, {0, 2}, {1, 1}, {1, 2}, {2, 2}};
  for (int c = 0; c < 6; ++c) {
    Image3D prod(g);
    for (std::size_t i = 0; i < prod.size(); ++i) prod[i] = grad[i][pairs[c][0]] * grad[i][pairs[c][1]];
    t[static_cast<std::size_t>(c)] = smooth_gaussian(prod, sigma_mm);
  }
  Image3D out(g);
  constexpr double kRidge = 1e-12;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double xx = t[0][i] + kRidge, xy = t[1][i], xz = t[2][i];
    const double yy = t[3][i] + kRidge, yz = t[4][i], zz = t[5][i] + kRidge;
    const double det = xx * (yy * zz - yz * yz) - xy * (xy * zz - yz * xz) + xz * (xy * yz - yy * xz);
    // trace(T^-1) = trace(adj T) / det T
    const double adj_trace = (yy * zz - yz * yz) + (xx * zz - xz * xz) + (xx * yy - xy * xy);
    out[i] = (det > 0.0 && adj_trace > 0.0) ? det / adj_trace : 0.0;
  }
  return out;
}

namespace detail {

inline Image3D max_filter(const Image3D& img, int radius) {
  Image3D cur = img, next(img.grid());
  const Index3 n = img.dims();
  for (int axis = 0; axis < 3; ++axis) {
    for (int k = 0; k < n[2]; ++k)
      for (int j = 0; j < n[1]; ++j)
        for (int i = 0; i < n[0]; ++i) {
          const int c[3] = {i, j, k};
          double m = -kInf;
          for (int t = -radius; t <= radius; ++t) {
            int q[3] = {c[0], c[1], c[2]};
            q[axis] += t;
            if (q[axis] < 0 || q[axis] >= n[axis]) continue;
            m = std::max(m, cur(q[0], q[1], q[2]));
          }
          next(i, j, k) = m;
        }
    std::swap(cur, next);
  }
  return cur;
}

}  // namespace detail

/// Foerstner keypoints of `fixed` inside `mask` (both on the same, ideally 1 mm, grid).
/// A voxel survives if its score is the maximum of its suppression window; exact ties
/// are resolved in favour of the lowest linear index.
inline KeypointSet detect_keypoints(const Image3D& fixed, const Image3D& mask, const KeypointOptions& opt = {}) {
  if (!fixed.grid().same_geometry(mask.grid())) throw ValidationError("keypoint image and mask geometries differ");
  const auto score = foerstner_response(fixed, opt.sigma);
  const auto wmax = detail::max_filter(score, opt.suppression_radius);
  const auto& g = fixed.grid();
  const int r = opt.suppression_radius;
  struct Candidate {
    std::size_t index;
    double score;
  };
  std::vector<Candidate> kept;
  for (std::size_t idx = 0; idx < score.size(); ++idx) {
    const double s = score[idx];
    if (!(s > opt.min_score) || s != wmax[idx] || mask[idx] < 0.5) continue;
    const Index3 v = g.coords(idx);
    bool earlier_tie = false;
    for (int dz = -r; dz <= r && !earlier_tie; ++dz)
      for (int dy = -r; dy <= r && !earlier_tie; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int i = v[0] + dx, j = v[1] + dy, k = v[2] + dz;
          if (!g.contains(i, j, k)) continue;
          const std::size_t o = g.index(i, j, k);
          if (o < idx && score[o] == s) {
            earlier_tie = true;
            break;
          }
        }
    if (!earlier_tie) kept.push_back({idx, s});
  }
  if (opt.max_keypoints > 0 && kept.size() > opt.max_keypoints) {
    std::stable_sort(kept.begin(), kept.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
    kept.resize(opt.max_keypoints);
    std::sort(kept.begin(), kept.end(), [](const Candidate& a, const Candidate& b) { return a.index < b.index; });
  }
  KeypointSet out;
  for (const auto& c : kept) {
    out.points.push_back(g.world(g.coords(c.index)));
    out.scores.push_back(c.score);
  }
  return out;
}

/// Per-keypoint vectors of |L| costs, stored contiguously.
template <class T>
class BasicCostVolume {
 public:
  BasicCostVolume() = default;
  BasicCostVolume(std::size_t keypoints, std::size_t labels, T fill = T{})
      : keypoints_(keypoints), labels_(labels), data_(keypoints * labels, fill) {}

  std::size_t keypoints() const { return keypoints_; }
  std::size_t labels() const { return labels_; }
  std::span<T> row(std::size_t k) { return {data_.data() + k * labels_, labels_}; }
  std::span<const T> row(std::size_t k) const { return {data_.data() + k * labels_, labels_}; }
  T& operator()(std::size_t k, std::size_t l) { return data_[k * labels_ + l]; }
  const T& operator()(std::size_t k, std::size_t l) const { return data_[k * labels_ + l]; }

 private:
  std::size_t keypoints_ = 0;
  std::size_t labels_ = 0;
  std::vector<T> data_;
};

using CostVolume = BasicCostVolume<float>;

namespace detail {

// Gradient scaled to the unit eta-norm, extended by the eta component: the NGF
// similarity <a,b>_eta / (|a|_eta |b|_eta) becomes a plain 4-vector dot product.
struct NgfVector {
  float v[4];
};

inline std::vector<NgfVector> ngf_vectors(const Image3D& img, double eta) {
  const auto grad = gradient(img);
  std::vector<NgfVector> out(grad.size());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const Vec3& a = grad[i];
    const double inv = 1.0 / std::sqrt(eta * eta + dot(a, a));
    out[i] = NgfVector{{static_cast<float>(a[0] * inv), static_cast<float>(a[1] * inv), static_cast<float>(a[2] * inv),
                        static_cast<float>(eta * inv)}};
  }
  return out;
}

inline Index3 nearest_voxel(const Grid& g, const Vec3& p) {
  const Vec3 ci = g.continuous_index(p);
  return {static_cast<int>(std::lround(ci[0])), static_cast<int>(std::lround(ci[1])), static_cast<int>(std::lround(ci[2]))};
}

}  // namespace detail

/// Mean NGF residual over a 7^3 patch sampled with stride 2 (64 points) between
/// the fixed image around each point and the moving image displaced by each label.
/// Patch samples outside either image cost 1.
template <class T = float>
BasicCostVolume<T> build_cost_volume(const Image3D& fixed, const Image3D& moving, std::span<const Vec3> points,
                                     const DisplacementLattice& lattice, double eta) {
  if (!fixed.grid().same_geometry(moving.grid())) throw ValidationError("cost volume images must share one grid");
  const auto& g = fixed.grid();
  Index3 step_vox{};
  for (int a = 0; a < 3; ++a) {
    const double r = lattice.step / g.spacing[a];
    step_vox[a] = static_cast<int>(std::lround(r));
    if (std::abs(r - step_vox[a]) > 1e-6 || step_vox[a] < 1)
      throw ValidationError("lattice step must be an integer multiple of the voxel spacing");
  }
  const auto fv = detail::ngf_vectors(fixed, eta);
  const auto mv = detail::ngf_vectors(moving, eta);
  const std::size_t nl = lattice.size();
  BasicCostVolume<T> out(points.size(), nl);
  const Index3 n = g.dims;
  const int sx = lattice.side(0), sy = lattice.side(1), sz = lattice.side(2);
  constexpr int kPatch[4] = {-3, -1, 1, 3};

  parallel::for_blocks(points.size(), [&](const parallel::Block& blk) {
    std::vector<float> sim(nl);
    for (std::size_t kp = blk.begin; kp < blk.end; ++kp) {
      std::fill(sim.begin(), sim.end(), 0.0f);
      const Index3 c = detail::nearest_voxel(g, points[kp]);
      for (int pz : kPatch)
        for (int py : kPatch)
          for (int px : kPatch) {
            const int p[3] = {c[0] + px, c[1] + py, c[2] + pz};
            if (!g.contains(p[0], p[1], p[2])) continue;
            const auto& f = fv[g.index(p[0], p[1], p[2])];
            // Valid label range per axis so that p + d stays inside the moving grid.
            int lo[3], hi[3];
            for (int a = 0; a < 3; ++a) {
              const int h = lattice.half[a];
              // p + (l - h) * step >= 0  and  <= n - 1
              lo[a] = std::max(0, h + static_cast<int>(std::ceil(static_cast<double>(-p[a]) / step_vox[a])));
              hi[a] = std::min(2 * h, h + static_cast<int>(std::floor(static_cast<double>(n[a] - 1 - p[a]) / step_vox[a])));
            }
            if (lo[0] > hi[0] || lo[1] > hi[1] || lo[2] > hi[2]) continue;
            for (int lz = lo[2]; lz <= hi[2]; ++lz) {
              const int qz = p[2] + (lz - lattice.half[2]) * step_vox[2];
              for (int ly = lo[1]; ly <= hi[1]; ++ly) {
                const int qy = p[1] + (ly - lattice.half[1]) * step_vox[1];
                const int qx0 = p[0] + (lo[0] - lattice.half[0]) * step_vox[0];
                const detail::NgfVector* m = &mv[g.index(qx0, qy, qz)];
                float* s = &sim[static_cast<std::size_t>(lo[0] + sx * (ly + sy * lz))];
                const int count = hi[0] - lo[0] + 1;
                const int stride = step_vox[0];
                for (int t = 0; t < count; ++t) {
                  const detail::NgfVector& mm = m[static_cast<std::ptrdiff_t>(t) * stride];
                  const float d = mm.v[0] * f.v[0] + mm.v[1] * f.v[1] + mm.v[2] * f.v[2] + mm.v[3] * f.v[3];
                  s[t] += d * d;
                }
              }
            }
          }
      (void)sz;
      auto row = out.row(kp);
      for (std::size_t l = 0; l < nl; ++l) row[l] = static_cast<T>(1.0 - static_cast<double>(sim[l]) / 64.0);
    }
  });
  return out;
}

template <class T = float>
BasicCostVolume<T> build_cost_volume(const Image3D& fixed, const Image3D& moving, const KeypointSet& keys,
                                     const DisplacementLattice& lattice, double eta) {
  return build_cost_volume<T>(fixed, moving, std::span<const Vec3>(keys.points), lattice, eta);
}

struct SpanningTree {
  int root = 0;
  /// -1 for the root.
  std::vector<int> parent;
  std::vector<std::vector<int>> children;
  /// Weight of the edge to the parent (0 for the root).
  std::vector<double> edge_weight;
  /// Breadth-first order starting at the root.
  std::vector<int> order;

  std::size_t size() const { return parent.size(); }
};

struct MstOptions {
  /// Intensity normaliser of the edge weight.
  double sigma_intensity = 150.0;
  /// Candidate graph: k nearest neighbours by Euclidean distance.
  int neighbours = 10;
};

namespace detail {

struct DisjointSets {
  std::vector<int> parent;
  explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
      x = parent[static_cast<std::size_t>(x)];
    }
    return x;
  }
  bool unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
    return true;
  }
};

struct WeightedEdge {
  double w;
  int a, b;
  bool operator<(const WeightedEdge& o) const {
    if (w != o.w) return w < o.w;
    if (a != o.a) return a < o.a;
    return b < o.b;
  }
};

}  // namespace detail

/// Minimum spanning tree over the k-nearest-neighbour graph with edge weight
/// |x_k - x_q| + |I_k - I_q| / sigma_I; disconnected candidate graphs are joined
/// through their cheapest cross-component edges. Rooted at the point nearest the centroid.
inline SpanningTree build_mst(std::span<const Vec3> points, std::span<const double> intensities,
                              const MstOptions& opt = {}) {
  const std::size_t n = points.size();
  if (n == 0) throw ValidationError("spanning tree needs at least one keypoint");
  if (intensities.size() != n) throw ValidationError("one intensity per keypoint required");
  auto weight = [&](std::size_t a, std::size_t b) {
    return norm(points[a] - points[b]) + std::abs(intensities[a] - intensities[b]) / opt.sigma_intensity;
  };

  std::vector<detail::WeightedEdge> edges;
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(std::max(opt.neighbours, 1)), n - 1);
  std::vector<std::pair<double, int>> dist(n);
  for (std::size_t a = 0; a < n && k > 0; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      const Vec3 d = points[a] - points[b];
      dist[b] = {b == a ? kInf : dot(d, d), static_cast<int>(b)};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    for (std::size_t t = 0; t < k; ++t) {
      const int b = dist[t].second;
      const int lo = std::min(static_cast<int>(a), b), hi = std::max(static_cast<int>(a), b);
      edges.push_back({weight(static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)), lo, hi});
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end(),
                          [](const auto& x, const auto& y) { return x.a == y.a && x.b == y.b; }),
              edges.end());

  detail::DisjointSets sets(n);
  std::vector<std::vector<std::pair<int, double>>> adj(n);
  std::size_t joined = 0;
  for (const auto& e : edges) {
    if (sets.unite(e.a, e.b)) {
      adj[static_cast<std::size_t>(e.a)].push_back({e.b, e.w});
      adj[static_cast<std::size_t>(e.b)].push_back({e.a, e.w});
      ++joined;
    }
  }
  // Join leftover components through their cheapest cross edge.
  while (joined + 1 < n) {
    detail::WeightedEdge best{kInf, -1, -1};
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a + 1; b < n; ++b) {
        if (sets.find(static_cast<int>(a)) == sets.find(static_cast<int>(b))) continue;
        const detail::WeightedEdge e{weight(a, b), static_cast<int>(a), static_cast<int>(b)};
        if (e < best) best = e;
      }
    sets.unite(best.a, best.b);
    adj[static_cast<std::size_t>(best.a)].push_back({best.b, best.w});
    adj[static_cast<std::size_t>(best.b)].push_back({best.a, best.w});
    ++joined;
  }

  Vec3 centroid{};
  for (const auto& p : points) centroid += p;
  centroid *= 1.0 / static_cast<double>(n);
  SpanningTree tree;
  double best = kInf;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = norm(points[i] - centroid);
    if (d < best) {
      best = d;
      tree.root = static_cast<int>(i);
    }
  }
  tree.parent.assign(n, -1);
  tree.children.assign(n, {});
  tree.edge_weight.assign(n, 0.0);
  std::vector<char> seen(n, 0);
  std::queue<int> q;
  q.push(tree.root);
  seen[static_cast<std::size_t>(tree.root)] = 1;
  while (!q.empty()) {
    const int u = q.front();
    q.pop();
    tree.order.push_back(u);
    for (const auto& [v, w] : adj[static_cast<std::size_t>(u)]) {
      if (seen[static_cast<std::size_t>(v)]) continue;
      seen[static_cast<std::size_t>(v)] = 1;
      tree.parent[static_cast<std::size_t>(v)] = u;
      tree.edge_weight[static_cast<std::size_t>(v)] = w;
      tree.children[static_cast<std::size_t>(u)].push_back(v);
      q.push(v);
    }
  }
  return tree;
}

/// Total edge weight of a tree.
inline double tree_weight(const SpanningTree& t) {
  return std::accumulate(t.edge_weight.begin(), t.edge_weight.end(), 0.0);
}

struct DistanceTransformResult {
  std::vector<double> values;
  /// Source label minimising each output entry.
  std::vector<int> argmin;
};

/// g(d) = min_d' f(d') + weight |d - d'|^2 over the lattice (distances in mm), separably per axis.
inline void quadratic_distance_transform(std::span<const double> costs, const DisplacementLattice& lattice, double weight,
                                         std::span<double> out, std::span<int> argmin, EnvelopeWorkspace& ws) {
  const std::size_t nl = lattice.size();
  if (costs.size() != nl || out.size() != nl) throw ValidationError("cost vector does not match lattice");
  const bool want_arg = !argmin.empty();
  const int side[3] = {lattice.side(0), lattice.side(1), lattice.side(2)};
  const int maxside = std::max({side[0], side[1], side[2]});
  std::vector<double> line(static_cast<std::size_t>(maxside)), res(static_cast<std::size_t>(maxside));
  std::vector<int> arg(static_cast<std::size_t>(maxside));
  std::vector<int> src;
  std::vector<int> src_next;
  if (want_arg) {
    src.resize(nl);
    src_next.resize(nl);
    std::iota(src.begin(), src.end(), 0);
  }
  std::copy(costs.begin(), costs.end(), out.begin());
  const std::size_t stride[3] = {1, static_cast<std::size_t>(side[0]), static_cast<std::size_t>(side[0]) * side[1]};
  for (int axis = 0; axis < 3; ++axis) {
    const int len = side[axis];
    if (len == 1) continue;
    const int o1 = axis == 0 ? 1 : 0, o2 = axis == 2 ? 1 : 2;
    for (int b = 0; b < side[o2]; ++b)
      for (int a = 0; a < side[o1]; ++a) {
        const std::size_t start = static_cast<std::size_t>(a) * stride[o1] + static_cast<std::size_t>(b) * stride[o2];
        for (int p = 0; p < len; ++p) line[static_cast<std::size_t>(p)] = out[start + static_cast<std::size_t>(p) * stride[axis]];
        min_convolve_quadratic(std::span<const double>(line.data(), static_cast<std::size_t>(len)), lattice.step, weight,
                               std::span<double>(res.data(), static_cast<std::size_t>(len)),
                               want_arg ? std::span<int>(arg.data(), static_cast<std::size_t>(len)) : std::span<int>{}, ws);
        for (int p = 0; p < len; ++p) {
          const std::size_t at = start + static_cast<std::size_t>(p) * stride[axis];
          out[at] = res[static_cast<std::size_t>(p)];
          if (want_arg) {
            const int from = arg[static_cast<std::size_t>(p)];
            src_next[at] = from < 0 ? -1 : src[start + static_cast<std::size_t>(from) * stride[axis]];
          }
        }
      }
    if (want_arg) std::swap(src, src_next);
  }
  if (want_arg) std::copy(src.begin(), src.end(), argmin.begin());
}

inline DistanceTransformResult quadratic_distance_transform(std::span<const double> costs,
                                                            const DisplacementLattice& lattice, double weight) {
  DistanceTransformResult r;
  r.values.resize(costs.size());
  r.argmin.resize(costs.size());
  EnvelopeWorkspace ws;
  quadratic_distance_transform(costs, lattice, weight, r.values, r.argmin, ws);
  return r;
}

/// Exact min-marginals of the tree model
///   E(d) = sum_k cost_k(d_k) + sum_{edges kq} alpha_kp |d_k - d_q|^2 / w_kq
/// by an upward (leaves to root) and a downward pass of min-sum messages.
template <class T>
BasicCostVolume<T> tree_bp_marginals(const BasicCostVolume<T>& cost, const SpanningTree& tree,
                                     const DisplacementLattice& lattice, double alpha_kp) {
  const std::size_t n = cost.keypoints();
  const std::size_t nl = cost.labels();
  if (tree.size() != n) throw ValidationError("tree and cost volume disagree on keypoint count");
  if (nl != lattice.size()) throw ValidationError("cost volume and lattice disagree on label count");
  BasicCostVolume<T> marg(n, nl);
  BasicCostVolume<T> up(n, nl);
  std::vector<double> h(nl), msg(nl);
  EnvelopeWorkspace ws;
  auto edge_weight = [&](int k) {
    const double w = tree.edge_weight[static_cast<std::size_t>(k)];
    return w > 0.0 ? alpha_kp / w : kInf;
  };
  auto transform = [&](int k) {
    const double w = edge_weight(k);
    if (std::isinf(w)) {
      // Coincident points: displacements must agree.
      std::copy(h.begin(), h.end(), msg.begin());
    } else {
      quadratic_distance_transform(h, lattice, w, msg, {}, ws);
    }
  };

  // Upward: belief of k from its unary and children, message to the parent.
  for (auto it = tree.order.rbegin(); it != tree.order.rend(); ++it) {
    const int k = *it;
    const auto unary = cost.row(static_cast<std::size_t>(k));
    for (std::size_t l = 0; l < nl; ++l) h[l] = unary[l];
    for (int c : tree.children[static_cast<std::size_t>(k)]) {
      const auto m = up.row(static_cast<std::size_t>(c));
      for (std::size_t l = 0; l < nl; ++l) h[l] += m[l];
    }
    auto row = marg.row(static_cast<std::size_t>(k));
    for (std::size_t l = 0; l < nl; ++l) row[l] = static_cast<T>(h[l]);
    if (k == tree.root) continue;
    transform(k);
    auto out = up.row(static_cast<std::size_t>(k));
    for (std::size_t l = 0; l < nl; ++l) out[l] = static_cast<T>(msg[l]);
  }
  // Downward: parent belief without the child's own message.
  for (int q : tree.order) {
    for (int k : tree.children[static_cast<std::size_t>(q)]) {
      const auto mq = marg.row(static_cast<std::size_t>(q));
      const auto uk = up.row(static_cast<std::size_t>(k));
      for (std::size_t l = 0; l < nl; ++l) h[l] = static_cast<double>(mq[l]) - static_cast<double>(uk[l]);
      transform(k);
      auto mk = marg.row(static_cast<std::size_t>(k));
      for (std::size_t l = 0; l < nl; ++l) mk[l] = static_cast<T>(static_cast<double>(mk[l]) + msg[l]);
    }
  }
  return marg;
}

/// Label with minimal energy; ties go to the shorter displacement, then the lower index.
template <class T>
std::size_t argmin_label(std::span<T> energies, const DisplacementLattice& lattice) {
  std::size_t best = 0;
  double best_val = kInf;
  double best_len = kInf;
  for (std::size_t l = 0; l < energies.size(); ++l) {
    const double v = static_cast<double>(energies[l]);
    if (v > best_val) continue;
    const auto o = lattice.offsets(l);
    const double len = static_cast<double>(o[0]) * o[0] + static_cast<double>(o[1]) * o[1] + static_cast<double>(o[2]) * o[2];
    if (v < best_val || len < best_len) {
      best = l;
      best_val = v;
      best_len = len;
    }
  }
  return best;
}

/// Averages forward marginals with backward marginals indexed by the negated displacement.
template <class T>
BasicCostVolume<T> average_marginals(const BasicCostVolume<T>& forward, const BasicCostVolume<T>& backward,
                                     const DisplacementLattice& lattice) {
  if (forward.keypoints() != backward.keypoints() || forward.labels() != backward.labels())
    throw ValidationError("forward and backward marginals differ in shape");
  BasicCostVolume<T> out(forward.keypoints(), forward.labels());
  std::vector<std::size_t> neg(lattice.size());
  for (std::size_t l = 0; l < neg.size(); ++l) neg[l] = lattice.negated(l);
  for (std::size_t k = 0; k < forward.keypoints(); ++k)
    for (std::size_t l = 0; l < forward.labels(); ++l)
      out(k, l) = static_cast<T>(0.5 * (static_cast<double>(forward(k, l)) + static_cast<double>(backward(k, neg[l]))));
  return out;
}

struct KeypointEngineConfig {
  KeypointOptions detection;
  MstOptions tree;
  double lattice_step = 2.0;
  double lattice_radius = 32.0;
  double alpha_kp = 1.0 / 45.0;
  double eta = 12.0;
  /// Run the moving-to-fixed search and average marginals.
  bool symmetric = true;

  DisplacementLattice lattice() const { return DisplacementLattice::cubic(lattice_step, lattice_radius); }
};

inline std::vector<double> intensities_at(const Image3D& img, std::span<const Vec3> points) {
  std::vector<double> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(trilinear_sample(img, p));
  return out;
}

/// Backward search from the forward matches and marginal averaging. `fixed` and
/// `moving_prealigned` share one grid; targets are mapped through `prereg` into the
/// original moving frame.
template <class T>
CorrespondenceSet symmetric_refine(const BasicCostVolume<T>& forward_marginals, const KeypointSet& keys,
                                   const Image3D& fixed, const Image3D& moving_prealigned,
                                   const DisplacementLattice& lattice, double alpha_kp, double eta,
                                   const BSplineTransform* prereg, const MstOptions& tree_opt = {},
                                   bool symmetric = true) {
  const std::size_t n = keys.size();
  CorrespondenceSet out;
  if (n == 0) return out;
  std::vector<Vec3> moved(n);
  for (std::size_t k = 0; k < n; ++k)
    moved[k] = keys.points[k] + lattice.displacement(argmin_label(forward_marginals.row(k), lattice));

  BasicCostVolume<T> energies;
  if (symmetric) {
    BasicCostVolume<T> backward;
    {
      auto back_cost = build_cost_volume<T>(moving_prealigned, fixed, std::span<const Vec3>(moved), lattice, eta);
      const auto back_tree = build_mst(moved, intensities_at(moving_prealigned, moved), tree_opt);
      backward = tree_bp_marginals(back_cost, back_tree, lattice, alpha_kp);
    }
    energies = average_marginals(forward_marginals, backward, lattice);
  } else {
    energies = forward_marginals;
  }

  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t l = argmin_label(energies.row(k), lattice);
    Correspondence c;
    c.source = keys.points[k];
    c.displacement = lattice.displacement(l);
    const Vec3 matched = c.source + c.displacement;
    c.target = prereg ? compose_displacement(*prereg, matched) : matched;
    c.energy = static_cast<double>(energies(k, l));
    out.push_back(c);
  }
  return out;
}

/// Full sparse stage: detection, forward search, tree regularisation and refinement.
inline CorrespondenceSet compute_correspondences(const Image3D& fixed, const Image3D& moving_prealigned,
                                                 const Image3D& fixed_mask, const BSplineTransform* prereg,
                                                 const KeypointEngineConfig& cfg, KeypointSet* detected = nullptr) {
  const auto keys = detect_keypoints(fixed, fixed_mask, cfg.detection);
  if (detected) *detected = keys;
  if (keys.empty()) return {};
  const auto lattice = cfg.lattice();
  CostVolume marg;
  {
    const auto cost = build_cost_volume<float>(fixed, moving_prealigned, keys, lattice, cfg.eta);
    const auto tree = build_mst(keys.points, intensities_at(fixed, keys.points), cfg.tree);
    marg = tree_bp_marginals(cost, tree, lattice, cfg.alpha_kp);
  }
  return symmetric_refine(marg, keys, fixed, moving_prealigned, lattice, cfg.alpha_kp, cfg.eta, prereg, cfg.tree,
                          cfg.symmetric);
}

}  // namespace pulmoreg
