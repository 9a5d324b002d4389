#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dvs/png_io.hpp"
#include "dvs/random.hpp"
#include "dvs/tensor.hpp"

namespace dvs {

// Procedural "spinner" dataset: each identity is an irregular striped polygon;
// a view rotates it by view * (360 / V) degrees.  Attributes are drawn per
// identity from the dataset seed, so (seed, identity, view) fixes every pixel.

struct SpinnerSpec {
  long size = 32;
  long views = 8;
  long identities = 100;
  std::uint64_t seed = 1;

  void validate() const {
    DVS_CHECK(size >= 8, "spinner: image size ", size, " too small");
    DVS_CHECK(views >= 2, "spinner: need at least 2 views, got ", views);
    DVS_CHECK(identities >= 1, "spinner: need at least 1 identity");
  }
};

namespace spin_detail {

struct Attrs {
  long nvert;
  double radii[7];
  double phase0;
  double fill[3], stripe[3], bg[3];
  double stripe_freq, stripe_phase;
};

inline Attrs identity_attrs(const SpinnerSpec& spec, long identity) {
  std::seed_seq seq{std::uint64_t(spec.seed), std::uint64_t(0x51a7u),
                    std::uint64_t(identity)};
  std::mt19937_64 g(seq);
  auto uni = [&](double lo, double hi) {
    return lo + (hi - lo) * RngPool::uniform(g);
  };
  Attrs a;
  a.nvert = 3 + long(RngPool::uniform_int(g, 5));  // 3..7
  const double base_r = uni(0.55, 0.80);
  for (long k = 0; k < a.nvert; ++k) a.radii[k] = base_r * uni(0.70, 1.0);
  a.phase0 = uni(0.0, 2.0 * M_PI);
  for (int c = 0; c < 3; ++c) a.fill[c] = uni(0.35, 0.95);
  for (int c = 0; c < 3; ++c) a.stripe[c] = uni(0.0, 0.55);
  const double shade = uni(0.04, 0.22);
  for (int c = 0; c < 3; ++c) a.bg[c] = shade;
  a.stripe_freq = uni(2.5, 6.0) * M_PI;  // cycles across the unit disc
  a.stripe_phase = uni(0.0, 2.0 * M_PI);
  return a;
}

}  // namespace spin_detail

template <typename T>
Tensor<T> render_spinner(const SpinnerSpec& spec, long identity, long view) {
  spec.validate();
  DVS_CHECK(identity >= 0 && identity < spec.identities, "spinner: identity ",
            identity, " out of range");
  DVS_CHECK(view >= 0 && view < spec.views, "spinner: view ", view,
            " out of range");
  const spin_detail::Attrs a = spin_detail::identity_attrs(spec, identity);
  const long S = spec.size;
  const double theta = double(view) * 2.0 * M_PI / double(spec.views);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double half = double(S) / 2.0;

  double vx[7], vy[7];  // object-frame vertices
  for (long k = 0; k < a.nvert; ++k) {
    const double phi = a.phase0 + 2.0 * M_PI * double(k) / double(a.nvert);
    vx[k] = a.radii[k] * std::cos(phi);
    vy[k] = a.radii[k] * std::sin(phi);
  }
  auto inside = [&](double px, double py) {
    // star-shaped around the origin: locate the sector by angle, then take
    // the origin side of that sector's edge
    double ang = std::atan2(py, px) - a.phase0;
    ang -= 2.0 * M_PI * std::floor(ang / (2.0 * M_PI));
    long k = long(ang * double(a.nvert) / (2.0 * M_PI));
    if (k >= a.nvert) k = a.nvert - 1;
    const long k2 = (k + 1) % a.nvert;
    const double ex = vx[k2] - vx[k], ey = vy[k2] - vy[k];
    const double side_p = ex * (py - vy[k]) - ey * (px - vx[k]);
    const double side_o = ex * (0.0 - vy[k]) - ey * (0.0 - vx[k]);
    return side_p * side_o >= 0.0;
  };

  Tensor<T> img = Tensor<T>::leaf({3, S, S});
  const int SS = 4;  // supersamples per axis
  for (long y = 0; y < S; ++y)
    for (long x = 0; x < S; ++x) {
      double acc[3] = {0, 0, 0};
      for (int sy = 0; sy < SS; ++sy)
        for (int sx = 0; sx < SS; ++sx) {
          // normalized centered coords in [-1, 1]
          const double qx =
              (double(x) + (double(sx) + 0.5) / SS - half) / half;
          const double qy =
              (double(y) + (double(sy) + 0.5) / SS - half) / half;
          const double ox = ct * qx + st * qy;   // rotate into object frame
          const double oy = -st * qx + ct * qy;
          const double* col = a.bg;
          if (inside(ox, oy))
            col = std::sin(ox * a.stripe_freq + a.stripe_phase) > 0.0 ? a.stripe
                                                                      : a.fill;
          for (int c = 0; c < 3; ++c) acc[c] += col[c];
        }
      for (long c = 0; c < 3; ++c)
        img.data()[(c * S + y) * S + x] =
            T(acc[c] / double(SS * SS) * 2.0 - 1.0);
    }
  return img;
}

// ---- dataset index ----

struct DataRecord {
  long identity = 0;
  long view = 0;
  std::string path;  // empty for procedural records
};

struct DatasetIndex {
  long views = 0;
  long image_size = 0;
  bool procedural = false;
  SpinnerSpec spinner;
  std::vector<DataRecord> records;
  std::vector<long> train_items, test_items;  // indices into records
  mutable std::vector<std::pair<long, long>> fetch_log;  // (identity, view)

  const std::vector<long>& split(bool train) const {
    return train ? train_items : test_items;
  }

  template <typename T>
  Tensor<T> fetch(long rec_index) const {
    DVS_CHECK(rec_index >= 0 && rec_index < long(records.size()),
              "dataset: record ", rec_index, " out of range");
    const DataRecord& r = records[std::size_t(rec_index)];
    fetch_log.emplace_back(r.identity, r.view);
    if (procedural) return render_spinner<T>(spinner, r.identity, r.view);
    ImageU8 img = read_png_rgb8(r.path);
    DVS_CHECK(img.width == image_size && img.height == image_size, "dataset: '",
              r.path, "' is ", img.width, "x", img.height, ", expected ",
              image_size, "x", image_size);
    return u8_to_chw<T>(img);
  }

  // record index for (identity, view); identity must exist in the index
  long find_record(long identity, long view) const {
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].identity == identity && records[i].view == view)
        return long(i);
    DVS_CHECK(false, "dataset: no record for identity ", identity, " view ",
              view);
    return -1;
  }
};

namespace data_detail {

// identity-disjoint 80/20 assignment by seeded shuffle
inline void split_identities(const std::vector<long>& identities,
                             std::uint64_t seed, std::vector<long>& train,
                             std::vector<long>& test) {
  std::vector<long> ids = identities;
  std::seed_seq seq{seed, std::uint64_t(0x5b117ULL)};
  std::mt19937_64 g(seq);
  for (std::size_t i = ids.size(); i > 1; --i)
    std::swap(ids[i - 1], ids[std::size_t(RngPool::uniform_int(g, long(i)))]);
  long n_train = (long(ids.size()) * 8 + 5) / 10;
  if (n_train < 1) n_train = 1;
  if (n_train == long(ids.size()) && ids.size() > 1) --n_train;
  train.assign(ids.begin(), ids.begin() + n_train);
  test.assign(ids.begin() + n_train, ids.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
}

}  // namespace data_detail

inline DatasetIndex make_spinner_index(const SpinnerSpec& spec) {
  spec.validate();
  DatasetIndex idx;
  idx.views = spec.views;
  idx.image_size = spec.size;
  idx.procedural = true;
  idx.spinner = spec;
  for (long id = 0; id < spec.identities; ++id)
    for (long v = 0; v < spec.views; ++v)
      idx.records.push_back({id, v, ""});
  std::vector<long> ids(std::size_t(spec.identities));
  for (long id = 0; id < spec.identities; ++id) ids[std::size_t(id)] = id;
  std::vector<long> train_ids, test_ids;
  data_detail::split_identities(ids, spec.seed, train_ids, test_ids);
  for (std::size_t i = 0; i < idx.records.size(); ++i) {
    const long id = idx.records[i].identity;
    if (std::binary_search(train_ids.begin(), train_ids.end(), id))
      idx.train_items.push_back(long(i));
    else
      idx.test_items.push_back(long(i));
  }
  return idx;
}

// Layout: <root>/<identity-dir>/<view_index>.png with contiguous views 0..V-1,
// the same V in every identity directory.
inline DatasetIndex load_directory_dataset(const std::string& root,
                                           std::uint64_t split_seed) {
  namespace fs = std::filesystem;
  DVS_CHECK(fs::is_directory(root), "dataset: '", root, "' is not a directory");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  DVS_CHECK(!dirs.empty(), "dataset: '", root, "' has no identity directories");

  DatasetIndex idx;
  idx.procedural = false;
  std::vector<long> identities;
  for (std::size_t d = 0; d < dirs.size(); ++d) {
    std::vector<long> views_found;
    for (const auto& e : fs::directory_iterator(dirs[d])) {
      if (!e.is_regular_file() || e.path().extension() != ".png") continue;
      const std::string stem = e.path().stem().string();
      char* end = nullptr;
      const long v = std::strtol(stem.c_str(), &end, 10);
      DVS_CHECK(end && *end == '\0' && v >= 0, "dataset: '", e.path().string(),
                "' is not named <view_index>.png");
      views_found.push_back(v);
    }
    std::sort(views_found.begin(), views_found.end());
    DVS_CHECK(!views_found.empty(), "dataset: '", dirs[d].string(),
              "' contains no view images");
    for (std::size_t i = 0; i < views_found.size(); ++i)
      DVS_CHECK(views_found[i] == long(i), "dataset: '", dirs[d].string(),
                "' views are not contiguous from 0 (found view ", views_found[i],
                " at position ", i, ")");
    if (d == 0) {
      idx.views = long(views_found.size());
    } else {
      DVS_CHECK(long(views_found.size()) == idx.views, "dataset: '",
                dirs[d].string(), "' has ", views_found.size(),
                " views but earlier identities have ", idx.views);
    }
    const long id = long(d);
    identities.push_back(id);
    for (long v = 0; v < idx.views; ++v)
      idx.records.push_back(
          {id, v, (dirs[d] / (std::to_string(v) + ".png")).string()});
  }
  DVS_CHECK(idx.views >= 2, "dataset: need at least 2 views, found ", idx.views);
  ImageU8 first = read_png_rgb8(idx.records.front().path);
  DVS_CHECK(first.width == first.height, "dataset: '", idx.records.front().path,
            "' is not square");
  idx.image_size = first.width;

  std::vector<long> train_ids, test_ids;
  data_detail::split_identities(identities, split_seed, train_ids, test_ids);
  for (std::size_t i = 0; i < idx.records.size(); ++i) {
    const long id = idx.records[i].identity;
    if (std::binary_search(train_ids.begin(), train_ids.end(), id))
      idx.train_items.push_back(long(i));
    else
      idx.test_items.push_back(long(i));
  }
  return idx;
}

// ---- batches ----

// Carries source images and the two view labels only; there is no slot for a
// target image, so unpaired training cannot touch one.
template <typename T>
struct Batch {
  Tensor<T> x;          // (N, 3, S, S)
  Tensor<T> ya_onehot;  // (N, V)
  Tensor<T> yb_onehot;  // (N, V)
  std::vector<long> identity, y_a, y_b;
};

template <typename T>
Batch<T> sample_unpaired_batch(const DatasetIndex& idx, bool train,
                               std::mt19937_64& g, long n) {
  DVS_CHECK(n >= 2, "sample_unpaired_batch: batch of ", n, "; need at least 2");
  DVS_CHECK(idx.views >= 2, "sample_unpaired_batch: dataset has ", idx.views,
            " views; need at least 2");
  const std::vector<long>& items = idx.split(train);
  DVS_CHECK(!items.empty(), "sample_unpaired_batch: split is empty");
  const long S = idx.image_size, V = idx.views;
  Batch<T> b;
  b.x = Tensor<T>::leaf({n, 3, S, S});
  b.ya_onehot = Tensor<T>::leaf({n, V});
  b.yb_onehot = Tensor<T>::leaf({n, V});
  for (long i = 0; i < n; ++i) {
    const long rec =
        items[std::size_t(RngPool::uniform_int(g, long(items.size())))];
    const DataRecord& r = idx.records[std::size_t(rec)];
    Tensor<T> img = idx.fetch<T>(rec);
    std::copy(img.data(), img.data() + 3 * S * S, b.x.data() + i * 3 * S * S);
    long yb = RngPool::uniform_int(g, V - 1);
    if (yb >= r.view) ++yb;  // uniform over the V-1 other views
    b.identity.push_back(r.identity);
    b.y_a.push_back(r.view);
    b.y_b.push_back(yb);
    b.ya_onehot.data()[i * V + r.view] = T(1);
    b.yb_onehot.data()[i * V + yb] = T(1);
  }
  return b;
}

// Paired variant: additionally fetches the ground-truth target view.
template <typename T>
struct PairedBatch {
  Batch<T> base;
  Tensor<T> x_target;  // (N, 3, S, S)
};

template <typename T>
PairedBatch<T> sample_paired_batch(const DatasetIndex& idx, bool train,
                                   std::mt19937_64& g, long n) {
  PairedBatch<T> p;
  p.base = sample_unpaired_batch<T>(idx, train, g, n);
  const long S = idx.image_size;
  p.x_target = Tensor<T>::leaf({n, 3, S, S});
  for (long i = 0; i < n; ++i) {
    const long rec = idx.find_record(p.base.identity[std::size_t(i)],
                                     p.base.y_b[std::size_t(i)]);
    Tensor<T> img = idx.fetch<T>(rec);
    std::copy(img.data(), img.data() + 3 * S * S,
              p.x_target.data() + i * 3 * S * S);
  }
  return p;
}

// ---- evaluation metrics ----

// mean |a - b| in 8-bit units over [-1,1] inputs
template <typename T>
double eval_l1(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("eval_l1", a, b);
  double acc = 0;
  for (long i = 0; i < a.numel(); ++i)
    acc += std::abs(double(a.data()[i]) - double(b.data()[i]));
  return acc / double(a.numel()) * 127.5;
}

namespace ssim_detail {

inline const std::vector<double>& gaussian11() {
  static const std::vector<double> w = [] {
    std::vector<double> k(121);
    double s = 0;
    for (int y = 0; y < 11; ++y)
      for (int x = 0; x < 11; ++x) {
        const double dy = y - 5, dx = x - 5;
        k[std::size_t(y * 11 + x)] =
            std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
        s += k[std::size_t(y * 11 + x)];
      }
    for (double& v : k) v /= s;
    return k;
  }();
  return w;
}

// one channel on 0..255-scaled planes, valid 11x11 windows
inline double ssim_plane(const std::vector<double>& a,
                         const std::vector<double>& b, long H, long W) {
  const std::vector<double>& win = gaussian11();
  constexpr double C1 = (0.01 * 255) * (0.01 * 255);
  constexpr double C2 = (0.03 * 255) * (0.03 * 255);
  double acc = 0;
  long n = 0;
  for (long y = 0; y + 11 <= H; ++y)
    for (long x = 0; x + 11 <= W; ++x) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int wy = 0; wy < 11; ++wy)
        for (int wx = 0; wx < 11; ++wx) {
          const double wv = win[std::size_t(wy * 11 + wx)];
          const double av = a[std::size_t((y + wy) * W + x + wx)];
          const double bv = b[std::size_t((y + wy) * W + x + wx)];
          mx += wv * av;
          my += wv * bv;
          sxx += wv * av * av;
          syy += wv * bv * bv;
          sxy += wv * av * bv;
        }
      const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
      acc += ((2 * mx * my + C1) * (2 * cxy + C2)) /
             ((mx * mx + my * my + C1) * (vx + vy + C2));
      ++n;
    }
  DVS_CHECK(n > 0, "eval_ssim: image smaller than the 11x11 window");
  return acc / double(n);
}

}  // namespace ssim_detail

// Gaussian-windowed structural similarity, dynamic range 255, averaged over
// channels; inputs in [-1,1]
template <typename T>
double eval_ssim(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("eval_ssim", a, b);
  DVS_CHECK(a.rank() == 3, "eval_ssim: expects (C,H,W), got ",
            shape_str(a.shape()));
  const long C = a.dim(0), H = a.dim(1), W = a.dim(2);
  double acc = 0;
  for (long c = 0; c < C; ++c) {
    std::vector<double> pa(std::size_t(H * W)), pb(std::size_t(H * W));
    for (long i = 0; i < H * W; ++i) {
      pa[std::size_t(i)] = (double(a.data()[c * H * W + i]) + 1.0) * 127.5;
      pb[std::size_t(i)] = (double(b.data()[c * H * W + i]) + 1.0) * 127.5;
    }
    acc += ssim_detail::ssim_plane(pa, pb, H, W);
  }
  return acc / double(C);
}

}  // namespace dvs
