#pragma once

#include <string>
#include <vector>

#include "dvs/kernels.hpp"

namespace dvs {

// Feature-conditioned normalization: standardize the main branch with batch
// statistics, then scale and shift every site with maps convolved from a side
// feature.  One side feature serves every such layer in a network.

template <typename T>
struct DfnmLayer {
  Tensor<T> trunk_w, trunk_b;  // (hidden, side_channels, 3, 3) shared stem
  Tensor<T> gamma_w, gamma_b;  // (C, hidden, 3, 3) per-site scale head
  Tensor<T> beta_w, beta_b;    // (C, hidden, 3, 3) per-site offset head
};

template <typename T>
DfnmLayer<T> make_dfnm_layer(long c_main, long c_side, long hidden,
                             std::mt19937_64& g) {
  DfnmLayer<T> L;
  L.trunk_w = param_normal<T>({hidden, c_side, 3, 3}, g, 0.02);
  L.trunk_b = param_zeros<T>({hidden});
  L.gamma_w = param_normal<T>({c_main, hidden, 3, 3}, g, 0.02);
  // scale head starts at 1 so a fresh layer behaves like a plain norm site
  L.gamma_b = Tensor<T>::full({c_main}, T(1), true);
  L.beta_w = param_normal<T>({c_main, hidden, 3, 3}, g, 0.02);
  L.beta_b = param_zeros<T>({c_main});
  return L;
}

template <typename T>
void collect_dfnm_layer(const DfnmLayer<T>& L, const std::string& prefix,
                        NamedParams<T>& out) {
  out.emplace_back(prefix + ".trunk.w", L.trunk_w);
  out.emplace_back(prefix + ".trunk.b", L.trunk_b);
  out.emplace_back(prefix + ".gamma.w", L.gamma_w);
  out.emplace_back(prefix + ".gamma.b", L.gamma_b);
  out.emplace_back(prefix + ".beta.w", L.beta_w);
  out.emplace_back(prefix + ".beta.b", L.beta_b);
}

// Average-pool or nearest-upsample by exact powers of two until the side map
// matches (th, tw); anything else is a wiring error.
template <typename T>
Tensor<T> match_spatial(Tensor<T> side, long th, long tw) {
  DVS_CHECK(side.rank() == 4, "match_spatial: expects rank-4, got ",
            shape_str(side.shape()));
  const long sh = side.dim(2), sw = side.dim(3);
  auto pow2_ratio = [](long big, long small) {
    if (small <= 0 || big % small != 0) return -1l;
    const long r = big / small;
    return (r & (r - 1)) == 0 ? r : -1l;
  };
  if (sh >= th) {
    const long r = pow2_ratio(sh, th);
    DVS_CHECK(r > 0 && pow2_ratio(sw, tw) == r, "match_spatial: cannot pool ", sh, "x",
              sw, " to ", th, "x", tw);
    for (long k = r; k > 1; k /= 2) side = down_avg2(side);
  } else {
    const long r = pow2_ratio(th, sh);
    DVS_CHECK(r > 0 && pow2_ratio(tw, sw) == r, "match_spatial: cannot upsample ", sh,
              "x", sw, " to ", th, "x", tw);
    for (long k = r; k > 1; k /= 2) side = up_nearest2(side);
  }
  DVS_CHECK(side.dim(2) == th && side.dim(3) == tw, "match_spatial: resampled to ",
            side.dim(2), "x", side.dim(3), " instead of ", th, "x", tw);
  return side;
}

template <typename T>
Tensor<T> dfnm_forward(const Tensor<T>& h, const Tensor<T>& f_side,
                       const DfnmLayer<T>& L) {
  DVS_CHECK(h.rank() == 4 && f_side.rank() == 4,
            "dfnm_forward: expects rank-4 inputs, got ", shape_str(h.shape()), " and ",
            shape_str(f_side.shape()));
  DVS_CHECK(h.dim(0) == f_side.dim(0), "dfnm_forward: batch mismatch, ", h.dim(0),
            " vs ", f_side.dim(0));
  Tensor<T> side = match_spatial(f_side, h.dim(2), h.dim(3));
  Tensor<T> hn = normalize(h, NormKind::batch_stats);
  Tensor<T> a = lrelu(conv2d_same(side, L.trunk_w, L.trunk_b));
  Tensor<T> gm = conv2d_same(a, L.gamma_w, L.gamma_b);
  Tensor<T> bt = conv2d_same(a, L.beta_w, L.beta_b);
  DVS_CHECK(same_shape(gm.shape(), hn.shape()), "dfnm_forward: heads emit ",
            shape_str(gm.shape()), " for feature ", shape_str(hn.shape()));
  return add(mul(gm, hn), bt);
}

// Channel-preserving residual block: norm, lrelu, conv, twice, plus skip.
template <typename T>
struct DfnmResBlock {
  DfnmLayer<T> norm1, norm2;
  Tensor<T> conv1_w, conv1_b;  // (C, C, 3, 3)
  Tensor<T> conv2_w, conv2_b;  // (C, C, 3, 3)
};

template <typename T>
DfnmResBlock<T> make_dfnm_res_block(long c_main, long c_side, long hidden,
                                    std::mt19937_64& g) {
  DfnmResBlock<T> B;
  B.norm1 = make_dfnm_layer<T>(c_main, c_side, hidden, g);
  B.norm2 = make_dfnm_layer<T>(c_main, c_side, hidden, g);
  B.conv1_w = param_normal<T>({c_main, c_main, 3, 3}, g, 0.02);
  B.conv1_b = param_zeros<T>({c_main});
  B.conv2_w = param_normal<T>({c_main, c_main, 3, 3}, g, 0.02);
  B.conv2_b = param_zeros<T>({c_main});
  return B;
}

template <typename T>
void collect_dfnm_res_block(const DfnmResBlock<T>& B, const std::string& prefix,
                            NamedParams<T>& out) {
  collect_dfnm_layer(B.norm1, prefix + ".norm1", out);
  collect_dfnm_layer(B.norm2, prefix + ".norm2", out);
  out.emplace_back(prefix + ".conv1.w", B.conv1_w);
  out.emplace_back(prefix + ".conv1.b", B.conv1_b);
  out.emplace_back(prefix + ".conv2.w", B.conv2_w);
  out.emplace_back(prefix + ".conv2.b", B.conv2_b);
}

template <typename T>
Tensor<T> residual_block_dfnm(const Tensor<T>& h, const Tensor<T>& f_side,
                              const DfnmResBlock<T>& B) {
  Tensor<T> t = conv2d_same(lrelu(dfnm_forward(h, f_side, B.norm1)), B.conv1_w,
                            B.conv1_b);
  Tensor<T> u = conv2d_same(lrelu(dfnm_forward(t, f_side, B.norm2)), B.conv2_w,
                            B.conv2_b);
  DVS_CHECK(same_shape(u.shape(), h.shape()), "residual_block_dfnm: inner path emits ",
            shape_str(u.shape()), " for input ", shape_str(h.shape()));
  return add(h, u);
}

}  // namespace dvs
