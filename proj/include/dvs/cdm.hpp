#pragma once

#include <string>
#include <vector>

#include "dvs/kernels.hpp"

namespace dvs {

// Conditional deformable module: a label-conditioned MLP emits 1x1 group
// filters, those filters turn a projected feature map into per-tap 2D flows,
// and a deformable convolution warps the input feature under that flow.
// Output is the warped map concatenated with the untouched input (2C channels).

// ---- flow-filter variants ----

// separate_xy: two filters, each convolving 9 groups (one per tap).
// shared_xy: one filter over 18 groups; the first 9 become dx, the rest dy.
enum class CfcVariant { separate_xy, shared_xy };

inline const char* cfc_variant_name(CfcVariant v) {
  return v == CfcVariant::separate_xy ? "separate_xy" : "shared_xy";
}

struct CdmConfig {
  long views = 8;        // label vocabulary size
  long channels = 128;   // main feature channels C
  long c_prime = 225;    // flow feature channels; the group count divides it
  CfcVariant variant = CfcVariant::separate_xy;
  bool share_psi_eg = false;  // decoder aliases the encoder's label MLPs
  long noise_dim = 128;
  long hidden = 128;     // label MLP width

  long flow_groups() const { return variant == CfcVariant::separate_xy ? 9 : 18; }
  long filter_len() const { return c_prime / flow_groups(); }

  void validate() const {
    DVS_CHECK(views >= 2, "cdm: need at least 2 views, got ", views);
    DVS_CHECK(channels > 0 && c_prime > 0 && noise_dim > 0 && hidden > 0,
              "cdm: all widths must be positive");
    DVS_CHECK(c_prime % flow_groups() == 0, "cdm: flow feature channels ", c_prime,
              " not divisible by ", flow_groups(), " groups (", cfc_variant_name(variant),
              ")");
  }
};

// ---- label MLP ----

// fc, concat fresh noise, pixel norm, fc.  Output length equals the group
// filter length the flow stage consumes.
template <typename T>
struct Psi {
  Tensor<T> fc1_w, fc1_b;  // (hidden, views), (hidden)
  Tensor<T> fc2_w, fc2_b;  // (filter_len, hidden + noise_dim), (filter_len)

  bool defined() const { return fc1_w.defined(); }
};

template <typename T>
Psi<T> make_psi(long views, long hidden, long noise_dim, long out_len,
                std::mt19937_64& g) {
  Psi<T> p;
  p.fc1_w = param_normal<T>({hidden, views}, g, 0.02);
  p.fc1_b = param_zeros<T>({hidden});
  p.fc2_w = param_normal<T>({out_len, hidden + noise_dim}, g, 0.02);
  p.fc2_b = param_zeros<T>({out_len});
  return p;
}

template <typename T>
void collect_psi(const Psi<T>& p, const std::string& prefix, NamedParams<T>& out) {
  out.emplace_back(prefix + ".fc1.w", p.fc1_w);
  out.emplace_back(prefix + ".fc1.b", p.fc1_b);
  out.emplace_back(prefix + ".fc2.w", p.fc2_w);
  out.emplace_back(prefix + ".fc2.b", p.fc2_b);
}

template <typename T>
Tensor<T> psi_forward(const Psi<T>& psi, const Tensor<T>& y_onehot,
                      const Tensor<T>& noise) {
  DVS_CHECK(psi.defined(), "psi_forward: uninitialized label MLP");
  DVS_CHECK(y_onehot.rank() == 2 && noise.rank() == 2,
            "psi_forward: expects rank-2 labels and noise, got ",
            shape_str(y_onehot.shape()), " and ", shape_str(noise.shape()));
  DVS_CHECK(y_onehot.dim(1) == psi.fc1_w.dim(1), "psi_forward: label width ",
            y_onehot.dim(1), " does not match vocabulary ", psi.fc1_w.dim(1));
  DVS_CHECK(noise.dim(0) == y_onehot.dim(0), "psi_forward: batch mismatch, labels ",
            y_onehot.dim(0), " vs noise ", noise.dim(0));
  DVS_CHECK(psi.fc1_w.dim(0) + noise.dim(1) == psi.fc2_w.dim(1),
            "psi_forward: noise width ", noise.dim(1), " does not fit second layer ",
            shape_str(psi.fc2_w.shape()));
  Tensor<T> h = fc(y_onehot, psi.fc1_w, psi.fc1_b);
  Tensor<T> cat = concat(1, {h, noise});
  const long N = cat.dim(0), D = cat.dim(1);
  Tensor<T> pn = reshape(normalize(reshape(cat, {N, D, 1, 1}), NormKind::pixel), {N, D});
  return fc(pn, psi.fc2_w, psi.fc2_b);
}

// ---- conditional flow computation ----

template <typename T>
struct FlowField {
  Tensor<T> dx, dy;  // (N, 9, H, W), x rightward, y downward, in pixels
};

// separate_xy convolves the same 9 feature groups with each filter, so tied
// filters force dx == dy.  shared_xy splits the features into 18 groups and
// convolves all of them with the one filter.
template <typename T>
FlowField<T> cfc(const Tensor<T>& fprime, const Tensor<T>& wx, const Tensor<T>& wy,
                 CfcVariant variant) {
  DVS_CHECK(fprime.rank() == 4, "cfc: expects rank-4 flow features, got ",
            shape_str(fprime.shape()));
  const long C = fprime.dim(1);
  if (variant == CfcVariant::separate_xy) {
    DVS_CHECK(C % 9 == 0, "cfc: flow feature channels ", C, " not divisible by 9");
    return {kgconv(fprime, wx, 9), kgconv(fprime, wy, 9)};
  }
  DVS_CHECK(C % 18 == 0, "cfc: flow feature channels ", C, " not divisible by 18");
  DVS_CHECK(wx.node() == wy.node(), "cfc: shared_xy takes a single filter");
  Tensor<T> both = kgconv(fprime, wx, 18);
  return {slice(both, 1, 0, 9), slice(both, 1, 9, 9)};
}

// ---- module ----

template <typename T>
struct Cdm {
  CdmConfig cfg;
  Psi<T> psi_x, psi_y;         // psi_y stays empty under shared_xy
  Tensor<T> flow_w, flow_b;    // (c_prime, C, 3, 3) projection to flow features
  Tensor<T> deform_w, deform_b;  // (C, C, 3, 3) filters applied at warped taps
};

template <typename T>
Cdm<T> make_cdm(const CdmConfig& cfg, std::mt19937_64& g) {
  cfg.validate();
  Cdm<T> m;
  m.cfg = cfg;
  m.psi_x = make_psi<T>(cfg.views, cfg.hidden, cfg.noise_dim, cfg.filter_len(), g);
  if (cfg.variant == CfcVariant::separate_xy)
    m.psi_y = make_psi<T>(cfg.views, cfg.hidden, cfg.noise_dim, cfg.filter_len(), g);
  m.flow_w = param_normal<T>({cfg.c_prime, cfg.channels, 3, 3}, g, 0.02);
  m.flow_b = param_zeros<T>({cfg.c_prime});
  m.deform_w = param_normal<T>({cfg.channels, cfg.channels, 3, 3}, g, 0.02);
  m.deform_b = param_zeros<T>({cfg.channels});
  return m;
}

// include_psi=false lets a caller that aliases the label MLPs register them
// once under its own prefix.
template <typename T>
void collect_cdm(const Cdm<T>& m, const std::string& prefix, NamedParams<T>& out,
                 bool include_psi = true) {
  if (include_psi) {
    collect_psi(m.psi_x, prefix + ".psi_x", out);
    if (m.psi_y.defined()) collect_psi(m.psi_y, prefix + ".psi_y", out);
  }
  out.emplace_back(prefix + ".flow.w", m.flow_w);
  out.emplace_back(prefix + ".flow.b", m.flow_b);
  out.emplace_back(prefix + ".deform.w", m.deform_w);
  out.emplace_back(prefix + ".deform.b", m.deform_b);
}

template <typename T>
struct CdmOut {
  Tensor<T> out;     // (N, 2C, H, W): warped map then untouched input
  Tensor<T> dx, dy;  // (N, 9, H, W) flows actually applied
  Tensor<T> wx, wy;  // (N, filter_len) filters fed to the flow stage
};

// Forward with externally supplied filters; interpolation feeds blends here.
template <typename T>
CdmOut<T> cdm_forward_with_filters(const Cdm<T>& m, const Tensor<T>& f,
                                   const Tensor<T>& wx, const Tensor<T>& wy) {
  DVS_CHECK(f.rank() == 4, "cdm_forward: expects rank-4 features, got ",
            shape_str(f.shape()));
  DVS_CHECK(f.dim(1) == m.cfg.channels, "cdm_forward: feature channels ", f.dim(1),
            " do not match configured ", m.cfg.channels);
  Tensor<T> fprime = conv2d_same(f, m.flow_w, m.flow_b);
  FlowField<T> flow = cfc(fprime, wx, wy, m.cfg.variant);
  Tensor<T> fd = deformable_conv3x3(f, flow.dx, flow.dy, m.deform_w, m.deform_b);
  CdmOut<T> o;
  o.out = concat(1, {fd, f});
  o.dx = flow.dx;
  o.dy = flow.dy;
  o.wx = wx;
  o.wy = wy;
  return o;
}

// One noise draw serves both label MLPs of the module.
template <typename T>
CdmOut<T> cdm_forward(const Cdm<T>& m, const Tensor<T>& f, const Tensor<T>& y_onehot,
                      const Tensor<T>& noise) {
  Tensor<T> wx = psi_forward(m.psi_x, y_onehot, noise);
  Tensor<T> wy = m.cfg.variant == CfcVariant::separate_xy
                     ? psi_forward(m.psi_y, y_onehot, noise)
                     : wx;
  return cdm_forward_with_filters(m, f, wx, wy);
}

}  // namespace dvs
