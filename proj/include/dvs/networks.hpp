#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dvs/cdm.hpp"
#include "dvs/dfnm.hpp"
#include "dvs/kernels.hpp"

namespace dvs {

// Encoder, decoder, projection discriminator, and latent classifier sharing
// one width schedule.  Wiring flags select which conditioning modules exist;
// a flag never forks the math of a module that is present.

enum class DecoderVariant { dfnm_only, adain_plus_dfnm };

inline const char* decoder_variant_name(DecoderVariant v) {
  return v == DecoderVariant::dfnm_only ? "dfnm_only" : "adain_plus_dfnm";
}

struct NetworkSpec {
  long image_size = 128;  // power of two, at least 32
  long views = 13;
  long base = 32;    // stem width; the trunk runs at 4*base channels
  long z_dim = 256;
  long fc_mid = 1024;
  long w_dim = 25;   // flow filter length handed to the deformation stage
  long psi_hidden = 128;
  long noise_dim = 128;
  long dfnm_hidden = 128;
  long d_stem = 64, d_b1 = 128, d_b2 = 256, d_b3 = 512, d_final = 512;
  long dac_hidden = 256;
  DecoderVariant decoder_variant = DecoderVariant::dfnm_only;
  CfcVariant cfc_variant = CfcVariant::separate_xy;
  bool use_cdm = true;
  bool use_dfnm = true;
  bool use_dac = true;
  bool label_concat = false;  // one-hot conditioning at the E and G inputs
  bool share_psi_eg = false;  // decoder aliases the encoder's label MLPs

  long c_main() const { return 4 * base; }
  long c_prime() const {
    return (cfc_variant == CfcVariant::separate_xy ? 9 : 18) * w_dim;
  }
  // residual trunk width: without the normalization side path the
  // concatenated deformation output itself flows through the blocks
  long res_width() const { return (use_cdm && !use_dfnm) ? 2 * c_main() : c_main(); }

  CdmConfig cdm_config() const {
    CdmConfig c;
    c.views = views;
    c.channels = c_main();
    c.c_prime = c_prime();
    c.variant = cfc_variant;
    c.share_psi_eg = share_psi_eg;
    c.noise_dim = noise_dim;
    c.hidden = psi_hidden;
    return c;
  }

  void validate() const {
    DVS_CHECK(image_size >= 32 && (image_size & (image_size - 1)) == 0,
              "network spec: image size must be a power of two >= 32, got ",
              image_size);
    DVS_CHECK(views >= 2, "network spec: need at least 2 views, got ", views);
    DVS_CHECK(base > 0 && c_main() % 4 == 0,
              "network spec: trunk width must be divisible by 4, got ", c_main());
    DVS_CHECK(z_dim > 0 && fc_mid > 0 && w_dim > 0, "network spec: zero width");
    DVS_CHECK(!share_psi_eg || use_cdm,
              "network spec: sharing label MLPs requires the deformation module");
    DVS_CHECK(!use_dfnm || use_cdm,
              "network spec: conditional normalization requires the deformation module");
  }
};

inline NetworkSpec desk_spec(long views = 8) {
  NetworkSpec s;
  s.image_size = 32;
  s.views = views;
  s.base = 4;
  s.z_dim = 32;
  s.fc_mid = 128;
  s.w_dim = 13;
  s.psi_hidden = 32;
  s.noise_dim = 32;
  s.dfnm_hidden = 16;
  s.d_stem = 8;
  s.d_b1 = 8;
  s.d_b2 = 16;
  s.d_b3 = 16;
  s.d_final = 16;
  s.dac_hidden = 32;
  return s;
}

inline NetworkSpec paper_spec(long views = 13) {
  NetworkSpec s;
  s.views = views;
  return s;
}

// ---- normalization sites ----

// Either the feature-conditioned layer or plain batch standardization with a
// learned channel affine; decoders may append a latent-style path whose
// output is concatenated for the following convolution to fold back in.
template <typename T>
struct NormSite {
  bool dfnm = false;
  DfnmLayer<T> layer;
  Tensor<T> bn_g, bn_b;
  bool ada = false;
  Tensor<T> ada_g_w, ada_g_b, ada_b_w, ada_b_b;  // z -> per-channel scale/offset
};

template <typename T>
NormSite<T> make_norm_site(long width, long c_side, long hidden, bool dfnm, bool ada,
                           long z_dim, std::mt19937_64& g) {
  NormSite<T> s;
  s.dfnm = dfnm;
  if (dfnm) {
    s.layer = make_dfnm_layer<T>(width, c_side, hidden, g);
  } else {
    s.bn_g = Tensor<T>::full({width}, T(1), true);
    s.bn_b = param_zeros<T>({width});
  }
  s.ada = ada;
  if (ada) {
    s.ada_g_w = param_normal<T>({width, z_dim}, g, 0.02);
    // scale head starts at 1, matching the bn_g=1 convention of plain sites
    s.ada_g_b = Tensor<T>::full({width}, T(1), true);
    s.ada_b_w = param_normal<T>({width, z_dim}, g, 0.02);
    s.ada_b_b = param_zeros<T>({width});
  }
  return s;
}

template <typename T>
void collect_norm_site(const NormSite<T>& s, const std::string& prefix,
                       NamedParams<T>& out) {
  if (s.dfnm) {
    collect_dfnm_layer(s.layer, prefix, out);
  } else {
    out.emplace_back(prefix + ".bn.g", s.bn_g);
    out.emplace_back(prefix + ".bn.b", s.bn_b);
  }
  if (s.ada) {
    out.emplace_back(prefix + ".ada.g.w", s.ada_g_w);
    out.emplace_back(prefix + ".ada.g.b", s.ada_g_b);
    out.emplace_back(prefix + ".ada.b.w", s.ada_b_w);
    out.emplace_back(prefix + ".ada.b.b", s.ada_b_b);
  }
}

template <typename T>
Tensor<T> norm_site_forward(const NormSite<T>& s, const Tensor<T>& h,
                            const Tensor<T>& side, const Tensor<T>& z) {
  Tensor<T> base = s.dfnm
                       ? dfnm_forward(h, side, s.layer)
                       : channel_affine(normalize(h, NormKind::batch_stats), s.bn_g,
                                        s.bn_b);
  if (!s.ada) return base;
  Tensor<T> ga = add_scalar(fc(z, s.ada_g_w, s.ada_g_b), T(1));
  Tensor<T> be = fc(z, s.ada_b_w, s.ada_b_b);
  return concat(1, {base, adain(h, ga, be)});
}

// ---- residual blocks ----

template <typename T>
struct ResBlock {
  NormSite<T> n1, n2;
  Tensor<T> c1w, c1b, c2w, c2b;
};

template <typename T>
ResBlock<T> make_res_block(long width, long c_side, long hidden, bool dfnm, bool ada,
                           long z_dim, std::mt19937_64& g) {
  ResBlock<T> B;
  B.n1 = make_norm_site<T>(width, c_side, hidden, dfnm, ada, z_dim, g);
  B.n2 = make_norm_site<T>(width, c_side, hidden, dfnm, ada, z_dim, g);
  const long in = width * (ada ? 2 : 1);
  B.c1w = param_normal<T>({width, in, 3, 3}, g, 0.02);
  B.c1b = param_zeros<T>({width});
  B.c2w = param_normal<T>({width, in, 3, 3}, g, 0.02);
  B.c2b = param_zeros<T>({width});
  return B;
}

template <typename T>
void collect_res_block(const ResBlock<T>& B, const std::string& prefix,
                       NamedParams<T>& out) {
  collect_norm_site(B.n1, prefix + ".norm1", out);
  collect_norm_site(B.n2, prefix + ".norm2", out);
  out.emplace_back(prefix + ".conv1.w", B.c1w);
  out.emplace_back(prefix + ".conv1.b", B.c1b);
  out.emplace_back(prefix + ".conv2.w", B.c2w);
  out.emplace_back(prefix + ".conv2.b", B.c2b);
}

template <typename T>
Tensor<T> res_block_forward(const ResBlock<T>& B, const Tensor<T>& h,
                            const Tensor<T>& side, const Tensor<T>& z) {
  Tensor<T> t =
      conv2d_same(lrelu(norm_site_forward(B.n1, h, side, z)), B.c1w, B.c1b);
  Tensor<T> u =
      conv2d_same(lrelu(norm_site_forward(B.n2, t, side, z)), B.c2w, B.c2b);
  DVS_CHECK(same_shape(u.shape(), h.shape()), "res_block: inner path emits ",
            shape_str(u.shape()), " for input ", shape_str(h.shape()));
  return add(h, u);
}

// ---- shared forward helpers ----

// Instance statistics collapse on a 1x1 map, so the stem skips them there.
template <typename T>
Tensor<T> in_lrelu(const Tensor<T>& x) {
  if (x.dim(2) * x.dim(3) < 2) return lrelu(x);
  return lrelu(normalize(x, NormKind::instance));
}

template <typename T>
Tensor<T> ln_lrelu(const Tensor<T>& x) {
  return lrelu(normalize(x, NormKind::layer));
}

// Constant conditioning planes: channel v is all ones iff label v is active.
template <typename T>
Tensor<T> label_planes(const Tensor<T>& y_onehot, long H, long W) {
  const long N = y_onehot.dim(0), V = y_onehot.dim(1);
  Tensor<T> t = Tensor<T>::leaf({N, V, H, W});
  for (long n = 0; n < N; ++n)
    for (long v = 0; v < V; ++v) {
      const T a = y_onehot.data()[n * V + v];
      if (a != T(0))
        std::fill(t.data() + (n * V + v) * H * W, t.data() + (n * V + v + 1) * H * W,
                  a);
    }
  return t;
}

// ---- encoder ----

template <typename T>
struct Encoder {
  NetworkSpec spec;
  Tensor<T> c0w, c0b, c1w, c1b, c2w, c2b, c3w, c3b;
  Cdm<T> cdm;
  std::vector<ResBlock<T>> blocks;
  Tensor<T> t1w, t1b, t2w, t2b;
  Tensor<T> fcw, fcb, muw, mub, lvw, lvb;
};

template <typename T>
Encoder<T> make_encoder(const NetworkSpec& spec, std::mt19937_64& g) {
  spec.validate();
  Encoder<T> e;
  e.spec = spec;
  const long b = spec.base, cm = spec.c_main();
  const long in_ch = 3 + (spec.label_concat ? spec.views : 0);
  e.c0w = param_normal<T>({b, in_ch, 7, 7}, g, 0.02);
  e.c0b = param_zeros<T>({b});
  e.c1w = param_normal<T>({2 * b, b, 3, 3}, g, 0.02);
  e.c1b = param_zeros<T>({2 * b});
  e.c2w = param_normal<T>({4 * b, 2 * b, 3, 3}, g, 0.02);
  e.c2b = param_zeros<T>({4 * b});
  e.c3w = param_normal<T>({cm, 4 * b, 3, 3}, g, 0.02);
  e.c3b = param_zeros<T>({cm});
  if (spec.use_cdm) e.cdm = make_cdm<T>(spec.cdm_config(), g);
  const long rw = spec.res_width();
  for (int i = 0; i < 3; ++i)
    e.blocks.push_back(make_res_block<T>(rw, 2 * cm, spec.dfnm_hidden, spec.use_dfnm,
                                         false, spec.z_dim, g));
  e.t1w = param_normal<T>({2 * cm, rw, 3, 3}, g, 0.02);
  e.t1b = param_zeros<T>({2 * cm});
  e.t2w = param_normal<T>({4 * cm, 2 * cm, 3, 3}, g, 0.02);
  e.t2b = param_zeros<T>({4 * cm});
  const long s32 = spec.image_size / 32;
  const long flat = 4 * cm * s32 * s32;
  e.fcw = param_normal<T>({spec.fc_mid, flat}, g, 0.02);
  e.fcb = param_zeros<T>({spec.fc_mid});
  e.muw = param_normal<T>({spec.z_dim, spec.fc_mid}, g, 0.02);
  e.mub = param_zeros<T>({spec.z_dim});
  e.lvw = param_normal<T>({spec.z_dim, spec.fc_mid}, g, 0.02);
  e.lvb = param_zeros<T>({spec.z_dim});
  return e;
}

template <typename T>
void collect_encoder(const Encoder<T>& e, const std::string& p, NamedParams<T>& out,
                     bool include_psi = true) {
  out.emplace_back(p + ".stem.c0.w", e.c0w);
  out.emplace_back(p + ".stem.c0.b", e.c0b);
  out.emplace_back(p + ".stem.c1.w", e.c1w);
  out.emplace_back(p + ".stem.c1.b", e.c1b);
  out.emplace_back(p + ".stem.c2.w", e.c2w);
  out.emplace_back(p + ".stem.c2.b", e.c2b);
  out.emplace_back(p + ".stem.c3.w", e.c3w);
  out.emplace_back(p + ".stem.c3.b", e.c3b);
  if (e.spec.use_cdm) collect_cdm(e.cdm, p + ".cdm", out, include_psi);
  for (std::size_t i = 0; i < e.blocks.size(); ++i)
    collect_res_block(e.blocks[i], p + ".res" + std::to_string(i + 1), out);
  out.emplace_back(p + ".tail.c4.w", e.t1w);
  out.emplace_back(p + ".tail.c4.b", e.t1b);
  out.emplace_back(p + ".tail.c5.w", e.t2w);
  out.emplace_back(p + ".tail.c5.b", e.t2b);
  out.emplace_back(p + ".fc.w", e.fcw);
  out.emplace_back(p + ".fc.b", e.fcb);
  out.emplace_back(p + ".mu.w", e.muw);
  out.emplace_back(p + ".mu.b", e.mub);
  out.emplace_back(p + ".logvar.w", e.lvw);
  out.emplace_back(p + ".logvar.b", e.lvb);
}

template <typename T>
struct EncOut {
  Tensor<T> mu, logvar;
  CdmOut<T> cdm;
  bool has_cdm = false;
};

template <typename T>
EncOut<T> encode(const Encoder<T>& e, const Tensor<T>& x, const Tensor<T>& y_onehot,
                 const Tensor<T>& psi_noise) {
  const NetworkSpec& s = e.spec;
  DVS_CHECK(x.rank() == 4 && x.dim(1) == 3 && x.dim(2) == s.image_size &&
                x.dim(3) == s.image_size,
            "encode: expects (N,3,", s.image_size, ",", s.image_size, "), got ",
            shape_str(x.shape()));
  Tensor<T> h = x;
  if (s.label_concat)
    h = concat(1, {h, label_planes(y_onehot, x.dim(2), x.dim(3))});
  h = in_lrelu(conv2d_same(h, e.c0w, e.c0b));
  h = in_lrelu(conv2d_same(h, e.c1w, e.c1b, 2));
  h = in_lrelu(conv2d_same(h, e.c2w, e.c2b, 2));
  h = in_lrelu(conv2d_same(h, e.c3w, e.c3b, 2));

  EncOut<T> o;
  Tensor<T> side;
  if (s.use_cdm) {
    o.cdm = cdm_forward(e.cdm, h, y_onehot, psi_noise);
    o.has_cdm = true;
    side = o.cdm.out;
    if (!s.use_dfnm) h = o.cdm.out;
  }
  for (const auto& B : e.blocks) h = res_block_forward(B, h, side, Tensor<T>{});

  h = in_lrelu(conv2d_same(h, e.t1w, e.t1b, 2));
  h = in_lrelu(conv2d_same(h, e.t2w, e.t2b, 2));
  h = reshape(h, {h.dim(0), h.dim(1) * h.dim(2) * h.dim(3)});
  h = lrelu(fc(h, e.fcw, e.fcb));
  o.mu = fc(h, e.muw, e.mub);
  o.logvar = fc(h, e.lvw, e.lvb);
  return o;
}

// Z = mu + exp(logvar / 2) * eps; gradients reach both heads.
template <typename T>
Tensor<T> reparameterize(const Tensor<T>& mu, const Tensor<T>& logvar,
                         const Tensor<T>& eps) {
  check_same_shape("reparameterize", mu, logvar);
  check_same_shape("reparameterize", mu, eps);
  return add(mu, mul(exp_op(scale(logvar, T(0.5))), eps));
}

// ---- decoder ----

template <typename T>
struct Decoder {
  NetworkSpec spec;
  Tensor<T> fcw, fcb;
  Tensor<T> up1w, up1b, up2w, up2b;
  Cdm<T> cdm;
  std::vector<ResBlock<T>> blocks;
  Tensor<T> s1w, s1b, s2w, s2b, s3w, s3b;
  Tensor<T> outw, outb;
};

template <typename T>
Decoder<T> make_decoder(const NetworkSpec& spec, std::mt19937_64& g) {
  spec.validate();
  Decoder<T> d;
  d.spec = spec;
  const long cm = spec.c_main();
  const long s32 = spec.image_size / 32;
  const long zin = spec.z_dim + (spec.label_concat ? spec.views : 0);
  d.fcw = param_normal<T>({cm * s32 * s32, zin}, g, 0.02);
  d.fcb = param_zeros<T>({cm * s32 * s32});
  d.up1w = param_normal<T>({cm, cm, 4, 4}, g, 0.02);
  d.up1b = param_zeros<T>({cm});
  d.up2w = param_normal<T>({cm, cm, 4, 4}, g, 0.02);
  d.up2b = param_zeros<T>({cm});
  if (spec.use_cdm) d.cdm = make_cdm<T>(spec.cdm_config(), g);
  const long rw = spec.res_width();
  const bool ada = spec.decoder_variant == DecoderVariant::adain_plus_dfnm;
  for (int i = 0; i < 3; ++i)
    d.blocks.push_back(make_res_block<T>(rw, 2 * cm, spec.dfnm_hidden, spec.use_dfnm,
                                         ada, spec.z_dim, g));
  d.s1w = param_normal<T>({cm, rw, 3, 3}, g, 0.02);
  d.s1b = param_zeros<T>({cm});
  d.s2w = param_normal<T>({cm / 2, cm, 3, 3}, g, 0.02);
  d.s2b = param_zeros<T>({cm / 2});
  d.s3w = param_normal<T>({cm / 4, cm / 2, 3, 3}, g, 0.02);
  d.s3b = param_zeros<T>({cm / 4});
  d.outw = param_normal<T>({3, cm / 4, 1, 1}, g, 0.02);
  d.outb = param_zeros<T>({3});
  return d;
}

template <typename T>
void collect_decoder(const Decoder<T>& d, const std::string& p, NamedParams<T>& out,
                     bool include_psi = true) {
  out.emplace_back(p + ".fc.w", d.fcw);
  out.emplace_back(p + ".fc.b", d.fcb);
  out.emplace_back(p + ".up1.w", d.up1w);
  out.emplace_back(p + ".up1.b", d.up1b);
  out.emplace_back(p + ".up2.w", d.up2w);
  out.emplace_back(p + ".up2.b", d.up2b);
  if (d.spec.use_cdm) collect_cdm(d.cdm, p + ".cdm", out, include_psi);
  for (std::size_t i = 0; i < d.blocks.size(); ++i)
    collect_res_block(d.blocks[i], p + ".res" + std::to_string(i + 1), out);
  out.emplace_back(p + ".stage1.w", d.s1w);
  out.emplace_back(p + ".stage1.b", d.s1b);
  out.emplace_back(p + ".stage2.w", d.s2w);
  out.emplace_back(p + ".stage2.b", d.s2b);
  out.emplace_back(p + ".stage3.w", d.s3w);
  out.emplace_back(p + ".stage3.b", d.s3b);
  out.emplace_back(p + ".out.w", d.outw);
  out.emplace_back(p + ".out.b", d.outb);
}

template <typename T>
struct DecOut {
  Tensor<T> image;
  CdmOut<T> cdm;
  bool has_cdm = false;
};

template <typename T>
DecOut<T> decode_impl(const Decoder<T>& d, const Tensor<T>& z,
                      const Tensor<T>& y_onehot, const Tensor<T>& psi_noise,
                      const Tensor<T>* wx, const Tensor<T>* wy) {
  const NetworkSpec& s = d.spec;
  DVS_CHECK(z.rank() == 2 && z.dim(1) == s.z_dim, "decode: expects (N,", s.z_dim,
            ") latent, got ", shape_str(z.shape()));
  const long N = z.dim(0), cm = s.c_main(), s32 = s.image_size / 32;
  Tensor<T> zin = s.label_concat ? concat(1, {z, y_onehot}) : z;
  Tensor<T> h = reshape(fc(zin, d.fcw, d.fcb), {N, cm, s32, s32});
  h = ln_lrelu(h);
  h = ln_lrelu(conv_transpose2d(h, d.up1w, d.up1b, 2, 1));
  h = ln_lrelu(conv_transpose2d(h, d.up2w, d.up2b, 2, 1));

  DecOut<T> o;
  Tensor<T> side;
  if (s.use_cdm) {
    o.cdm = wx ? cdm_forward_with_filters(d.cdm, h, *wx, *wy)
               : cdm_forward(d.cdm, h, y_onehot, psi_noise);
    o.has_cdm = true;
    side = o.cdm.out;
    if (!s.use_dfnm) h = o.cdm.out;
  } else {
    DVS_CHECK(wx == nullptr, "decode: flow filters supplied but no deformation stage");
  }
  for (const auto& B : d.blocks) h = res_block_forward(B, h, side, z);

  h = ln_lrelu(conv2d_same(up_nearest2(h), d.s1w, d.s1b));
  h = ln_lrelu(conv2d_same(up_nearest2(h), d.s2w, d.s2b));
  h = ln_lrelu(conv2d_same(up_nearest2(h), d.s3w, d.s3b));
  o.image = tanh_op(conv2d_same(h, d.outw, d.outb));
  return o;
}

template <typename T>
DecOut<T> decode(const Decoder<T>& d, const Tensor<T>& z, const Tensor<T>& y_onehot,
                 const Tensor<T>& psi_noise) {
  return decode_impl<T>(d, z, y_onehot, psi_noise, nullptr, nullptr);
}

// Interpolation on the latent filters: bypass the label MLPs entirely.
template <typename T>
DecOut<T> decode_with_filters(const Decoder<T>& d, const Tensor<T>& z,
                              const Tensor<T>& y_onehot, const Tensor<T>& wx,
                              const Tensor<T>& wy) {
  return decode_impl<T>(d, z, y_onehot, Tensor<T>{}, &wx, &wy);
}

// ---- spectral-normalized parameters ----

template <typename T>
struct SnParam {
  Tensor<T> w;
  long rows = 0;
  std::vector<double> u, v;

  Tensor<T> normalized() const { return spectral_scale(w, rows, u, v); }
  // One power-iteration step; training calls this once per iteration.
  void tick() {
    auto r = power_iteration(w, rows, u, 1);
    u = std::move(r.u);
    v = std::move(r.v);
  }
  // Rebuild v from the stored u after a load; u itself stays put.
  void refresh_v() {
    const long cols = w.numel() / rows;
    v.assign(std::size_t(cols), 0.0);
    double s = 0;
    for (long c = 0; c < cols; ++c) {
      double acc = 0;
      for (long r = 0; r < rows; ++r)
        acc += double(w.data()[r * cols + c]) * u[std::size_t(r)];
      v[std::size_t(c)] = acc;
      s += acc * acc;
    }
    s = std::sqrt(s);
    if (s < 1e-12) s = 1e-12;
    for (double& a : v) a /= s;
  }
};

template <typename T>
SnParam<T> make_sn(Shape shape, long rows, std::mt19937_64& g) {
  SnParam<T> p;
  p.w = param_normal<T>(std::move(shape), g, 0.02);
  p.rows = rows;
  p.u.resize(std::size_t(rows));
  double s = 0;
  for (double& a : p.u) {
    a = RngPool::normal(g);
    s += a * a;
  }
  s = std::sqrt(s);
  if (s < 1e-12) s = 1e-12;
  for (double& a : p.u) a /= s;
  p.refresh_v();
  return p;
}

// ---- projection discriminator ----

template <typename T>
struct Discriminator {
  NetworkSpec spec;
  SnParam<T> stem;
  Tensor<T> stem_b;
  struct Block {
    SnParam<T> c1, c2, skip;
    Tensor<T> b1, b2;
    bool has_skip = false;
  };
  std::vector<Block> blocks;
  SnParam<T> f1, f2;
  Tensor<T> f1b, f2b;
  SnParam<T> psi;
  Tensor<T> psi_b;
  SnParam<T> embed;
};

template <typename T>
Discriminator<T> make_discriminator(const NetworkSpec& spec, std::mt19937_64& g) {
  spec.validate();
  Discriminator<T> d;
  d.spec = spec;
  d.stem = make_sn<T>({spec.d_stem, 3, 1, 1}, spec.d_stem, g);
  d.stem_b = param_zeros<T>({spec.d_stem});
  long in = spec.d_stem;
  for (long out_ch : {spec.d_b1, spec.d_b2, spec.d_b3}) {
    typename Discriminator<T>::Block b;
    b.c1 = make_sn<T>({out_ch, in, 3, 3}, out_ch, g);
    b.b1 = param_zeros<T>({out_ch});
    b.c2 = make_sn<T>({out_ch, out_ch, 3, 3}, out_ch, g);
    b.b2 = param_zeros<T>({out_ch});
    b.has_skip = in != out_ch;
    if (b.has_skip) b.skip = make_sn<T>({out_ch, in, 1, 1}, out_ch, g);
    d.blocks.push_back(std::move(b));
    in = out_ch;
  }
  d.f1 = make_sn<T>({spec.d_final, in + 1, 3, 3}, spec.d_final, g);
  d.f1b = param_zeros<T>({spec.d_final});
  d.f2 = make_sn<T>({spec.d_final, spec.d_final, 3, 3}, spec.d_final, g);
  d.f2b = param_zeros<T>({spec.d_final});
  d.psi = make_sn<T>({1, spec.d_final}, 1, g);
  d.psi_b = param_zeros<T>({1});
  d.embed = make_sn<T>({spec.d_final, spec.views}, spec.d_final, g);
  return d;
}

template <typename T>
void collect_discriminator(const Discriminator<T>& d, const std::string& p,
                           NamedParams<T>& out) {
  out.emplace_back(p + ".stem.w", d.stem.w);
  out.emplace_back(p + ".stem.b", d.stem_b);
  for (std::size_t i = 0; i < d.blocks.size(); ++i) {
    const std::string bp = p + ".b" + std::to_string(i + 1);
    out.emplace_back(bp + ".c1.w", d.blocks[i].c1.w);
    out.emplace_back(bp + ".c1.b", d.blocks[i].b1);
    out.emplace_back(bp + ".c2.w", d.blocks[i].c2.w);
    out.emplace_back(bp + ".c2.b", d.blocks[i].b2);
    if (d.blocks[i].has_skip) out.emplace_back(bp + ".skip.w", d.blocks[i].skip.w);
  }
  out.emplace_back(p + ".f1.w", d.f1.w);
  out.emplace_back(p + ".f1.b", d.f1b);
  out.emplace_back(p + ".f2.w", d.f2.w);
  out.emplace_back(p + ".f2.b", d.f2b);
  out.emplace_back(p + ".psi.w", d.psi.w);
  out.emplace_back(p + ".psi.b", d.psi_b);
  out.emplace_back(p + ".embed.w", d.embed.w);
}

// Spectral-norm power-iteration state, keyed by the owning weight's name.
template <typename T>
std::vector<std::pair<std::string, SnParam<T>*>> sn_entries(Discriminator<T>& d,
                                                            const std::string& p) {
  std::vector<std::pair<std::string, SnParam<T>*>> out;
  out.emplace_back(p + ".stem.w", &d.stem);
  for (std::size_t i = 0; i < d.blocks.size(); ++i) {
    const std::string bp = p + ".b" + std::to_string(i + 1);
    out.emplace_back(bp + ".c1.w", &d.blocks[i].c1);
    out.emplace_back(bp + ".c2.w", &d.blocks[i].c2);
    if (d.blocks[i].has_skip) out.emplace_back(bp + ".skip.w", &d.blocks[i].skip);
  }
  out.emplace_back(p + ".f1.w", &d.f1);
  out.emplace_back(p + ".f2.w", &d.f2);
  out.emplace_back(p + ".psi.w", &d.psi);
  out.emplace_back(p + ".embed.w", &d.embed);
  return out;
}

template <typename T>
void sn_tick_all(Discriminator<T>& d) {
  for (auto& [name, p] : sn_entries(d, "d")) p->tick();
}

template <typename T>
struct DiscOut {
  Tensor<T> score;  // (N, 1)
  Tensor<T> phi;    // (N, d_final)
  long mix_h = 0, mix_w = 0;  // spatial size entering the batch-stat channel
};

template <typename T>
DiscOut<T> discriminate(const Discriminator<T>& d, const Tensor<T>& x,
                        const Tensor<T>& y_onehot) {
  const NetworkSpec& s = d.spec;
  DVS_CHECK(x.rank() == 4 && x.dim(1) == 3 && x.dim(2) == s.image_size &&
                x.dim(3) == s.image_size,
            "discriminate: expects (N,3,", s.image_size, ",", s.image_size,
            "), got ", shape_str(x.shape()));
  DVS_CHECK(x.dim(0) >= 2, "discriminate: batch statistics need N >= 2, got ",
            x.dim(0));
  Tensor<T> h = conv2d_same(x, d.stem.normalized(), d.stem_b);
  for (const auto& B : d.blocks) {
    Tensor<T> t = conv2d_same(lrelu(h), B.c1.normalized(), B.b1);
    Tensor<T> u = conv2d_same(lrelu(t), B.c2.normalized(), B.b2);
    Tensor<T> skip = B.has_skip ? conv2d_same(h, B.skip.normalized(), Tensor<T>{}) : h;
    h = down_avg2(add(skip, u));
  }
  DiscOut<T> o;
  o.mix_h = h.dim(2);
  o.mix_w = h.dim(3);
  h = minibatch_std_concat(h);
  h = lrelu(conv2d_same(h, d.f1.normalized(), d.f1b));
  h = lrelu(conv2d_same(h, d.f2.normalized(), d.f2b));
  o.phi = spatial_sum(h);
  Tensor<T> proj = rowwise_dot(fc(y_onehot, d.embed.normalized()), o.phi);
  o.score = add(fc(o.phi, d.psi.normalized(), d.psi_b), proj);
  return o;
}

// ---- latent classifier ----

template <typename T>
struct Dac {
  NetworkSpec spec;
  Tensor<T> fc1w, fc1b, fc2w, fc2b;
};

template <typename T>
Dac<T> make_dac(const NetworkSpec& spec, std::mt19937_64& g) {
  Dac<T> d;
  d.spec = spec;
  d.fc1w = param_normal<T>({spec.dac_hidden, spec.z_dim}, g, 0.02);
  d.fc1b = param_zeros<T>({spec.dac_hidden});
  d.fc2w = param_normal<T>({spec.views, spec.dac_hidden}, g, 0.02);
  d.fc2b = param_zeros<T>({spec.views});
  return d;
}

template <typename T>
void collect_dac(const Dac<T>& d, const std::string& p, NamedParams<T>& out) {
  out.emplace_back(p + ".fc1.w", d.fc1w);
  out.emplace_back(p + ".fc1.b", d.fc1b);
  out.emplace_back(p + ".fc2.w", d.fc2w);
  out.emplace_back(p + ".fc2.b", d.fc2b);
}

template <typename T>
Tensor<T> dac_forward(const Dac<T>& d, const Tensor<T>& z) {
  return fc(lrelu(fc(z, d.fc1w, d.fc1b)), d.fc2w, d.fc2b);
}

// ---- bundle ----

template <typename T>
struct Networks {
  NetworkSpec spec;
  Encoder<T> e;
  Decoder<T> g;
  Discriminator<T> d;
  Dac<T> dac;
};

template <typename T>
Networks<T> make_networks(const NetworkSpec& spec, RngPool& pool) {
  spec.validate();
  Networks<T> n;
  n.spec = spec;
  n.e = make_encoder<T>(spec, pool.stream("init/e"));
  n.g = make_decoder<T>(spec, pool.stream("init/g"));
  if (spec.share_psi_eg) {
    n.g.cdm.psi_x = n.e.cdm.psi_x;
    n.g.cdm.psi_y = n.e.cdm.psi_y;
  }
  n.d = make_discriminator<T>(spec, pool.stream("init/d"));
  if (spec.use_dac) n.dac = make_dac<T>(spec, pool.stream("init/dac"));
  return n;
}

// Every trainable tensor exactly once; label MLPs shared between the encoder
// and decoder appear under their own prefix instead of either network's.
template <typename T>
NamedParams<T> named_params(const Networks<T>& n) {
  NamedParams<T> out;
  const bool shared = n.spec.share_psi_eg && n.spec.use_cdm;
  if (shared) {
    collect_psi(n.e.cdm.psi_x, "shared.psi_x", out);
    if (n.e.cdm.psi_y.defined()) collect_psi(n.e.cdm.psi_y, "shared.psi_y", out);
  }
  collect_encoder(n.e, "e", out, !shared);
  collect_decoder(n.g, "g", out, !shared);
  collect_discriminator(n.d, "d", out);
  if (n.spec.use_dac) collect_dac(n.dac, "dac", out);
  return out;
}

}  // namespace dvs
