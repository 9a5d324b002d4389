#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "dvs/checkpoint.hpp"
#include "dvs/config.hpp"
#include "dvs/data.hpp"
#include "dvs/losses.hpp"
#include "dvs/networks.hpp"
#include "dvs/random.hpp"

namespace dvs {

// ---- ablation presets ----
//
// A  plain conditional VAE-GAN, one-hot labels concatenated at both inputs
// B  A with the deformation module carrying the label instead of concatenation
// C  B with deformed-feature normalization
// D  C with the latent view classifier
// E  D with one shared filter bank for dx and dy
// F  D with the label MLPs shared between encoder and decoder

inline NetworkSpec preset_spec(char preset, long views, long image_size,
                               long base, long z_dim,
                               DecoderVariant dv = DecoderVariant::dfnm_only) {
  DVS_CHECK(preset >= 'A' && preset <= 'F', "unknown preset '",
            std::string(1, preset), "'; valid presets are A, B, C, D, E, F");
  NetworkSpec s = desk_spec(views);
  s.image_size = image_size;
  s.base = base;
  s.z_dim = z_dim;
  s.fc_mid = 4 * z_dim;
  s.decoder_variant = dv;
  s.label_concat = preset == 'A';
  s.use_cdm = preset != 'A';
  s.use_dfnm = preset >= 'C';
  s.use_dac = preset >= 'D';
  s.cfc_variant = preset == 'E' ? CfcVariant::shared_xy : CfcVariant::separate_xy;
  s.share_psi_eg = preset == 'F';
  s.validate();
  return s;
}

// ---- network layout as text, embedded in checkpoints ----

inline std::string netspec_text(const NetworkSpec& s) {
  std::ostringstream os;
  os << "image_size = " << s.image_size << "\nviews = " << s.views
     << "\nbase = " << s.base << "\nz_dim = " << s.z_dim
     << "\nfc_mid = " << s.fc_mid << "\nw_dim = " << s.w_dim
     << "\npsi_hidden = " << s.psi_hidden << "\nnoise_dim = " << s.noise_dim
     << "\ndfnm_hidden = " << s.dfnm_hidden << "\nd_stem = " << s.d_stem
     << "\nd_b1 = " << s.d_b1 << "\nd_b2 = " << s.d_b2 << "\nd_b3 = " << s.d_b3
     << "\nd_final = " << s.d_final << "\ndac_hidden = " << s.dac_hidden
     << "\ndecoder_variant = " << decoder_variant_name(s.decoder_variant)
     << "\ncfc_variant = "
     << (s.cfc_variant == CfcVariant::shared_xy ? "shared_xy" : "separate_xy")
     << "\nuse_cdm = " << (s.use_cdm ? "true" : "false")
     << "\nuse_dfnm = " << (s.use_dfnm ? "true" : "false")
     << "\nuse_dac = " << (s.use_dac ? "true" : "false")
     << "\nlabel_concat = " << (s.label_concat ? "true" : "false")
     << "\nshare_psi_eg = " << (s.share_psi_eg ? "true" : "false") << "\n";
  return os.str();
}

inline NetworkSpec netspec_from_text(const std::string& text) {
  ConfigMap m = ConfigMap::parse(text, "network layout");
  NetworkSpec s;
  s.image_size = m.get_long("image_size", s.image_size);
  s.views = m.get_long("views", s.views);
  s.base = m.get_long("base", s.base);
  s.z_dim = m.get_long("z_dim", s.z_dim);
  s.fc_mid = m.get_long("fc_mid", s.fc_mid);
  s.w_dim = m.get_long("w_dim", s.w_dim);
  s.psi_hidden = m.get_long("psi_hidden", s.psi_hidden);
  s.noise_dim = m.get_long("noise_dim", s.noise_dim);
  s.dfnm_hidden = m.get_long("dfnm_hidden", s.dfnm_hidden);
  s.d_stem = m.get_long("d_stem", s.d_stem);
  s.d_b1 = m.get_long("d_b1", s.d_b1);
  s.d_b2 = m.get_long("d_b2", s.d_b2);
  s.d_b3 = m.get_long("d_b3", s.d_b3);
  s.d_final = m.get_long("d_final", s.d_final);
  s.dac_hidden = m.get_long("dac_hidden", s.dac_hidden);
  const std::string dv = m.get_str("decoder_variant", "dfnm_only");
  DVS_CHECK(dv == "dfnm_only" || dv == "adain_plus_dfnm",
            "network layout: bad decoder_variant '", dv, "'");
  s.decoder_variant =
      dv == "dfnm_only" ? DecoderVariant::dfnm_only : DecoderVariant::adain_plus_dfnm;
  const std::string cv = m.get_str("cfc_variant", "separate_xy");
  DVS_CHECK(cv == "separate_xy" || cv == "shared_xy",
            "network layout: bad cfc_variant '", cv, "'");
  s.cfc_variant = cv == "shared_xy" ? CfcVariant::shared_xy : CfcVariant::separate_xy;
  s.use_cdm = m.get_bool("use_cdm", s.use_cdm);
  s.use_dfnm = m.get_bool("use_dfnm", s.use_dfnm);
  s.use_dac = m.get_bool("use_dac", s.use_dac);
  s.label_concat = m.get_bool("label_concat", s.label_concat);
  s.share_psi_eg = m.get_bool("share_psi_eg", s.share_psi_eg);
  m.reject_unknown();
  s.validate();
  return s;
}

// ---- run configuration ----

struct TrainConfig {
  long iterations = 2000;
  long batch = 16;
  double lr = 0.0002;
  double beta1 = 0.0;
  double beta2 = 0.9;
  std::uint64_t seed = 1;
  char preset = 'D';
  bool paired = false;
  long log_interval = 50;
  long checkpoint_interval = 500;
  long eval_count = 8;       // held-out items scored per log row
  double clip_norm = 0.0;    // 0 disables the global-norm gradient clip
  std::string dataset;       // image directory; empty renders spinners
  std::string out_dir = "out";
  std::string resume;        // checkpoint to continue from
  long spinner_identities = 200;
  long spinner_views = 8;
  long spinner_size = 32;
  std::uint64_t data_seed = 1;
  long base = 4;             // network width knobs
  long z_dim = 32;
  std::string decoder_variant = "dfnm_only";

  void validate() const {
    DVS_CHECK(preset >= 'A' && preset <= 'F', "unknown preset '",
              std::string(1, preset), "'; valid presets are A, B, C, D, E, F");
    DVS_CHECK(iterations >= 0, "config: iterations must be >= 0");
    DVS_CHECK(batch >= 2, "config: batch must be >= 2, got ", batch);
    DVS_CHECK(lr > 0 && beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1,
              "config: bad optimizer constants");
    DVS_CHECK(clip_norm >= 0, "config: clip_norm must be >= 0");
    DVS_CHECK(!out_dir.empty(), "config: out_dir must be set");
  }

  static TrainConfig from_config(const ConfigMap& m) {
    TrainConfig c;
    c.iterations = m.get_long("iterations", c.iterations);
    c.batch = m.get_long("batch", c.batch);
    c.lr = m.get_double("lr", c.lr);
    c.beta1 = m.get_double("beta1", c.beta1);
    c.beta2 = m.get_double("beta2", c.beta2);
    c.seed = std::uint64_t(m.get_long("seed", long(c.seed)));
    const std::string p = m.get_str("preset", std::string(1, c.preset));
    DVS_CHECK(p.size() == 1, "unknown preset '", p,
              "'; valid presets are A, B, C, D, E, F");
    c.preset = p[0];
    c.paired = m.get_bool("paired", c.paired);
    c.log_interval = m.get_long("log_interval", c.log_interval);
    c.checkpoint_interval = m.get_long("checkpoint_interval", c.checkpoint_interval);
    c.eval_count = m.get_long("eval_count", c.eval_count);
    c.clip_norm = m.get_double("clip_norm", c.clip_norm);
    c.dataset = m.get_str("dataset", c.dataset);
    c.out_dir = m.get_str("out_dir", c.out_dir);
    c.resume = m.get_str("resume", c.resume);
    c.spinner_identities = m.get_long("spinner_identities", c.spinner_identities);
    c.spinner_views = m.get_long("spinner_views", c.spinner_views);
    c.spinner_size = m.get_long("spinner_size", c.spinner_size);
    c.data_seed = std::uint64_t(m.get_long("data_seed", long(c.data_seed)));
    c.base = m.get_long("base", c.base);
    c.z_dim = m.get_long("z_dim", c.z_dim);
    c.decoder_variant = m.get_str("decoder_variant", c.decoder_variant);
    m.reject_unknown();
    c.validate();
    return c;
  }
};

// ---- optimizer ----

// Adam over one parameter group; first and second moments accumulate in
// double regardless of the parameter type.
template <typename T>
struct AdamGroup {
  double lr = 0.0002, beta1 = 0.0, beta2 = 0.9, eps = 1e-8;
  long t = 0;
  std::vector<std::string> names;
  std::vector<Tensor<T>> params;
  std::vector<std::vector<double>> m, v;

  void attach(const NamedParams<T>& all, const std::vector<std::string>& prefixes) {
    for (const auto& [name, p] : all)
      for (const std::string& pre : prefixes)
        if (name.rfind(pre, 0) == 0) {
          names.push_back(name);
          params.push_back(p);
          m.emplace_back(std::size_t(p.numel()), 0.0);
          v.emplace_back(std::size_t(p.numel()), 0.0);
          break;
        }
  }

  void zero() {
    for (auto& p : params) p.zero_grad();
  }

  double grad_norm() const {
    double acc = 0;
    for (const auto& p : params) {
      if (!p.has_grad()) continue;
      for (const T g : p.grad()) acc += double(g) * double(g);
    }
    return std::sqrt(acc);
  }

  void step(double clip) {
    ++t;
    double gscale = 1.0;
    if (clip > 0) {
      const double n = grad_norm();
      if (n > clip) gscale = clip / n;
    }
    const double bc1 = 1.0 - std::pow(beta1, double(t));
    const double bc2 = 1.0 - std::pow(beta2, double(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = params[i];
      const bool hg = p.has_grad();
      for (long j = 0; j < p.numel(); ++j) {
        const double g = hg ? double(p.grad()[std::size_t(j)]) * gscale : 0.0;
        double& mi = m[i][std::size_t(j)];
        double& vi = v[i][std::size_t(j)];
        mi = beta1 * mi + (1.0 - beta1) * g;
        vi = beta2 * vi + (1.0 - beta2) * g * g;
        p.data()[j] =
            T(double(p.data()[j]) - lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
      }
    }
  }
};

// ---- one optimization step ----

template <typename T>
struct StepOutputs {
  Tensor<T> xa_bar, xb_bar, x_prior;  // the three generated images
  double kl = 0, adv_d = 0, adv_g = 0, style = 0, content = 0, pixel = 0;
  double cls_e = 0, cls_dac = 0, zrec = 0;
  // set only when a ground-truth target drives extra reconstruction terms
  bool has_paired = false;
  double paired_pixel = 0, paired_content = 0, paired_style = 0;
};

template <typename T>
class Trainer {
 public:
  explicit Trainer(TrainConfig c) : cfg(std::move(c)), pool(cfg.seed) {
    cfg.validate();
    if (cfg.dataset.empty()) {
      SpinnerSpec sp;
      sp.size = cfg.spinner_size;
      sp.views = cfg.spinner_views;
      sp.identities = cfg.spinner_identities;
      sp.seed = cfg.data_seed;
      data = make_spinner_index(sp);
    } else {
      data = load_directory_dataset(cfg.dataset, long(cfg.data_seed));
    }
    const std::string dvn = cfg.decoder_variant;
    DVS_CHECK(dvn == "dfnm_only" || dvn == "adain_plus_dfnm",
              "config: bad decoder_variant '", dvn, "'");
    const DecoderVariant dv = dvn == "dfnm_only" ? DecoderVariant::dfnm_only
                                                 : DecoderVariant::adain_plus_dfnm;
    nets = make_networks<T>(
        preset_spec(cfg.preset, data.views, data.image_size, cfg.base, cfg.z_dim, dv),
        pool);
    feats = make_feature_extractor<T>(pool.stream("features"), 3);
    all_params = named_params(nets);
    opt_eg.attach(all_params, {"e.", "g.", "shared."});
    opt_d.attach(all_params, {"d."});
    opt_dac.attach(all_params, {"dac."});
    for (AdamGroup<T>* o : {&opt_eg, &opt_d, &opt_dac}) {
      o->lr = cfg.lr;
      o->beta1 = cfg.beta1;
      o->beta2 = cfg.beta2;
    }
  }

  // Stage one updates the discriminator on detached images and the latent
  // classifier on the detached code; stage two recomputes the same images
  // with gradients (identical weights, identical noise, so identical pixels)
  // and updates the encoder and decoder together.
  StepOutputs<T> train_step(const Batch<T>& b, const Tensor<T>* x_target) {
    const NetworkSpec& s = nets.spec;
    const long N = b.x.dim(0);
    DVS_CHECK((x_target != nullptr) == cfg.paired,
              "train_step: target image presence must match the paired flag");

    auto& gpsi = pool.stream("psi");
    Tensor<T> noise_e = draw_normal({N, s.noise_dim}, gpsi);
    Tensor<T> noise_ga = draw_normal({N, s.noise_dim}, gpsi);
    Tensor<T> noise_gb = draw_normal({N, s.noise_dim}, gpsi);
    Tensor<T> noise_gp = draw_normal({N, s.noise_dim}, gpsi);
    Tensor<T> noise_er = draw_normal({N, s.noise_dim}, gpsi);
    Tensor<T> eps = draw_normal({N, s.z_dim}, pool.stream("eps"));
    Tensor<T> zp = draw_normal({N, s.z_dim}, pool.stream("prior"));

    StepOutputs<T> out;

    sn_tick_all(nets.d);

    // -- discriminator stage --
    Tensor<T> z_detached;
    {
      NoGradGuard ng;
      EncOut<T> eo = encode(nets.e, b.x, b.ya_onehot, noise_e);
      z_detached = reparameterize(eo.mu, eo.logvar, eps);
      out.xa_bar = decode(nets.g, z_detached, b.ya_onehot, noise_ga).image;
      out.xb_bar = decode(nets.g, z_detached, b.yb_onehot, noise_gb).image;
      out.x_prior = decode(nets.g, zp, b.ya_onehot, noise_gp).image;
    }
    {
      DiscOut<T> real = discriminate(nets.d, b.x, b.ya_onehot);
      DiscOut<T> fa = discriminate(nets.d, out.xa_bar, b.ya_onehot);
      DiscOut<T> fb = discriminate(nets.d, out.xb_bar, b.yb_onehot);
      DiscOut<T> fp = discriminate(nets.d, out.x_prior, b.ya_onehot);
      Tensor<T> d_loss = hinge_d(real.score, fa.score, fb.score, fp.score);
      out.adv_d = double(d_loss.item());
      opt_d.zero();
      d_loss.backward();
      opt_d.step(cfg.clip_norm);
    }
    if (s.use_dac) {
      Tensor<T> logits = dac_forward(nets.dac, z_detached);
      Tensor<T> closs = dac_loss_label(logits, b.ya_onehot);
      out.cls_dac = double(closs.item());
      opt_dac.zero();
      closs.backward();
      opt_dac.step(cfg.clip_norm);
    }

    // -- encoder/decoder stage --
    {
      EncOut<T> eo = encode(nets.e, b.x, b.ya_onehot, noise_e);
      Tensor<T> z = reparameterize(eo.mu, eo.logvar, eps);
      Tensor<T> xa = decode(nets.g, z, b.ya_onehot, noise_ga).image;
      Tensor<T> xb = decode(nets.g, z, b.yb_onehot, noise_gb).image;
      Tensor<T> xp = decode(nets.g, zp, b.ya_onehot, noise_gp).image;
      DiscOut<T> fa = discriminate(nets.d, xa, b.ya_onehot);
      DiscOut<T> fb = discriminate(nets.d, xb, b.yb_onehot);
      DiscOut<T> fp = discriminate(nets.d, xp, b.ya_onehot);

      EgParts<T> parts;
      parts.kl = kl_gaussian(eo.mu, eo.logvar);
      parts.adv = hinge_g(fa.score, fb.score, fp.score);
      parts.pixel = pixel_l1(b.x, xa);
      parts.content = content_loss(b.x, xa, feats);
      parts.style = style_loss(b.x, xa, feats);
      EncOut<T> er = encode(nets.e, xp, b.ya_onehot, noise_er);
      parts.zrec = z_reconstruction(zp, er.mu);
      if (s.use_dac) parts.cls_e = dac_loss_uniform(dac_forward(nets.dac, z));

      Tensor<T> total = total_eg(parts, weights);
      if (x_target) {
        Tensor<T> pp = pixel_l1(*x_target, xb);
        Tensor<T> pc = content_loss(*x_target, xb, feats);
        Tensor<T> ps = style_loss(*x_target, xb, feats);
        total = add(total, scale(pp, T(weights.pixel)));
        total = add(total, scale(pc, T(weights.content)));
        total = add(total, scale(ps, T(weights.style)));
        out.has_paired = true;
        out.paired_pixel = double(pp.item());
        out.paired_content = double(pc.item());
        out.paired_style = double(ps.item());
      }

      out.kl = double(parts.kl.item());
      out.adv_g = double(parts.adv.item());
      out.style = double(parts.style.item());
      out.content = double(parts.content.item());
      out.pixel = double(parts.pixel.item());
      out.zrec = double(parts.zrec.item());
      if (s.use_dac) out.cls_e = double(parts.cls_e.item());

      opt_eg.zero();
      total.backward();
      opt_eg.step(cfg.clip_norm);
    }

    for (double c : {out.kl, out.adv_d, out.adv_g, out.style, out.content,
                     out.pixel, out.cls_e, out.cls_dac, out.zrec})
      DVS_CHECK(std::isfinite(c), "train: non-finite loss at iteration ", iter,
                " (kl=", out.kl, " adv_d=", out.adv_d, " adv_g=", out.adv_g,
                " style=", out.style, " content=", out.content,
                " pixel=", out.pixel, " cls_e=", out.cls_e,
                " cls_dac=", out.cls_dac, " zrec=", out.zrec, ")");
    return out;
  }

  // Deterministic held-out score: encode at mu, translate each scored record
  // to the view half a turn away, compare against its ground truth.  Draws
  // nothing from the RNG pool, so scoring never perturbs training replay.
  std::pair<double, double> evaluate(long count) const {
    const long n = std::min<long>(count, long(data.test_items.size()));
    if (n <= 0)
      return {std::numeric_limits<double>::quiet_NaN(),
              std::numeric_limits<double>::quiet_NaN()};
    NoGradGuard ng;
    const long V = data.views, S = data.image_size;
    double l1 = 0, ss = 0;
    for (long i = 0; i < n; ++i) {
      const long ri = data.test_items[std::size_t(i)];
      const DataRecord& r = data.records[std::size_t(ri)];
      const long tv = (r.view + V / 2) % V;
      Tensor<T> x = reshape(data.fetch<T>(ri), {1, 3, S, S});
      Tensor<T> ya = Tensor<T>::leaf({1, V});
      ya.data()[r.view] = T(1);
      Tensor<T> yb = Tensor<T>::leaf({1, V});
      yb.data()[tv] = T(1);
      Tensor<T> zero_noise = Tensor<T>::leaf({1, nets.spec.noise_dim});
      EncOut<T> eo = encode(nets.e, x, ya, zero_noise);
      Tensor<T> img =
          reshape(decode(nets.g, eo.mu, yb, zero_noise).image, {3, S, S});
      Tensor<T> gt = data.fetch<T>(data.find_record(r.identity, tv));
      l1 += eval_l1(img, gt);
      ss += eval_ssim(img, gt);
    }
    return {l1 / double(n), ss / double(n)};
  }

  void save_checkpoint(const std::string& path) const {
    Checkpoint c;
    add_i64(c, "iter", iter);
    add_bytes(c, "preset", std::string(1, cfg.preset));
    add_bytes(c, "netspec", netspec_text(nets.spec));
    for (const auto& [name, p] : all_params) add_f32(c, "p/" + name, p);
    for (std::size_t i = 0; i < feats.ws.size(); ++i) {
      add_f32(c, "feat/w" + std::to_string(i), feats.ws[i]);
      add_f32(c, "feat/b" + std::to_string(i), feats.bs[i]);
    }
    const char* gnames[3] = {"eg", "d", "dac"};
    const AdamGroup<T>* groups[3] = {&opt_eg, &opt_d, &opt_dac};
    for (int gi = 0; gi < 3; ++gi) {
      const AdamGroup<T>& o = *groups[gi];
      const std::string pre = std::string("opt/") + gnames[gi];
      add_i64(c, pre + "/t", o.t);
      for (std::size_t i = 0; i < o.names.size(); ++i) {
        add_f64_vec(c, pre + "/m/" + o.names[i], o.m[i]);
        add_f64_vec(c, pre + "/v/" + o.names[i], o.v[i]);
      }
    }
    for (const auto& [name, sp] : sn_entries(const_cast<Discriminator<T>&>(nets.d), "d")) {
      add_f64_vec(c, "sn/u/" + name, sp->u);
      add_f64_vec(c, "sn/v/" + name, sp->v);
    }
    add_bytes(c, "rng", pool.serialize());
    write_checkpoint(path, c);
  }

  void load_checkpoint(const std::string& path) {
    Checkpoint c = read_checkpoint(path);
    const std::string saved_spec = get_bytes(c, "netspec");
    DVS_CHECK(saved_spec == netspec_text(nets.spec),
              "checkpoint '", path,
              "' was written for a different network layout than this run");
    const std::string saved_preset = get_bytes(c, "preset");
    DVS_CHECK(saved_preset == std::string(1, cfg.preset), "checkpoint '", path,
              "' is preset ", saved_preset, " but this run is preset ",
              std::string(1, cfg.preset));
    for (auto& [name, p] : all_params) load_f32(c, "p/" + name, p);
    for (std::size_t i = 0; i < feats.ws.size(); ++i) {
      load_f32(c, "feat/w" + std::to_string(i), feats.ws[i]);
      load_f32(c, "feat/b" + std::to_string(i), feats.bs[i]);
    }
    const char* gnames[3] = {"eg", "d", "dac"};
    AdamGroup<T>* groups[3] = {&opt_eg, &opt_d, &opt_dac};
    for (int gi = 0; gi < 3; ++gi) {
      AdamGroup<T>& o = *groups[gi];
      const std::string pre = std::string("opt/") + gnames[gi];
      o.t = get_i64(c, pre + "/t");
      for (std::size_t i = 0; i < o.names.size(); ++i) {
        o.m[i] = get_f64_vec(c, pre + "/m/" + o.names[i]);
        o.v[i] = get_f64_vec(c, pre + "/v/" + o.names[i]);
        DVS_CHECK(long(o.m[i].size()) == o.params[i].numel() &&
                      long(o.v[i].size()) == o.params[i].numel(),
                  "checkpoint: optimizer state for '", o.names[i],
                  "' does not match the parameter size");
      }
    }
    for (auto& [name, sp] : sn_entries(nets.d, "d")) {
      sp->u = get_f64_vec(c, "sn/u/" + name);
      DVS_CHECK(long(sp->u.size()) == sp->rows,
                "checkpoint: 'sn/u/", name, "' has the wrong length");
      if (c.find("sn/v/" + name)) {
        sp->v = get_f64_vec(c, "sn/v/" + name);
        DVS_CHECK(long(sp->v.size()) == sp->w.numel() / sp->rows,
                  "checkpoint: 'sn/v/", name, "' has the wrong length");
      } else {
        sp->refresh_v();
      }
    }
    pool.deserialize(get_bytes(c, "rng"));
    iter = get_i64(c, "iter");
  }

  std::string ckpt_path(long at) const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt_%06ld.bin", at);
    return cfg.out_dir + "/" + std::string(buf);
  }

  // Full loop: CSV metrics, periodic checkpoints, optional resume.
  void run() {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    const std::string csv_path = cfg.out_dir + "/metrics.csv";
    std::ofstream csv(csv_path, std::ios::trunc);
    DVS_CHECK(csv.good(), "train: cannot write '", csv_path, "'");
    csv << "iter,kl,adv_d,adv_g,style,content,pixel,cls_e,cls_dac,zrec,"
           "eval_l1,eval_ssim\n";

    if (!cfg.resume.empty()) load_checkpoint(cfg.resume);
    if (iter == 0) save_checkpoint(ckpt_path(0));

    auto& gbatch = pool.stream("batch");
    while (iter < cfg.iterations) {
      StepOutputs<T> so;
      if (cfg.paired) {
        PairedBatch<T> p = sample_paired_batch<T>(data, true, gbatch, cfg.batch);
        so = train_step(p.base, &p.x_target);
      } else {
        Batch<T> b = sample_unpaired_batch<T>(data, true, gbatch, cfg.batch);
        so = train_step(b, nullptr);
      }
      ++iter;
      if (cfg.log_interval > 0 && iter % cfg.log_interval == 0) {
        const auto [el1, essim] = evaluate(cfg.eval_count);
        csv << iter << ',' << fmt(so.kl) << ',' << fmt(so.adv_d) << ','
            << fmt(so.adv_g) << ',' << fmt(so.style) << ',' << fmt(so.content)
            << ',' << fmt(so.pixel) << ',' << fmt(so.cls_e) << ','
            << fmt(so.cls_dac) << ',' << fmt(so.zrec) << ',' << fmt(el1) << ','
            << fmt(essim) << '\n';
        csv.flush();
      }
      if (cfg.checkpoint_interval > 0 && iter % cfg.checkpoint_interval == 0)
        save_checkpoint(ckpt_path(iter));
    }
    save_checkpoint(ckpt_path(iter));
  }

  static std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  }

  TrainConfig cfg;
  DatasetIndex data;
  RngPool pool;
  Networks<T> nets;
  FeatureExtractor<T> feats;
  NamedParams<T> all_params;
  AdamGroup<T> opt_eg, opt_d, opt_dac;
  LossWeights weights;
  long iter = 0;

 private:
  Tensor<T> draw_normal(Shape shape, std::mt19937_64& g) {
    Tensor<T> t = Tensor<T>::leaf(std::move(shape));
    fill_normal(t, g);
    return t;
  }
};

// Rebuild networks from a checkpoint alone; tools that synthesize or score
// need no training configuration.
template <typename T>
struct LoadedNets {
  Networks<T> nets;
  char preset = 'D';
  long iter = 0;
};

template <typename T>
LoadedNets<T> load_networks(const std::string& path) {
  Checkpoint c = read_checkpoint(path);
  LoadedNets<T> out;
  const NetworkSpec spec = netspec_from_text(get_bytes(c, "netspec"));
  RngPool scratch(0);
  out.nets = make_networks<T>(spec, scratch);
  NamedParams<T> ps = named_params(out.nets);
  for (auto& [name, p] : ps) load_f32(c, "p/" + name, p);
  for (auto& [name, sp] : sn_entries(out.nets.d, "d")) {
    if (c.find("sn/u/" + name)) sp->u = get_f64_vec(c, "sn/u/" + name);
    if (c.find("sn/v/" + name))
      sp->v = get_f64_vec(c, "sn/v/" + name);
    else
      sp->refresh_v();
  }
  const std::string pr = get_bytes(c, "preset");
  if (pr.size() == 1) out.preset = pr[0];
  out.iter = get_i64(c, "iter");
  return out;
}

}  // namespace dvs
