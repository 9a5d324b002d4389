#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dvs/kernels.hpp"
#include "dvs/random.hpp"
#include "dvs/tensor.hpp"

namespace dvs {

// Training objectives.  Every loss returns a scalar graph tensor; callers
// combine them through total_eg with the pinned weights.

struct LossWeights {
  double style = 0.001;
  double content = 10.0;
  double pixel = 100.0;

  void validate() const {
    DVS_CHECK(style >= 0 && content >= 0 && pixel >= 0,
              "loss weights: negative weight");
  }
};

// mean over batch of 0.5 * sum_d (mu^2 + exp(lv) - 1 - lv)
template <typename T>
Tensor<T> kl_gaussian(const Tensor<T>& mu, const Tensor<T>& logvar) {
  check_same_shape("kl_gaussian", mu, logvar);
  DVS_CHECK(mu.rank() == 2, "kl_gaussian: expects (N,D), got ",
            shape_str(mu.shape()));
  const long N = mu.dim(0);
  Tensor<T> e = add_scalar(sub(add(square(mu), exp_op(logvar)), logvar), T(-1));
  return scale(sum_all(e), T(0.5) / T(N));
}

// Cross-entropy of the softmax against the uniform distribution; pulling the
// classifier toward indifference erases view information from the latent.
template <typename T>
Tensor<T> dac_loss_uniform(const Tensor<T>& logits) {
  DVS_CHECK(logits.rank() == 2 && logits.dim(1) >= 2,
            "dac_loss_uniform: expects (N,V) with V >= 2, got ",
            shape_str(logits.shape()));
  const long N = logits.dim(0), V = logits.dim(1);
  return scale(sum_all(log_softmax(logits)), T(-1) / T(N * V));
}

// Cross-entropy against the true label rows of y_onehot.
template <typename T>
Tensor<T> dac_loss_label(const Tensor<T>& logits, const Tensor<T>& y_onehot) {
  check_same_shape("dac_loss_label", logits, y_onehot);
  const long N = logits.dim(0);
  return scale(sum_all(mul(log_softmax(logits), y_onehot)), T(-1) / T(N));
}

// ---- fixed feature stack for perceptual terms ----

// Frozen randomly initialized conv pyramid standing in for a pre-trained
// feature network; five stride-2 stages, taps after stages 2, 3 and 4.
template <typename T>
struct FeatureExtractor {
  std::vector<Tensor<T>> ws, bs;
  std::vector<long> taps = {1, 2, 3};  // 0-based stage indices

  long stages() const { return long(ws.size()); }
  void validate() const {
    for (long t : taps)
      DVS_CHECK(t >= 0 && t < stages(), "feature extractor: tap ", t,
                " out of range for ", stages(), " stages");
  }
};

template <typename T>
FeatureExtractor<T> make_feature_extractor(std::mt19937_64& g, long in_ch = 3) {
  FeatureExtractor<T> fe;
  const std::vector<long> widths = {16, 32, 64, 64, 64};
  long c = in_ch;
  for (long w : widths) {
    Tensor<T> wt = Tensor<T>::leaf({w, c, 3, 3});  // frozen: no gradient
    fill_normal(wt, g, 0.0, std::sqrt(2.0 / double(c * 9)));
    fe.ws.push_back(wt);
    fe.bs.push_back(Tensor<T>::leaf({w}));
    c = w;
  }
  return fe;
}

template <typename T>
std::vector<Tensor<T>> feature_taps(const FeatureExtractor<T>& fe,
                                    const Tensor<T>& x) {
  fe.validate();
  std::vector<Tensor<T>> stages;
  Tensor<T> h = x;
  for (long i = 0; i < fe.stages(); ++i) {
    h = lrelu(conv2d_same(h, fe.ws[std::size_t(i)], fe.bs[std::size_t(i)], 2));
    stages.push_back(h);
  }
  std::vector<Tensor<T>> out;
  for (long t : fe.taps) out.push_back(stages[std::size_t(t)]);
  return out;
}

// ---- reconstruction and perceptual distances ----

template <typename T>
Tensor<T> pixel_l1(const Tensor<T>& x, const Tensor<T>& xb) {
  check_same_shape("pixel_l1", x, xb);
  return mean_all(abs_op(sub(x, xb)));
}

template <typename T>
Tensor<T> content_loss(const Tensor<T>& x, const Tensor<T>& xb,
                       const FeatureExtractor<T>& fe) {
  check_same_shape("content_loss", x, xb);
  auto fx = feature_taps(fe, x);
  auto fb = feature_taps(fe, xb);
  Tensor<T> acc;
  for (std::size_t i = 0; i < fx.size(); ++i) {
    Tensor<T> d = mean_all(abs_op(sub(fx[i], fb[i])));
    acc = acc.defined() ? add(acc, d) : d;
  }
  return acc;
}

template <typename T>
Tensor<T> style_loss(const Tensor<T>& x, const Tensor<T>& xb,
                     const FeatureExtractor<T>& fe) {
  check_same_shape("style_loss", x, xb);
  auto fx = feature_taps(fe, x);
  auto fb = feature_taps(fe, xb);
  Tensor<T> acc;
  for (std::size_t i = 0; i < fx.size(); ++i) {
    Tensor<T> d = mean_all(abs_op(sub(gram(fx[i]), gram(fb[i]))));
    acc = acc.defined() ? add(acc, d) : d;
  }
  return acc;
}

template <typename T>
Tensor<T> z_reconstruction(const Tensor<T>& z, const Tensor<T>& z_rec) {
  check_same_shape("z_reconstruction", z, z_rec);
  return mean_all(abs_op(sub(z, z_rec)));
}

// ---- hinge adversarial pair ----

// mean max(0, 1 - real) plus the three fake groups' mean max(0, 1 + fake)
template <typename T>
Tensor<T> hinge_d(const Tensor<T>& real, const Tensor<T>& fake_rec,
                  const Tensor<T>& fake_view, const Tensor<T>& fake_prior) {
  Tensor<T> loss = mean_all(relu(add_scalar(scale(real, T(-1)), T(1))));
  for (const Tensor<T>* f : {&fake_rec, &fake_view, &fake_prior})
    loss = add(loss, mean_all(relu(add_scalar(*f, T(1)))));
  return loss;
}

// sum over the three fake groups of mean max(0, 1 - fake)
template <typename T>
Tensor<T> hinge_g(const Tensor<T>& fake_rec, const Tensor<T>& fake_view,
                  const Tensor<T>& fake_prior) {
  Tensor<T> loss;
  for (const Tensor<T>* f : {&fake_rec, &fake_view, &fake_prior}) {
    Tensor<T> t = mean_all(relu(add_scalar(scale(*f, T(-1)), T(1))));
    loss = loss.defined() ? add(loss, t) : t;
  }
  return loss;
}

// ---- total objective for the encoder and decoder ----

template <typename T>
struct EgParts {
  Tensor<T> kl, adv, style, content, pixel, zrec;
  Tensor<T> cls_e;  // undefined when no latent classifier is wired in
};

template <typename T>
Tensor<T> total_eg(const EgParts<T>& p, const LossWeights& w) {
  w.validate();
  DVS_CHECK(p.kl.defined() && p.adv.defined() && p.style.defined() &&
                p.content.defined() && p.pixel.defined() && p.zrec.defined(),
            "total_eg: missing loss component");
  Tensor<T> t = add(p.kl, p.adv);
  t = add(t, scale(p.style, T(w.style)));
  t = add(t, scale(p.content, T(w.content)));
  t = add(t, scale(p.pixel, T(w.pixel)));
  t = add(t, p.zrec);
  if (p.cls_e.defined()) t = add(t, p.cls_e);
  return t;
}

}  // namespace dvs
