#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dvs/data.hpp"
#include "dvs/png_io.hpp"
#include "dvs/trainer.hpp"

namespace fs = std::filesystem;
using dvs::Tensor;

namespace {

struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};

const char* kUsage =
    "usage: dvs <command> [flags]\n"
    "\n"
    "commands:\n"
    "  gen-data     render a spinner dataset to disk\n"
    "               --out DIR [--size 32] [--views 8] [--identities 200]\n"
    "               [--seed 1] [--force]\n"
    "  train        run the training loop\n"
    "               [--config FILE] [--preset A..F] [--paired] [--out DIR]\n"
    "               [--dataset DIR] [--iterations N] [--batch N] [--seed N]\n"
    "  synthesize   translate one source image to target views\n"
    "               --checkpoint F --input SPEC --out DIR [--views all|list]\n"
    "               [--seed 1] [--dataset DIR] [--data-seed 1] [--source-view 0]\n"
    "  interpolate  walk between two views in label or filter space\n"
    "               --checkpoint F --input SPEC --from-view A --to-view B\n"
    "               --steps N --out DIR [--on w|y] [--seed 1] [--dataset DIR]\n"
    "               [--data-seed 1] [--source-view 0]\n"
    "  dump-flows   write the deformation fields as images and raw f32\n"
    "               --checkpoint F --input SPEC --target-view T --out DIR\n"
    "               [--seed 1] [--dataset DIR] [--data-seed 1] [--source-view 0]\n"
    "  eval         score view translation against ground truth\n"
    "               --checkpoint F --out DIR [--dataset DIR] [--identities 200]\n"
    "               [--data-seed 1] [--split test] [--limit 0] [--identity-stub]\n"
    "\n"
    "SPEC is either <identity>/<view> (rendered or looked up in --dataset)\n"
    "or a path to a PNG, with --source-view naming its view label.\n";

// ---- flag handling ----

class Cli {
 public:
  Cli(int argc, char** argv, int from, const std::set<std::string>& bool_flags) {
    for (int i = from; i < argc; ++i) {
      std::string a = argv[i];
      if (a.rfind("--", 0) != 0)
        throw UsageError("unexpected argument '" + a + "'");
      a = a.substr(2);
      const std::size_t eq = a.find('=');
      if (eq != std::string::npos) {
        kv_[a.substr(0, eq)] = a.substr(eq + 1);
      } else if (bool_flags.count(a)) {
        kv_[a] = "true";
      } else {
        if (i + 1 >= argc) throw UsageError("flag --" + a + " needs a value");
        kv_[a] = argv[++i];
      }
    }
  }

  bool has(const std::string& k) const { return kv_.count(k) != 0; }

  std::string str(const std::string& k, const std::string& dflt = "") const {
    used_.insert(k);
    auto it = kv_.find(k);
    return it == kv_.end() ? dflt : it->second;
  }

  std::string require(const std::string& k) const {
    used_.insert(k);
    auto it = kv_.find(k);
    if (it == kv_.end()) throw UsageError("flag --" + k + " is required");
    return it->second;
  }

  long num(const std::string& k, long dflt) const {
    used_.insert(k);
    auto it = kv_.find(k);
    if (it == kv_.end()) return dflt;
    return to_long(k, it->second);
  }

  long require_num(const std::string& k) const {
    return to_long(k, require(k));
  }

  bool flag(const std::string& k) const {
    used_.insert(k);
    auto it = kv_.find(k);
    return it != kv_.end() && it->second == "true";
  }

  void reject_unknown() const {
    std::string extra;
    for (const auto& [k, v] : kv_)
      if (!used_.count(k)) extra += (extra.empty() ? "--" : ", --") + k;
    if (!extra.empty()) throw UsageError("unknown flag(s): " + extra);
  }

  // echo for the manifest
  std::string describe(const std::string& command) const {
    std::string s = "{\n  \"command\": \"" + command + "\"";
    for (const auto& [k, v] : kv_) s += ",\n  \"" + k + "\": \"" + v + "\"";
    return s + "\n}\n";
  }

 private:
  static long to_long(const std::string& k, const std::string& v) {
    std::size_t pos = 0;
    long out = 0;
    try {
      out = std::stol(v, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != v.size() || v.empty())
      throw UsageError("flag --" + k + " wants an integer, got '" + v + "'");
    return out;
  }

  std::map<std::string, std::string> kv_;
  mutable std::set<std::string> used_;
};

std::string fmt9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::string(buf);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  DVS_CHECK(f.good(), "cannot write '", path, "'");
  f << text;
}

void make_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
}

// ---- image helpers ----

Tensor<float> zero_noise(long n, long dim) { return Tensor<float>::leaf({n, dim}); }

Tensor<float> onehot(long v, long V) {
  Tensor<float> y = Tensor<float>::leaf({1, V});
  y.data()[v] = 1.0f;
  return y;
}

dvs::ImageU8 to_u8(const Tensor<float>& x4) {
  return dvs::chw_to_u8(dvs::reshape(x4, {x4.dim(1), x4.dim(2), x4.dim(3)}));
}

dvs::ImageU8 tile_row(const std::vector<dvs::ImageU8>& cells, int sep = 2) {
  DVS_CHECK(!cells.empty(), "tile_row: nothing to tile");
  const long h = cells[0].height, w = cells[0].width;
  const long n = long(cells.size());
  dvs::ImageU8 out;
  out.height = h;
  out.width = n * w + (n - 1) * sep;
  out.rgb.assign(std::size_t(out.width * out.height * 3), 255);
  for (long c = 0; c < n; ++c) {
    const long x0 = c * (w + sep);
    for (long y = 0; y < h; ++y)
      std::memcpy(out.rgb.data() + (y * out.width + x0) * 3,
                  cells[std::size_t(c)].rgb.data() + y * w * 3,
                  std::size_t(w * 3));
  }
  return out;
}

// diverging map: negative fades to blue, positive to red, zero stays white
dvs::ImageU8 signed_map(const float* v, long h, long w, double vmax) {
  dvs::ImageU8 img;
  img.width = w;
  img.height = h;
  img.rgb.resize(std::size_t(h * w * 3));
  const double m = vmax > 0 ? vmax : 1.0;
  for (long i = 0; i < h * w; ++i) {
    double t = double(v[i]) / m;
    t = t < -1 ? -1 : (t > 1 ? 1 : t);
    const unsigned char fade = (unsigned char)std::lround(255.0 * (1.0 - std::abs(t)));
    unsigned char* p = img.rgb.data() + i * 3;
    if (t >= 0) {
      p[0] = 255;
      p[1] = fade;
      p[2] = fade;
    } else {
      p[0] = fade;
      p[1] = fade;
      p[2] = 255;
    }
  }
  return img;
}

void hsv_to_rgb(double hdeg, double s, double val, unsigned char* out) {
  const double c = val * s;
  const double hp = hdeg / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) r = c, g = x;
  else if (hp < 2) r = x, g = c;
  else if (hp < 3) g = c, b = x;
  else if (hp < 4) g = x, b = c;
  else if (hp < 5) r = x, b = c;
  else r = c, b = x;
  const double m = val - c;
  out[0] = (unsigned char)std::lround(255.0 * (r + m));
  out[1] = (unsigned char)std::lround(255.0 * (g + m));
  out[2] = (unsigned char)std::lround(255.0 * (b + m));
}

// direction as hue, magnitude as saturation over the group-mean flow
dvs::ImageU8 flow_wheel(const Tensor<float>& dx, const Tensor<float>& dy) {
  const long G = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
  std::vector<double> mx(std::size_t(h * w), 0.0), my(std::size_t(h * w), 0.0);
  for (long g = 0; g < G; ++g)
    for (long i = 0; i < h * w; ++i) {
      mx[std::size_t(i)] += double(dx.data()[g * h * w + i]) / double(G);
      my[std::size_t(i)] += double(dy.data()[g * h * w + i]) / double(G);
    }
  double mmax = 0;
  for (long i = 0; i < h * w; ++i)
    mmax = std::max(mmax, std::hypot(mx[std::size_t(i)], my[std::size_t(i)]));
  if (mmax <= 0) mmax = 1.0;
  dvs::ImageU8 img;
  img.width = w;
  img.height = h;
  img.rgb.resize(std::size_t(h * w * 3));
  for (long i = 0; i < h * w; ++i) {
    const double ang = std::atan2(my[std::size_t(i)], mx[std::size_t(i)]);
    double hdeg = ang * 180.0 / M_PI;
    if (hdeg < 0) hdeg += 360.0;
    const double sat = std::hypot(mx[std::size_t(i)], my[std::size_t(i)]) / mmax;
    hsv_to_rgb(hdeg, sat, 1.0, img.rgb.data() + i * 3);
  }
  return img;
}

// ---- source resolution ----

struct SourceImage {
  Tensor<float> x;  // (1, 3, S, S)
  long view = 0;
  long identity = -1;
};

bool all_digits(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s)
    if (!std::isdigit((unsigned char)c)) return false;
  return true;
}

SourceImage resolve_input(const std::string& spec_str, const Cli& cli,
                          const dvs::NetworkSpec& spec) {
  SourceImage out;
  const long S = spec.image_size, V = spec.views;
  const std::size_t slash = spec_str.find('/');
  const bool id_view = slash != std::string::npos &&
                       all_digits(spec_str.substr(0, slash)) &&
                       all_digits(spec_str.substr(slash + 1));
  if (id_view) {
    const long id = std::stol(spec_str.substr(0, slash));
    const long v = std::stol(spec_str.substr(slash + 1));
    DVS_CHECK(v >= 0 && v < V, "view ", v, " out of range for ", V, " views");
    if (cli.has("dataset")) {
      dvs::DatasetIndex idx = dvs::load_directory_dataset(
          cli.str("dataset"), cli.num("data-seed", 1));
      DVS_CHECK(idx.image_size == S && idx.views == V, "dataset is ",
                idx.image_size, "px / ", idx.views,
                " views but the checkpoint wants ", S, "px / ", V);
      out.x = dvs::reshape(idx.fetch<float>(idx.find_record(id, v)), {1, 3, S, S});
    } else {
      dvs::SpinnerSpec sp;
      sp.size = S;
      sp.views = V;
      sp.identities = id + 1;
      sp.seed = std::uint64_t(cli.num("data-seed", 1));
      out.x = dvs::reshape(dvs::render_spinner<float>(sp, id, v), {1, 3, S, S});
    }
    out.identity = id;
    out.view = v;
  } else {
    cli.str("dataset");    // mark as consumed either way
    cli.num("data-seed", 1);
    dvs::ImageU8 img = dvs::read_png_rgb8(spec_str);
    DVS_CHECK(img.width == S && img.height == S, "input image is ", img.width,
              "x", img.height, " but the checkpoint wants ", S, "x", S);
    out.x = dvs::reshape(dvs::u8_to_chw<float>(img), {1, 3, S, S});
    out.view = cli.num("source-view", 0);
    DVS_CHECK(out.view >= 0 && out.view < V, "view ", out.view,
              " out of range for ", V, " views");
  }
  cli.num("source-view", 0);
  return out;
}

std::vector<long> parse_views(const std::string& text, long V) {
  std::vector<long> out;
  if (text == "all") {
    for (long v = 0; v < V; ++v) out.push_back(v);
    return out;
  }
  std::size_t at = 0;
  while (at <= text.size()) {
    const std::size_t comma = text.find(',', at);
    const std::string tok =
        text.substr(at, comma == std::string::npos ? std::string::npos : comma - at);
    if (!all_digits(tok))
      throw UsageError("--views wants 'all' or a comma list of indices, got '" +
                       text + "'");
    const long v = std::stol(tok);
    DVS_CHECK(v < V, "view ", v, " out of range for ", V, " views");
    out.push_back(v);
    if (comma == std::string::npos) break;
    at = comma + 1;
  }
  DVS_CHECK(!out.empty(), "--views selected nothing");
  return out;
}

// ---- commands ----

int cmd_gen_data(const Cli& cli) {
  const std::string out = cli.require("out");
  dvs::SpinnerSpec sp;
  sp.size = cli.num("size", 32);
  sp.views = cli.num("views", 8);
  sp.identities = cli.num("identities", 200);
  sp.seed = std::uint64_t(cli.num("seed", 1));
  const bool force = cli.flag("force");
  cli.reject_unknown();
  sp.validate();

  if (fs::exists(out) && !fs::is_empty(out) && !force)
    DVS_CHECK(false, "'", out, "' already exists and is not empty; pass --force to overwrite");
  make_out_dir(out);

  char idbuf[32];
  for (long id = 0; id < sp.identities; ++id) {
    std::snprintf(idbuf, sizeof idbuf, "%04ld", id);
    const std::string dir = out + "/" + idbuf;
    make_out_dir(dir);
    for (long v = 0; v < sp.views; ++v)
      dvs::write_png_rgb8(dir + "/" + std::to_string(v) + ".png",
                          dvs::chw_to_u8(dvs::render_spinner<double>(sp, id, v)));
  }
  std::string manifest = "{\n  \"command\": \"gen-data\",\n";
  manifest += "  \"size\": " + std::to_string(sp.size) + ",\n";
  manifest += "  \"views\": " + std::to_string(sp.views) + ",\n";
  manifest += "  \"identities\": " + std::to_string(sp.identities) + ",\n";
  manifest += "  \"seed\": " + std::to_string(long(sp.seed)) + "\n}\n";
  write_text(out + "/manifest.txt", manifest);
  std::printf("wrote %ld identities x %ld views under %s\n", sp.identities,
              sp.views, out.c_str());
  return 0;
}

int cmd_train(const Cli& cli) {
  dvs::TrainConfig cfg;
  if (cli.has("config"))
    cfg = dvs::TrainConfig::from_config(dvs::ConfigMap::load(cli.str("config")));
  else
    cli.str("config");
  if (cli.has("preset")) {
    const std::string p = cli.str("preset");
    if (p.size() != 1 || p[0] < 'A' || p[0] > 'F')
      throw UsageError("unknown preset '" + p +
                       "'; valid presets are A, B, C, D, E, F");
    cfg.preset = p[0];
  } else {
    cli.str("preset");
  }
  if (cli.flag("paired")) cfg.paired = true;
  if (cli.has("out")) cfg.out_dir = cli.str("out");
  if (cli.has("dataset")) cfg.dataset = cli.str("dataset");
  cfg.iterations = cli.num("iterations", cfg.iterations);
  cfg.batch = cli.num("batch", cfg.batch);
  cfg.seed = std::uint64_t(cli.num("seed", long(cfg.seed)));
  cli.str("out");
  cli.str("dataset");
  cli.reject_unknown();

  cfg.out_dir += std::string("/preset_") + cfg.preset;  // runs never collide
  cfg.validate();
  dvs::Trainer<float> t(cfg);
  make_out_dir(cfg.out_dir);
  write_text(cfg.out_dir + "/manifest.txt", cli.describe("train"));
  t.run();
  std::printf("finished %ld iterations; artifacts under %s\n", cfg.iterations,
              cfg.out_dir.c_str());
  return 0;
}

int cmd_synthesize(const Cli& cli) {
  const std::string ckpt = cli.require("checkpoint");
  const std::string input = cli.require("input");
  const std::string out = cli.require("out");
  const std::string views_text = cli.str("views", "all");
  const std::uint64_t seed = std::uint64_t(cli.num("seed", 1));

  auto ln = dvs::load_networks<float>(ckpt);
  const dvs::NetworkSpec& spec = ln.nets.spec;
  SourceImage src = resolve_input(input, cli, spec);
  cli.reject_unknown();
  const std::vector<long> views = parse_views(views_text, spec.views);

  dvs::NoGradGuard ng;
  dvs::RngPool pool(seed);
  Tensor<float> noise_e = Tensor<float>::leaf({1, spec.noise_dim});
  dvs::fill_normal(noise_e, pool.stream("psi/e"));
  Tensor<float> noise_g = Tensor<float>::leaf({1, spec.noise_dim});
  dvs::fill_normal(noise_g, pool.stream("psi/g"));

  dvs::EncOut<float> eo =
      dvs::encode(ln.nets.e, src.x, onehot(src.view, spec.views), noise_e);

  std::vector<dvs::ImageU8> cells = {to_u8(src.x)};
  std::string legend = "cell 0: source (view " + std::to_string(src.view) + ")\n";
  for (std::size_t i = 0; i < views.size(); ++i) {
    const long v = views[i];
    Tensor<float> img =
        dvs::decode(ln.nets.g, eo.mu, onehot(v, spec.views), noise_g).image;
    cells.push_back(to_u8(img));
    legend += "cell " + std::to_string(i + 1) + ": view " + std::to_string(v) +
              (v == src.view ? " (reconstruction)\n" : "\n");
  }
  make_out_dir(out);
  dvs::write_png_rgb8(out + "/grid.png", tile_row(cells));
  write_text(out + "/grid.txt", legend);
  write_text(out + "/manifest.txt", cli.describe("synthesize"));
  std::printf("wrote a %zu-cell grid to %s/grid.png\n", cells.size(), out.c_str());
  return 0;
}

int cmd_interpolate(const Cli& cli) {
  const std::string ckpt = cli.require("checkpoint");
  const std::string input = cli.require("input");
  const std::string out = cli.require("out");
  const long steps = cli.require_num("steps");
  if (steps < 2) throw UsageError("--steps must be at least 2");
  const std::string on = cli.str("on", "w");
  if (on != "w" && on != "y") throw UsageError("--on must be 'w' or 'y'");
  const std::uint64_t seed = std::uint64_t(cli.num("seed", 1));

  auto ln = dvs::load_networks<float>(ckpt);
  const dvs::NetworkSpec& spec = ln.nets.spec;
  const long from = cli.require_num("from-view");
  const long to = cli.require_num("to-view");
  DVS_CHECK(from >= 0 && from < spec.views, "view ", from, " out of range for ",
            spec.views, " views");
  DVS_CHECK(to >= 0 && to < spec.views, "view ", to, " out of range for ",
            spec.views, " views");
  SourceImage src = resolve_input(input, cli, spec);
  cli.reject_unknown();

  dvs::NoGradGuard ng;
  dvs::RngPool pool(seed);
  Tensor<float> noise_e = Tensor<float>::leaf({1, spec.noise_dim});
  dvs::fill_normal(noise_e, pool.stream("psi/e"));
  Tensor<float> noise_g = Tensor<float>::leaf({1, spec.noise_dim});
  dvs::fill_normal(noise_g, pool.stream("psi/g"));

  dvs::EncOut<float> eo =
      dvs::encode(ln.nets.e, src.x, onehot(src.view, spec.views), noise_e);
  Tensor<float> ya = onehot(from, spec.views);
  Tensor<float> yb = onehot(to, spec.views);

  std::vector<dvs::ImageU8> cells;
  if (on == "y") {
    for (long k = 0; k < steps; ++k) {
      const float t = float(k) / float(steps - 1);
      Tensor<float> yt = dvs::add(dvs::scale(ya, 1.0f - t), dvs::scale(yb, t));
      cells.push_back(to_u8(dvs::decode(ln.nets.g, eo.mu, yt, noise_g).image));
    }
  } else {
    DVS_CHECK(spec.use_cdm,
              "filter interpolation needs the deformation module; "
              "this checkpoint has no CDM present");
    dvs::DecOut<float> da = dvs::decode(ln.nets.g, eo.mu, ya, noise_g);
    dvs::DecOut<float> db = dvs::decode(ln.nets.g, eo.mu, yb, noise_g);
    for (long k = 0; k < steps; ++k) {
      const float t = float(k) / float(steps - 1);
      Tensor<float> wx =
          dvs::add(dvs::scale(da.cdm.wx, 1.0f - t), dvs::scale(db.cdm.wx, t));
      Tensor<float> wy =
          dvs::add(dvs::scale(da.cdm.wy, 1.0f - t), dvs::scale(db.cdm.wy, t));
      cells.push_back(
          to_u8(dvs::decode_with_filters(ln.nets.g, eo.mu, ya, wx, wy).image));
    }
  }
  make_out_dir(out);
  dvs::write_png_rgb8(out + "/strip.png", tile_row(cells));
  write_text(out + "/notes.txt",
             "frames = " + std::to_string(steps) + "\non = " + on +
                 "\nFID: not implemented (requires external pre-trained classifier)\n");
  write_text(out + "/manifest.txt", cli.describe("interpolate"));
  std::printf("wrote %ld frames to %s/strip.png\n", steps, out.c_str());
  return 0;
}

int cmd_dump_flows(const Cli& cli) {
  const std::string ckpt = cli.require("checkpoint");
  const std::string input = cli.require("input");
  const std::string out = cli.require("out");
  const std::uint64_t seed = std::uint64_t(cli.num("seed", 1));

  auto ln = dvs::load_networks<float>(ckpt);
  const dvs::NetworkSpec& spec = ln.nets.spec;
  DVS_CHECK(spec.use_cdm, "no CDM present in this checkpoint");
  const long tv = cli.require_num("target-view");
  DVS_CHECK(tv >= 0 && tv < spec.views, "view ", tv, " out of range for ",
            spec.views, " views");
  SourceImage src = resolve_input(input, cli, spec);
  cli.reject_unknown();

  dvs::NoGradGuard ng;
  dvs::RngPool pool(seed);
  Tensor<float> noise_e = Tensor<float>::leaf({1, spec.noise_dim});
  dvs::fill_normal(noise_e, pool.stream("psi/e"));
  Tensor<float> noise_g = Tensor<float>::leaf({1, spec.noise_dim});
  dvs::fill_normal(noise_g, pool.stream("psi/g"));

  dvs::EncOut<float> eo =
      dvs::encode(ln.nets.e, src.x, onehot(src.view, spec.views), noise_e);
  dvs::DecOut<float> go =
      dvs::decode(ln.nets.g, eo.mu, onehot(tv, spec.views), noise_g);
  DVS_CHECK(eo.has_cdm && go.has_cdm, "no CDM present in this checkpoint");

  make_out_dir(out);
  std::string notes;
  struct Side {
    const char* name;
    const dvs::CdmOut<float>* cdm;
  } sides[2] = {{"e", &eo.cdm}, {"g", &go.cdm}};
  for (const Side& side : sides) {
    const Tensor<float>& dx = side.cdm->dx;
    const Tensor<float>& dy = side.cdm->dy;
    const long G = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
    double vmax = 0;
    for (long i = 0; i < dx.numel(); ++i) {
      vmax = std::max(vmax, std::abs(double(dx.data()[i])));
      vmax = std::max(vmax, std::abs(double(dy.data()[i])));
    }
    for (long g = 0; g < G; ++g) {
      dvs::write_png_rgb8(
          out + "/" + side.name + "_dx_" + std::to_string(g) + ".png",
          signed_map(dx.data() + g * h * w, h, w, vmax));
      dvs::write_png_rgb8(
          out + "/" + side.name + "_dy_" + std::to_string(g) + ".png",
          signed_map(dy.data() + g * h * w, h, w, vmax));
    }
    dvs::write_png_rgb8(out + "/" + side.name + "_wheel.png", flow_wheel(dx, dy));

    std::ofstream raw(out + "/" + side.name + "_flow.f32", std::ios::binary);
    DVS_CHECK(raw.good(), "cannot write '", out, "/", side.name, "_flow.f32'");
    raw.write(reinterpret_cast<const char*>(dx.data()), dx.numel() * 4);
    raw.write(reinterpret_cast<const char*>(dy.data()), dy.numel() * 4);
    raw.close();

    notes += std::string(side.name) + ": groups = " + std::to_string(G) +
             ", size = " + std::to_string(h) + "x" + std::to_string(w) +
             ", max |flow| = " + fmt9(vmax) + "\n";
  }

  if (src.view == tv) {
    const Tensor<float>&exd = eo.cdm.dx, &eyd = eo.cdm.dy;
    const Tensor<float>&gxd = go.cdm.dx, &gyd = go.cdm.dy;
    double acc = 0;
    long n = 0;
    for (long i = 0; i < exd.numel(); ++i) {
      const double ex = exd.data()[i], ey = eyd.data()[i];
      const double gx = gxd.data()[i], gy = gyd.data()[i];
      const double me = std::hypot(ex, ey), mg = std::hypot(gx, gy);
      if (me < 1e-8 || mg < 1e-8) continue;
      acc += (ex * gx + ey * gy) / (me * mg);
      ++n;
    }
    notes += "mean_flow_cosine = " +
             (n ? fmt9(acc / double(n)) : std::string("n/a")) +
             "\n";
  } else {
    notes += "mean_flow_cosine = n/a (source and target labels differ)\n";
  }
  write_text(out + "/flows.txt", notes);
  write_text(out + "/manifest.txt", cli.describe("dump-flows"));
  std::printf("wrote flow maps to %s\n", out.c_str());
  return 0;
}

int cmd_eval(const Cli& cli) {
  const std::string ckpt = cli.require("checkpoint");
  const std::string out = cli.require("out");
  const std::string split = cli.str("split", "test");
  if (split != "test" && split != "train")
    throw UsageError("--split must be 'test' or 'train'");
  const long limit = cli.num("limit", 0);
  const bool stub = cli.flag("identity-stub");

  auto ln = dvs::load_networks<float>(ckpt);
  const dvs::NetworkSpec& spec = ln.nets.spec;
  dvs::DatasetIndex idx;
  if (cli.has("dataset")) {
    idx = dvs::load_directory_dataset(cli.str("dataset"), cli.num("data-seed", 1));
  } else {
    cli.str("dataset");
    dvs::SpinnerSpec sp;
    sp.size = spec.image_size;
    sp.views = spec.views;
    sp.identities = cli.num("identities", 200);
    sp.seed = std::uint64_t(cli.num("data-seed", 1));
    idx = dvs::make_spinner_index(sp);
  }
  cli.num("identities", 200);
  cli.num("data-seed", 1);
  cli.reject_unknown();
  DVS_CHECK(idx.image_size == spec.image_size && idx.views == spec.views,
            "dataset is ", idx.image_size, "px / ", idx.views,
            " views but the checkpoint wants ", spec.image_size, "px / ",
            spec.views);

  const std::vector<long>& items = idx.split(split == "train");
  DVS_CHECK(!items.empty(), "the ", split, " split is empty");
  const long n = limit > 0 ? std::min<long>(limit, long(items.size()))
                           : long(items.size());
  const long V = spec.views, S = spec.image_size;

  make_out_dir(out);
  std::ofstream csv(out + "/eval.csv", std::ios::trunc);
  DVS_CHECK(csv.good(), "cannot write '", out, "/eval.csv'");
  csv << "identity,source_view,target_view,l1,ssim\n";

  dvs::NoGradGuard ng;
  Tensor<float> nz = zero_noise(1, spec.noise_dim);
  std::vector<double> l1_by_view(std::size_t(V), 0.0), ss_by_view(std::size_t(V), 0.0);
  std::vector<long> count_by_view(std::size_t(V), 0);
  for (long i = 0; i < n; ++i) {
    const long ri = items[std::size_t(i)];
    const dvs::DataRecord& r = idx.records[std::size_t(ri)];
    Tensor<float> x = dvs::reshape(idx.fetch<float>(ri), {1, 3, S, S});
    dvs::EncOut<float> eo = dvs::encode(ln.nets.e, x, onehot(r.view, V), nz);
    for (long tv = 0; tv < V; ++tv) {
      Tensor<float> img =
          stub ? x : dvs::decode(ln.nets.g, eo.mu, onehot(tv, V), nz).image;
      Tensor<float> gt = idx.fetch<float>(idx.find_record(r.identity, tv));
      Tensor<float> img3 = dvs::reshape(img, {3, S, S});
      const double l1 = dvs::eval_l1(img3, gt);
      const double ss = dvs::eval_ssim(img3, gt);
      csv << r.identity << ',' << r.view << ',' << tv << ','
          << fmt9(l1) << ',' << fmt9(ss)
          << '\n';
      l1_by_view[std::size_t(tv)] += l1;
      ss_by_view[std::size_t(tv)] += ss;
      count_by_view[std::size_t(tv)] += 1;
    }
  }
  csv.close();

  std::ofstream sum(out + "/summary.csv", std::ios::trunc);
  DVS_CHECK(sum.good(), "cannot write '", out, "/summary.csv'");
  sum << "target_view,l1,ssim\n";
  double l1_all = 0, ss_all = 0;
  long n_all = 0;
  for (long tv = 0; tv < V; ++tv) {
    const long c = count_by_view[std::size_t(tv)];
    if (c == 0) continue;
    sum << tv << ',' << fmt9(l1_by_view[std::size_t(tv)] / c)
        << ',' << fmt9(ss_by_view[std::size_t(tv)] / c) << '\n';
    l1_all += l1_by_view[std::size_t(tv)];
    ss_all += ss_by_view[std::size_t(tv)];
    n_all += c;
  }
  sum << "all," << fmt9(l1_all / double(n_all)) << ','
      << fmt9(ss_all / double(n_all)) << '\n';
  sum << "FID,not implemented (requires external pre-trained classifier)\n";
  sum.close();
  write_text(out + "/manifest.txt", cli.describe("eval"));
  std::printf("%ld records x %ld views: L1 %.4f, SSIM %.4f\n", n, V,
              l1_all / double(n_all), ss_all / double(n_all));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fputs(kUsage, stderr);
    return 2;
  }
  const std::string cmd = argv[1];
  if (cmd == "help" || cmd == "--help" || cmd == "-h") {
    std::fputs(kUsage, stdout);
    return 0;
  }
  try {
    const std::set<std::string> bools = {"force", "paired", "identity-stub"};
    Cli cli(argc, argv, 2, bools);
    if (cmd == "gen-data") return cmd_gen_data(cli);
    if (cmd == "train") return cmd_train(cli);
    if (cmd == "synthesize") return cmd_synthesize(cli);
    if (cmd == "interpolate") return cmd_interpolate(cli);
    if (cmd == "dump-flows") return cmd_dump_flows(cli);
    if (cmd == "eval") return cmd_eval(cli);
    throw UsageError("unknown command '" + cmd + "'");
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n\n%s", e.what(), kUsage);
    return 2;
  } catch (const dvs::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
