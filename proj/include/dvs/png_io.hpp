#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "dvs/tensor.hpp"

namespace dvs {

// Minimal PNG: writes 8-bit RGB with filter 0; reads 8-bit gray/RGB/RGBA with
// any scanline filter, no interlacing.

struct ImageU8 {
  long width = 0, height = 0;
  std::vector<unsigned char> rgb;  // 3 bytes per pixel, row-major
};

namespace png_detail {

inline void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  b.push_back((unsigned char)(v >> 24));
  b.push_back((unsigned char)(v >> 16));
  b.push_back((unsigned char)(v >> 8));
  b.push_back((unsigned char)v);
}

inline std::uint32_t get_be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

inline void put_chunk(std::vector<unsigned char>& out, const char type[4],
                      const std::vector<unsigned char>& data) {
  put_be32(out, std::uint32_t(data.size()));
  const std::size_t type_at = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const std::uint32_t crc = std::uint32_t(
      crc32(0, out.data() + type_at, uInt(4 + data.size())));
  put_be32(out, crc);
}

inline int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace png_detail

inline std::vector<unsigned char> encode_png_rgb8(const ImageU8& img) {
  using namespace png_detail;
  DVS_CHECK(img.width > 0 && img.height > 0 &&
                long(img.rgb.size()) == img.width * img.height * 3,
            "png: image buffer does not match ", img.width, "x", img.height);
  std::vector<unsigned char> out = {137, 'P', 'N', 'G', 13, 10, 26, 10};

  std::vector<unsigned char> ihdr;
  put_be32(ihdr, std::uint32_t(img.width));
  put_be32(ihdr, std::uint32_t(img.height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  put_chunk(out, "IHDR", ihdr);

  const long stride = img.width * 3;
  std::vector<unsigned char> raw(std::size_t((stride + 1) * img.height));
  for (long y = 0; y < img.height; ++y) {
    raw[std::size_t(y * (stride + 1))] = 0;  // filter: none
    std::memcpy(raw.data() + y * (stride + 1) + 1, img.rgb.data() + y * stride,
                std::size_t(stride));
  }
  uLongf clen = compressBound(uLong(raw.size()));
  std::vector<unsigned char> comp(clen);
  DVS_CHECK(compress2(comp.data(), &clen, raw.data(), uLong(raw.size()), 6) == Z_OK,
            "png: deflate failed");
  comp.resize(clen);
  put_chunk(out, "IDAT", comp);
  put_chunk(out, "IEND", {});
  return out;
}

inline void write_png_rgb8(const std::string& path, const ImageU8& img) {
  const std::vector<unsigned char> bytes = encode_png_rgb8(img);
  std::FILE* f = std::fopen(path.c_str(), "wb");
  DVS_CHECK(f != nullptr, "png: cannot open '", path, "' for writing");
  const std::size_t wrote = std::fwrite(bytes.data(), 1, bytes.size(), f);
  const int closed = std::fclose(f);
  DVS_CHECK(wrote == bytes.size() && closed == 0, "png: short write to '", path, "'");
}

inline ImageU8 decode_png_rgb8(const std::vector<unsigned char>& bytes,
                               const std::string& what = "buffer") {
  using namespace png_detail;
  const unsigned char sig[8] = {137, 'P', 'N', 'G', 13, 10, 26, 10};
  DVS_CHECK(bytes.size() > 8 && std::memcmp(bytes.data(), sig, 8) == 0,
            "png: '", what, "' is not a png file");

  long width = 0, height = 0, channels = 0;
  bool seen_ihdr = false, seen_iend = false;
  std::vector<unsigned char> idat;
  std::size_t at = 8;
  while (at + 8 <= bytes.size() && !seen_iend) {
    const std::uint32_t len = get_be32(bytes.data() + at);
    DVS_CHECK(at + 12 + len <= bytes.size(), "png: '", what,
              "' truncated inside a chunk");
    const char* type = reinterpret_cast<const char*>(bytes.data() + at + 4);
    const unsigned char* data = bytes.data() + at + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      DVS_CHECK(len == 13, "png: '", what, "' malformed header");
      width = long(get_be32(data));
      height = long(get_be32(data + 4));
      const int depth = data[8], color = data[9], interlace = data[12];
      DVS_CHECK(depth == 8, "png: '", what, "' has bit depth ", depth,
                "; only 8 supported");
      DVS_CHECK(color == 0 || color == 2 || color == 6, "png: '", what,
                "' has color type ", color, "; only gray/rgb/rgba supported");
      DVS_CHECK(interlace == 0, "png: '", what, "' is interlaced; unsupported");
      channels = color == 0 ? 1 : (color == 2 ? 3 : 4);
      seen_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      seen_iend = true;
    }
    at += 12 + len;
  }
  DVS_CHECK(seen_ihdr && seen_iend && width > 0 && height > 0, "png: '", what,
            "' missing required chunks");

  const long stride = width * channels;
  const std::size_t raw_len = std::size_t((stride + 1) * height);
  std::vector<unsigned char> raw(raw_len);
  uLongf dlen = uLongf(raw_len);
  const int zr = uncompress(raw.data(), &dlen, idat.data(), uLong(idat.size()));
  DVS_CHECK(zr == Z_OK && dlen == raw_len, "png: '", what,
            "' pixel data does not inflate to the expected size");

  // undo per-scanline filters in place into the output layout
  std::vector<unsigned char> pix(std::size_t(stride * height));
  const long bpp = channels;
  for (long y = 0; y < height; ++y) {
    const unsigned char filter = raw[std::size_t(y * (stride + 1))];
    const unsigned char* src = raw.data() + y * (stride + 1) + 1;
    unsigned char* dst = pix.data() + y * stride;
    const unsigned char* up = y > 0 ? pix.data() + (y - 1) * stride : nullptr;
    DVS_CHECK(filter <= 4, "png: '", what, "' row ", y, " has filter ",
              int(filter));
    for (long x = 0; x < stride; ++x) {
      const int a = x >= bpp ? dst[x - bpp] : 0;
      const int b = up ? up[x] : 0;
      const int c = (up && x >= bpp) ? up[x - bpp] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
      }
      dst[x] = (unsigned char)(v & 0xff);
    }
  }

  ImageU8 img;
  img.width = width;
  img.height = height;
  img.rgb.resize(std::size_t(width * height * 3));
  for (long i = 0; i < width * height; ++i) {
    const unsigned char* s = pix.data() + i * channels;
    unsigned char* d = img.rgb.data() + i * 3;
    if (channels == 1) {
      d[0] = d[1] = d[2] = s[0];
    } else {
      d[0] = s[0];
      d[1] = s[1];
      d[2] = s[2];  // alpha dropped
    }
  }
  return img;
}

inline ImageU8 read_png_rgb8(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  DVS_CHECK(f != nullptr, "png: cannot open '", path, "'");
  std::fseek(f, 0, SEEK_END);
  const long sz = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(sz));
  const std::size_t got = sz > 0 ? std::fread(bytes.data(), 1, bytes.size(), f) : 0;
  std::fclose(f);
  DVS_CHECK(long(got) == sz, "png: short read from '", path, "'");
  return decode_png_rgb8(bytes, path);
}

// ---- [-1,1] float planes <-> 8-bit pixels ----

template <typename T>
ImageU8 chw_to_u8(const Tensor<T>& x) {
  DVS_CHECK(x.rank() == 3 && x.dim(0) == 3, "chw_to_u8: expects (3,H,W), got ",
            shape_str(x.shape()));
  const long H = x.dim(1), W = x.dim(2);
  ImageU8 img;
  img.width = W;
  img.height = H;
  img.rgb.resize(std::size_t(3 * H * W));
  for (long c = 0; c < 3; ++c)
    for (long i = 0; i < H * W; ++i) {
      double v = (double(x.data()[c * H * W + i]) + 1.0) * 127.5;
      v = v < 0 ? 0 : (v > 255 ? 255 : v);
      img.rgb[std::size_t(i * 3 + c)] = (unsigned char)std::lround(v);
    }
  return img;
}

template <typename T>
Tensor<T> u8_to_chw(const ImageU8& img) {
  const long H = img.height, W = img.width;
  Tensor<T> x = Tensor<T>::leaf({3, H, W});
  for (long c = 0; c < 3; ++c)
    for (long i = 0; i < H * W; ++i)
      x.data()[c * H * W + i] =
          T(double(img.rgb[std::size_t(i * 3 + c)]) / 127.5 - 1.0);
  return x;
}

}  // namespace dvs
