#include "mtvision/imageio.hpp"

#include <jpeglib.h>
#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <memory>
#include <vector>

#include "mtvision/errors.hpp"

namespace mtv {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path);
  return f;
}

// ---- PNG ----

void png_error_fn(png_structp png, png_const_charp msg) {
  (void)msg;
  std::longjmp(*static_cast<std::jmp_buf*>(png_get_error_ptr(png)), 1);
}

void png_warn_fn(png_structp, png_const_charp) {}

Image read_png_file(std::FILE* f, const std::string& path) {
  std::jmp_buf jb;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &jb, png_error_fn, png_warn_fn);
  if (!png) throw IoError("png init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png init failed");
  }

  Image img;
  std::vector<png_bytep> rows;
  if (setjmp(jb)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError("corrupt PNG: " + path);
  }

  png_init_io(png, f);
  png_read_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  img.h = static_cast<int>(h);
  img.w = static_cast<int>(w);
  img.px.resize(static_cast<size_t>(h) * w * 3);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = img.px.data() + static_cast<size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

// ---- JPEG ----

struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jb;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  std::longjmp(reinterpret_cast<JpegErrorMgr*>(cinfo->err)->jb, 1);
}

Image read_jpeg_file(std::FILE* f, const std::string& path) {
  jpeg_decompress_struct cinfo;
  JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_error_exit;

  Image img;
  if (setjmp(err.jb)) {
    jpeg_destroy_decompress(&cinfo);
    throw ParseError("corrupt JPEG: " + path);
  }

  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);

  img.h = static_cast<int>(cinfo.output_height);
  img.w = static_cast<int>(cinfo.output_width);
  img.px.resize(static_cast<size_t>(img.h) * img.w * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.px.data() + static_cast<size_t>(cinfo.output_scanline) * img.w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

// ---- PPM (P6, maxval 255) ----

int read_ppm_token(std::FILE* f) {
  int c = std::fgetc(f);
  while (c == '#' || std::isspace(c)) {
    if (c == '#')
      while (c != '\n' && c != EOF) c = std::fgetc(f);
    c = std::fgetc(f);
  }
  int v = 0;
  bool any = false;
  while (c >= '0' && c <= '9') {
    v = v * 10 + (c - '0');
    any = true;
    c = std::fgetc(f);
  }
  if (!any) return -1;
  return v;
}

Image read_ppm_file(std::FILE* f, const std::string& path) {
  char magic[2];
  if (std::fread(magic, 1, 2, f) != 2 || magic[0] != 'P' || magic[1] != '6')
    throw ParseError("not a P6 PPM: " + path);
  const int w = read_ppm_token(f);
  const int h = read_ppm_token(f);
  const int maxval = read_ppm_token(f);
  if (w <= 0 || h <= 0 || maxval != 255) throw ParseError("unsupported PPM header: " + path);
  Image img;
  img.w = w;
  img.h = h;
  img.px.resize(static_cast<size_t>(w) * h * 3);
  if (std::fread(img.px.data(), 1, img.px.size(), f) != img.px.size())
    throw ParseError("truncated PPM: " + path);
  return img;
}

}  // namespace

Image read_image(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  unsigned char magic[8] = {0};
  const size_t got = std::fread(magic, 1, sizeof(magic), f.get());
  std::rewind(f.get());
  if (got >= 8 && !std::memcmp(magic, "\x89PNG\r\n\x1a\n", 8)) return read_png_file(f.get(), path);
  if (got >= 2 && magic[0] == 0xFF && magic[1] == 0xD8) return read_jpeg_file(f.get(), path);
  if (got >= 2 && magic[0] == 'P' && magic[1] == '6') return read_ppm_file(f.get(), path);
  throw ParseError("unrecognized image format: " + path);
}

void write_png(const std::string& path, const Image& img) {
  FilePtr f = open_file(path, "wb");
  std::jmp_buf jb;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &jb, png_error_fn, png_warn_fn);
  if (!png) throw IoError("png init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png init failed");
  }
  std::vector<png_bytep> rows(static_cast<size_t>(img.h));
  if (setjmp(jb)) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed: " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.h; ++y)
    rows[static_cast<size_t>(y)] =
        const_cast<png_bytep>(img.px.data() + static_cast<size_t>(y) * img.w * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_ppm(const std::string& path, const Image& img) {
  FilePtr f = open_file(path, "wb");
  std::fprintf(f.get(), "P6\n%d %d\n255\n", img.w, img.h);
  if (std::fwrite(img.px.data(), 1, img.px.size(), f.get()) != img.px.size())
    throw IoError("short write: " + path);
}

}  // namespace mtv
