#include "mtvision/video.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mtvision/errors.hpp"

namespace mtv::video {

VideoHeader parse_header_line(const std::string& line) {
  std::istringstream in(line);
  std::string magic;
  VideoHeader h;
  if (!(in >> magic >> h.w >> h.h >> h.fps_num >> h.fps_den >> h.frames) || magic != "RVID")
    throw IoError("malformed FRAMEPIPE header: \"" + line + "\"");
  std::string extra;
  if (in >> extra) throw IoError("trailing tokens in FRAMEPIPE header: \"" + line + "\"");
  if (h.w <= 0 || h.h <= 0 || h.fps_num <= 0 || h.fps_den <= 0 || h.frames < 0)
    throw IoError("invalid FRAMEPIPE header values: \"" + line + "\"");
  return h;
}

FrameReader::FrameReader(const std::string& command) {
  pipe_ = popen(command.c_str(), "r");
  if (!pipe_) throw IoError("cannot start decoder: " + command);

  std::string line;
  for (;;) {
    const int c = std::fgetc(pipe_);
    if (c == EOF) {
      pclose(pipe_);
      pipe_ = nullptr;
      throw IoError("decoder produced no FRAMEPIPE header: " + command);
    }
    if (c == '\n') break;
    line.push_back(static_cast<char>(c));
    if (line.size() > 256) {
      pclose(pipe_);
      pipe_ = nullptr;
      throw IoError("FRAMEPIPE header line too long");
    }
  }
  try {
    header_ = parse_header_line(line);
  } catch (...) {
    pclose(pipe_);
    pipe_ = nullptr;
    throw;
  }
}

FrameReader::~FrameReader() {
  if (pipe_) pclose(pipe_);
}

bool FrameReader::next_frame(Image& out) {
  if (!pipe_ || read_ >= header_.frames) return false;
  out = Image(header_.h, header_.w);
  const std::size_t need = out.px.size();
  const std::size_t got = std::fread(out.px.data(), 1, need, pipe_);
  if (got != need)
    throw IoError("short frame read: got " + std::to_string(got) + " of " +
                  std::to_string(need) + " bytes");
  ++read_;
  return true;
}

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'')
      out += "'\\''";
    else
      out.push_back(c);
  }
  out += "'";
  return out;
}

std::vector<double> sample_timestamps(const VideoHeader& h, double interval_s) {
  if (!(interval_s > 0)) throw ConfigError("sampling interval must be > 0");
  const long count = static_cast<long>(std::floor(h.duration() / interval_s));
  std::vector<double> out;
  out.reserve(static_cast<size_t>(count));
  for (long k = 0; k < count; ++k) out.push_back(static_cast<double>(k) * interval_s);
  return out;
}

long frame_index_at(const VideoHeader& h, double t) {
  const long idx = static_cast<long>(std::floor(t * h.fps()));
  return std::min(std::max(idx, 0L), h.frames - 1);
}

void write_rvid(const std::string& path, const std::vector<Image>& frames, long fps_num,
                long fps_den) {
  if (frames.empty()) throw ArityError("write_rvid: no frames");
  const int w = frames[0].w, hgt = frames[0].h;
  for (const auto& f : frames)
    if (f.w != w || f.h != hgt) throw ShapeError("write_rvid: mixed frame sizes");

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write: " + path);
  f << "RVID " << w << " " << hgt << " " << fps_num << " " << fps_den << " " << frames.size()
    << "\n";
  for (const auto& fr : frames)
    f.write(reinterpret_cast<const char*>(fr.px.data()),
            static_cast<std::streamsize>(fr.px.size()));
  if (!f) throw IoError("short write: " + path);
}

}  // namespace mtv::video
