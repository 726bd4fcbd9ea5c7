#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "mtvision/types.hpp"

namespace mtv::video {

/// FRAMEPIPE contract: a decoder subprocess writes one text header line
///   "RVID <width> <height> <fps_num> <fps_den> <frame_count>\n"
/// followed by frame_count raw RGB24 frames (h*w*3 bytes each, row-major) to stdout.
/// The .rvid container used by mtv-framepipe is this exact byte stream on disk.
struct VideoHeader {
  int w = 0, h = 0;
  long fps_num = 0, fps_den = 1;
  long frames = 0;

  double fps() const { return static_cast<double>(fps_num) / static_cast<double>(fps_den); }
  double duration() const { return static_cast<double>(frames) / fps(); }
};

/// Reads frames from a decoder subprocess (popen). Sequential access only.
class FrameReader {
 public:
  /// `command` is the full shell command whose stdout follows the FRAMEPIPE contract.
  /// Throws IoError if the process cannot start or the header is malformed.
  explicit FrameReader(const std::string& command);
  ~FrameReader();
  FrameReader(const FrameReader&) = delete;
  FrameReader& operator=(const FrameReader&) = delete;

  const VideoHeader& header() const { return header_; }

  /// Next frame, or false at end of stream. Throws IoError on a short read.
  bool next_frame(Image& out);

 private:
  FILE* pipe_ = nullptr;
  VideoHeader header_;
  long read_ = 0;
};

/// Shell-quote a path for use in a decoder command line.
std::string shell_quote(const std::string& s);

/// Sampling times 0, interval, 2*interval, ...: exactly floor(duration/interval) records.
/// Throws ConfigError if interval <= 0.
std::vector<double> sample_timestamps(const VideoHeader& h, double interval_s);

/// Frame index shown at time t (floor(t * fps), clamped to the last frame).
long frame_index_at(const VideoHeader& h, double t);

/// Write an .rvid file (the FRAMEPIPE byte stream on disk).
void write_rvid(const std::string& path, const std::vector<Image>& frames, long fps_num,
                long fps_den);

/// Parse an .rvid stream header from an open stream; shared by FrameReader and the
/// mtv-framepipe tool. Throws IoError on malformed input.
VideoHeader parse_header_line(const std::string& line);

}  // namespace mtv::video
