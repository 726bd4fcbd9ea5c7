// Reference FRAMEPIPE decoder: validates an .rvid file and streams its bytes
// (header line + raw RGB24 frames) to stdout unchanged.
#include <cstdio>
#include <string>

#include <mtvision/errors.hpp>
#include <mtvision/video.hpp>

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: mtv-framepipe <file.rvid>\n");
    return 2;
  }

  FILE* f = std::fopen(argv[1], "rb");
  if (!f) {
    std::fprintf(stderr, "mtv-framepipe: cannot open %s\n", argv[1]);
    return 3;
  }

  std::string line;
  for (;;) {
    int ch = std::fgetc(f);
    if (ch == EOF || ch == '\n') break;
    line.push_back(static_cast<char>(ch));
    if (line.size() > 256) break;
  }

  mtv::video::VideoHeader hdr;
  try {
    hdr = mtv::video::parse_header_line(line);
  } catch (const mtv::Error& e) {
    std::fprintf(stderr, "mtv-framepipe: %s\n", e.what());
    std::fclose(f);
    return 3;
  }

  // refuse to stream a container whose payload is shorter than promised
  long header_bytes = std::ftell(f);
  std::fseek(f, 0, SEEK_END);
  long total = std::ftell(f);
  long need = hdr.frames * 3L * hdr.w * hdr.h;
  if (total - header_bytes < need) {
    std::fprintf(stderr, "mtv-framepipe: truncated payload in %s\n", argv[1]);
    std::fclose(f);
    return 3;
  }
  std::fseek(f, 0, SEEK_SET);

  char buf[1 << 16];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) {
    if (std::fwrite(buf, 1, n, stdout) != n) {
      std::fclose(f);
      return 3;
    }
  }
  std::fclose(f);
  std::fflush(stdout);
  return 0;
}
