#include "mtvision/cocodata.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mtvision/errors.hpp"
#include "mtvision/imageio.hpp"

namespace mtv::coco {

namespace {

using nlohmann::json;

json parse_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

// ---- binary cache plumbing ----

constexpr char kCacheMagic[8] = {'M', 'T', 'V', 'I', 'D', 'X', '0', '1'};

struct Writer {
  std::string buf;
  template <class T>
  void raw(T v) {
    char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    buf.append(tmp, sizeof(T));
  }
  void u8(std::uint8_t v) { raw(v); }
  void u32(std::uint32_t v) { raw(v); }
  void i32(std::int32_t v) { raw(v); }
  void i64(std::int64_t v) { raw(v); }
  void f64(double v) { raw(v); }
  void bytes(const void* p, std::size_t n) { buf.append(static_cast<const char*>(p), n); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf.append(s);
  }
};

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  explicit Reader(const std::string& b) : buf(b) {}
  template <class T>
  T raw() {
    if (pos + sizeof(T) > buf.size()) throw ParseError("truncated index cache");
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::uint8_t u8() { return raw<std::uint8_t>(); }
  std::uint32_t u32() { return raw<std::uint32_t>(); }
  std::int32_t i32() { return raw<std::int32_t>(); }
  std::int64_t i64() { return raw<std::int64_t>(); }
  double f64() { return raw<double>(); }
  void bytes(void* p, std::size_t n) {
    if (pos + n > buf.size()) throw ParseError("truncated index cache");
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (pos + n > buf.size()) throw ParseError("truncated index cache");
    std::string s(buf.data() + pos, n);
    pos += n;
    return s;
  }
};

Box bbox_to_corner(const json& b) {
  if (!b.is_array() || b.size() != 4) throw ParseError("bbox must be [x,y,w,h]");
  const double x = b[0].get<double>(), y = b[1].get<double>();
  const double w = b[2].get<double>(), h = b[3].get<double>();
  return Box{x, y, x + w, y + h};
}

Mask rect_mask(const Box& b, int h, int w) {
  Mask m(h, w, 0);
  const int y0 = std::max(0, static_cast<int>(std::floor(b.y1)));
  const int y1 = std::min(h, static_cast<int>(std::ceil(b.y2)));
  const int x0 = std::max(0, static_cast<int>(std::floor(b.x1)));
  const int x1 = std::min(w, static_cast<int>(std::ceil(b.x2)));
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.at(y, x) = 1;
  return m;
}

Mask mask_from_segmentation(const json& seg, const Box& fallback_box, int h, int w,
                            const std::string& where) {
  if (seg.is_array()) {
    std::vector<std::vector<double>> polys;
    for (const auto& p : seg) {
      if (!p.is_array()) throw ParseError(where + ": polygon must be an array");
      std::vector<double> ring;
      ring.reserve(p.size());
      for (const auto& v : p) ring.push_back(v.get<double>());
      if (ring.size() < 6 || ring.size() % 2 != 0)
        throw ParseError(where + ": polygon needs >=3 x,y pairs");
      polys.push_back(std::move(ring));
    }
    return rasterize_polygons(polys, h, w);
  }
  if (seg.is_object() && seg.contains("counts") && seg.contains("size")) {
    const auto& size = seg["size"];
    const int rh = size.at(0).get<int>(), rw = size.at(1).get<int>();
    if (rh != h || rw != w)
      throw IntegrityError(where + ": RLE size " + std::to_string(rh) + "x" + std::to_string(rw) +
                           " does not match image " + std::to_string(h) + "x" + std::to_string(w));
    const auto& counts = seg["counts"];
    if (counts.is_string()) return decode_rle_string(counts.get<std::string>(), h, w);
    std::vector<long> c;
    for (const auto& v : counts) c.push_back(v.get<long>());
    return decode_rle_counts(c, h, w);
  }
  if (seg.is_null()) return rect_mask(fallback_box, h, w);
  throw ParseError(where + ": unsupported segmentation encoding");
}

// sorted source ids -> contiguous merged ids starting at `base`
void build_category_map(const json& cats, int base, int capacity, std::map<int, int>& out,
                        std::vector<std::string>& names, const std::string& what) {
  std::map<int, std::string> by_id;
  for (const auto& c : cats) {
    const int id = c.at("id").get<int>();
    if (!by_id.emplace(id, c.value("name", std::string())).second)
      throw IntegrityError("duplicate " + what + " category id " + std::to_string(id));
  }
  if (static_cast<int>(by_id.size()) > capacity)
    throw IntegrityError(what + " categories exceed " + std::to_string(capacity));
  int next = base;
  names.clear();
  for (const auto& [id, name] : by_id) {
    out[id] = next++;
    names.push_back(name);
  }
}

}  // namespace

// ---- rasterization ----

Mask rasterize_polygons(const std::vector<std::vector<double>>& polygons, int h, int w) {
  Mask m(h, w, 0);
  std::vector<double> xs;
  for (const auto& ring : polygons) {
    const std::size_t n = ring.size() / 2;
    for (int y = 0; y < h; ++y) {
      const double cy = y + 0.5;
      xs.clear();
      for (std::size_t i = 0; i < n; ++i) {
        const double x1 = ring[2 * i], y1 = ring[2 * i + 1];
        const double x2 = ring[2 * ((i + 1) % n)], y2 = ring[2 * ((i + 1) % n) + 1];
        if ((y1 <= cy && cy < y2) || (y2 <= cy && cy < y1))
          xs.push_back(x1 + (cy - y1) * (x2 - x1) / (y2 - y1));
      }
      std::sort(xs.begin(), xs.end());
      for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
        const double xa = xs[k], xb = xs[k + 1];
        const int x0 = std::max(0, static_cast<int>(std::floor(xa - 0.5)));
        const int x1 = std::min(w - 1, static_cast<int>(std::ceil(xb)));
        for (int x = x0; x <= x1; ++x) {
          const double cx = x + 0.5;
          if (xa <= cx && cx < xb) m.at(y, x) = 1;
        }
      }
    }
  }
  return m;
}

Mask decode_rle_counts(const std::vector<long>& counts, int h, int w) {
  Mask m(h, w, 0);
  long j = 0;
  std::uint8_t val = 0;
  const long total = static_cast<long>(h) * w;
  for (long c : counts) {
    if (c < 0 || j + c > total) throw ParseError("RLE counts overflow mask size");
    for (long k = 0; k < c; ++k, ++j) {
      if (val) m.px[static_cast<size_t>((j % h) * w + j / h)] = 1;  // column-major order
    }
    val = 1 - val;
  }
  if (j != total) throw ParseError("RLE counts do not cover mask");
  return m;
}

Mask decode_rle_string(const std::string& s, int h, int w) {
  std::vector<long> cnts;
  std::size_t p = 0;
  while (p < s.size()) {
    long x = 0;
    int k = 0;
    bool more = true;
    while (more) {
      if (p >= s.size()) throw ParseError("truncated RLE string");
      const long c = static_cast<long>(s[p]) - 48;
      if (c < 0 || c > 63) throw ParseError("bad RLE character");
      x |= (c & 0x1f) << (5 * k);
      more = (c & 0x20) != 0;
      ++p;
      ++k;
      if (!more && (c & 0x10)) x |= -1L << (5 * k);
    }
    if (cnts.size() > 2) x += cnts[cnts.size() - 2];
    cnts.push_back(x);
  }
  return decode_rle_counts(cnts, h, w);
}

std::string encode_rle_string(const Mask& mask) {
  // column-major run lengths, first run counts zeros
  std::vector<long> cnts;
  const long total = static_cast<long>(mask.h) * mask.w;
  std::uint8_t prev = 0;
  long run = 0;
  for (long j = 0; j < total; ++j) {
    const std::uint8_t v = mask.px[static_cast<size_t>((j % mask.h) * mask.w + j / mask.h)] ? 1 : 0;
    if (v == prev) {
      ++run;
    } else {
      cnts.push_back(run);
      prev = v;
      run = 1;
    }
  }
  cnts.push_back(run);

  std::string s;
  for (std::size_t i = 0; i < cnts.size(); ++i) {
    long x = cnts[i];
    if (i > 2) x -= cnts[i - 2];
    bool more = true;
    while (more) {
      long c = x & 0x1f;
      x >>= 5;
      more = (c & 0x10) ? (x != -1) : (x != 0);
      if (more) c |= 0x20;
      s.push_back(static_cast<char>(c + 48));
    }
  }
  return s;
}

// ---- loading ----

DatasetIndex load_instances(const std::string& annotation_file) {
  const json root = parse_json_file(annotation_file);
  if (!root.contains("images") || !root.contains("annotations") || !root.contains("categories"))
    throw ParseError(annotation_file + ": missing images/annotations/categories");

  DatasetIndex index;
  build_category_map(root["categories"], 0, kInstanceCategories, index.category_map.instances,
                     index.instance_category_names, "instance");

  struct Meta {
    std::int64_t id;
    int h, w;
    std::string file_name;
  };
  std::vector<Meta> metas;
  for (const auto& im : root["images"]) {
    metas.push_back({im.at("id").get<std::int64_t>(), im.at("height").get<int>(),
                     im.at("width").get<int>(), im.value("file_name", std::string())});
  }
  std::sort(metas.begin(), metas.end(), [](const Meta& a, const Meta& b) { return a.id < b.id; });
  for (std::size_t i = 0; i + 1 < metas.size(); ++i)
    if (metas[i].id == metas[i + 1].id)
      throw IntegrityError("duplicate image id " + std::to_string(metas[i].id));

  index.samples.reserve(metas.size());
  for (const auto& m : metas) {
    Sample s;
    s.id = m.id;
    s.image.h = m.h;  // dimensions known now, pixels attached later
    s.image.w = m.w;
    index.by_image_id[m.id] = index.samples.size();
    index.samples.push_back(std::move(s));
    index.file_names.push_back(m.file_name);
  }

  for (const auto& ann : root["annotations"]) {
    const std::int64_t image_id = ann.at("image_id").get<std::int64_t>();
    auto it = index.by_image_id.find(image_id);
    if (it == index.by_image_id.end())
      throw IntegrityError("annotation references unknown image id " + std::to_string(image_id));
    Sample& s = index.samples[it->second];

    const int src_cat = ann.at("category_id").get<int>();
    auto cit = index.category_map.instances.find(src_cat);
    if (cit == index.category_map.instances.end())
      throw IntegrityError("annotation references unknown category id " + std::to_string(src_cat));

    InstanceAnnotation inst;
    inst.labeled_box.box = bbox_to_corner(ann.at("bbox"));
    inst.labeled_box.category = cit->second;
    const json seg = ann.contains("segmentation") ? ann["segmentation"] : json(nullptr);
    inst.mask = mask_from_segmentation(seg, inst.labeled_box.box, s.image.h, s.image.w,
                                       "image " + std::to_string(image_id));
    s.instances.push_back(std::move(inst));
  }
  return index;
}

DatasetIndex load_stuff_merged(const std::string& stuff_file, DatasetIndex index) {
  const json root = parse_json_file(stuff_file);
  if (!root.contains("annotations") || !root.contains("categories"))
    throw ParseError(stuff_file + ": missing annotations/categories");

  build_category_map(root["categories"], kInstanceCategories, kStuffCategories,
                     index.category_map.stuff, index.stuff_category_names, "stuff");

  // all-unlabeled base layer for every image
  for (auto& s : index.samples) s.semantic = SemanticMask(s.image.h, s.image.w, kUnlabeledId);

  for (const auto& ann : root["annotations"]) {
    const std::int64_t image_id = ann.at("image_id").get<std::int64_t>();
    auto it = index.by_image_id.find(image_id);
    if (it == index.by_image_id.end())
      throw IntegrityError("stuff annotation references unknown image id " +
                           std::to_string(image_id));
    Sample& s = index.samples[it->second];

    const int src_cat = ann.at("category_id").get<int>();
    auto cit = index.category_map.stuff.find(src_cat);
    if (cit == index.category_map.stuff.end())
      throw IntegrityError("stuff annotation references unknown category id " +
                           std::to_string(src_cat));
    const std::uint8_t merged = static_cast<std::uint8_t>(cit->second);

    const Box fallback = ann.contains("bbox") ? bbox_to_corner(ann["bbox"])
                                              : Box{0, 0, double(s.image.w), double(s.image.h)};
    const json seg = ann.contains("segmentation") ? ann["segmentation"] : json(nullptr);
    const Mask m = mask_from_segmentation(seg, fallback, s.image.h, s.image.w,
                                          "stuff for image " + std::to_string(image_id));
    for (std::size_t i = 0; i < m.px.size(); ++i)
      if (m.px[i]) s.semantic.px[i] = merged;
  }

  // instances take precedence over stuff
  for (auto& s : index.samples) {
    if (s.semantic.empty()) s.semantic = SemanticMask(s.image.h, s.image.w, kUnlabeledId);
    for (const auto& inst : s.instances) {
      const std::uint8_t id = static_cast<std::uint8_t>(inst.labeled_box.category);
      for (std::size_t i = 0; i < inst.mask.px.size(); ++i)
        if (inst.mask.px[i]) s.semantic.px[i] = id;
    }
  }
  return index;
}

DatasetIndex load_captions(const std::string& captions_file, DatasetIndex index) {
  const json root = parse_json_file(captions_file);
  if (!root.contains("annotations")) throw ParseError(captions_file + ": missing annotations");

  for (const auto& ann : root["annotations"]) {
    const std::int64_t image_id = ann.at("image_id").get<std::int64_t>();
    auto it = index.by_image_id.find(image_id);
    if (it == index.by_image_id.end())
      throw IntegrityError("caption references unknown image id " + std::to_string(image_id));
    const std::string raw = ann.at("caption").get<std::string>();
    const std::string norm = normalize_caption(raw);
    if (norm.empty())
      std::fprintf(stderr, "warning: caption for image %lld is empty after normalization\n",
                   static_cast<long long>(image_id));
    index.samples[it->second].captions.push_back(norm);
  }
  for (const auto& s : index.samples)
    if (s.captions.empty())
      std::fprintf(stderr, "warning: image %lld has no captions; kept for vision tasks only\n",
                   static_cast<long long>(s.id));
  return index;
}

std::string normalize_caption(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      if (pending_space && !out.empty()) out.push_back(' ');
      pending_space = false;
      out.push_back(static_cast<char>(std::tolower(c)));
    } else if (std::isspace(c)) {
      pending_space = true;
    }
    // punctuation and other bytes are dropped
  }
  return out;
}

Vocabulary build_vocab(const DatasetIndex& index, int min_freq) {
  if (min_freq < 1) throw ConfigError("min_freq must be >= 1");
  std::map<std::string, long> freq;
  long total = 0;
  for (const auto& s : index.samples) {
    for (const auto& cap : s.captions) {
      std::istringstream ss(cap);
      std::string tok;
      while (ss >> tok) {
        ++freq[tok];
        ++total;
      }
    }
  }
  if (total == 0) throw EmptyCorpusError("no caption tokens in dataset");

  std::vector<std::pair<std::string, long>> items(freq.begin(), freq.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  v.id_to_token = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (const auto& [tok, f] : items)
    if (f >= min_freq) v.id_to_token.push_back(tok);
  for (std::size_t i = 0; i < v.id_to_token.size(); ++i)
    v.token_to_id[v.id_to_token[i]] = static_cast<int>(i);
  return v;
}

std::vector<int> encode_caption(const std::string& text, const Vocabulary& vocab, int max_len) {
  if (max_len < 2) throw ConfigError("max_len must be >= 2");
  std::vector<int> ids{Vocabulary::kBos};
  std::istringstream ss(normalize_caption(text));
  std::string tok;
  while (ss >> tok && static_cast<int>(ids.size()) < max_len - 1)
    ids.push_back(vocab.id_of(tok));
  ids.push_back(Vocabulary::kEos);
  ids.resize(static_cast<std::size_t>(max_len), Vocabulary::kPad);
  return ids;
}

std::string decode_caption(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == Vocabulary::kEos) break;
    if (id == Vocabulary::kBos || id == Vocabulary::kPad) continue;
    if (!out.empty()) out.push_back(' ');
    if (id >= 0 && id < vocab.size())
      out += vocab.id_to_token[static_cast<std::size_t>(id)];
    else
      out += "<unk>";
  }
  return out;
}

void load_image_pixels(DatasetIndex& index, const std::string& image_root) {
  for (std::size_t i = 0; i < index.samples.size(); ++i) {
    Sample& s = index.samples[i];
    if (!s.image.empty()) continue;
    const std::string path = image_root + "/" + index.file_names[i];
    Image img = read_image(path);
    if (img.h != s.image.h || img.w != s.image.w)
      throw IntegrityError(path + ": image is " + std::to_string(img.h) + "x" +
                           std::to_string(img.w) + ", annotations say " +
                           std::to_string(s.image.h) + "x" + std::to_string(s.image.w));
    s.image = std::move(img);
  }
}

void limit_images(DatasetIndex& index, int max_images) {
  if (max_images < 0) throw ConfigError("max_images must be >= 0");
  if (static_cast<std::size_t>(max_images) >= index.samples.size()) return;
  index.samples.resize(static_cast<std::size_t>(max_images));
  index.file_names.resize(static_cast<std::size_t>(max_images));
  index.by_image_id.clear();
  for (std::size_t i = 0; i < index.samples.size(); ++i)
    index.by_image_id[index.samples[i].id] = i;
}

// ---- cache ----

void save_index_cache(const DatasetIndex& index, const std::string& path) {
  Writer w;
  w.bytes(kCacheMagic, sizeof(kCacheMagic));

  auto write_cat = [&w](const std::map<int, int>& m, const std::vector<std::string>& names) {
    w.u32(static_cast<std::uint32_t>(m.size()));
    std::size_t i = 0;
    for (const auto& [src, merged] : m) {
      w.i32(src);
      w.i32(merged);
      w.str(i < names.size() ? names[i] : std::string());
      ++i;
    }
  };
  write_cat(index.category_map.instances, index.instance_category_names);
  write_cat(index.category_map.stuff, index.stuff_category_names);

  w.u32(static_cast<std::uint32_t>(index.samples.size()));
  for (std::size_t i = 0; i < index.samples.size(); ++i) {
    const Sample& s = index.samples[i];
    w.i64(s.id);
    w.str(index.file_names[i]);
    w.i32(s.image.h);
    w.i32(s.image.w);
    w.u8(s.image.empty() ? 0 : 1);
    if (!s.image.empty()) w.bytes(s.image.px.data(), s.image.px.size());
    w.u32(static_cast<std::uint32_t>(s.instances.size()));
    for (const auto& inst : s.instances) {
      w.f64(inst.labeled_box.box.x1);
      w.f64(inst.labeled_box.box.y1);
      w.f64(inst.labeled_box.box.x2);
      w.f64(inst.labeled_box.box.y2);
      w.i32(inst.labeled_box.category);
      w.str(encode_rle_string(inst.mask));
    }
    w.u8(s.semantic.empty() ? 0 : 1);
    if (!s.semantic.empty()) w.bytes(s.semantic.px.data(), s.semantic.px.size());
    w.u32(static_cast<std::uint32_t>(s.captions.size()));
    for (const auto& c : s.captions) w.str(c);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
  if (!out) throw IoError("short write: " + path);
}

DatasetIndex load_index_cache(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();

  if (buf.size() < sizeof(kCacheMagic) || std::memcmp(buf.data(), "MTVIDX", 6) != 0)
    throw ParseError(path + ": not an index cache");
  if (std::memcmp(buf.data(), kCacheMagic, sizeof(kCacheMagic)) != 0)
    throw VersionError(path + ": unsupported index cache version");

  Reader r(buf);
  r.pos = sizeof(kCacheMagic);
  DatasetIndex index;

  auto read_cat = [&r](std::map<int, int>& m, std::vector<std::string>& names) {
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      const int src = r.i32();
      const int merged = r.i32();
      m[src] = merged;
      names.push_back(r.str());
    }
  };
  read_cat(index.category_map.instances, index.instance_category_names);
  read_cat(index.category_map.stuff, index.stuff_category_names);

  const std::uint32_t n_samples = r.u32();
  for (std::uint32_t i = 0; i < n_samples; ++i) {
    Sample s;
    s.id = r.i64();
    index.file_names.push_back(r.str());
    const int h = r.i32();
    const int w = r.i32();
    s.image.h = h;
    s.image.w = w;
    if (r.u8()) {
      s.image.px.resize(static_cast<std::size_t>(h) * w * 3);
      r.bytes(s.image.px.data(), s.image.px.size());
    }
    const std::uint32_t n_inst = r.u32();
    for (std::uint32_t k = 0; k < n_inst; ++k) {
      InstanceAnnotation inst;
      inst.labeled_box.box.x1 = r.f64();
      inst.labeled_box.box.y1 = r.f64();
      inst.labeled_box.box.x2 = r.f64();
      inst.labeled_box.box.y2 = r.f64();
      inst.labeled_box.category = r.i32();
      inst.mask = decode_rle_string(r.str(), h, w);
      s.instances.push_back(std::move(inst));
    }
    if (r.u8()) {
      s.semantic = SemanticMask(h, w);
      r.bytes(s.semantic.px.data(), s.semantic.px.size());
    }
    const std::uint32_t n_cap = r.u32();
    for (std::uint32_t k = 0; k < n_cap; ++k) s.captions.push_back(r.str());
    index.by_image_id[s.id] = index.samples.size();
    index.samples.push_back(std::move(s));
  }
  return index;
}

}  // namespace mtv::coco
