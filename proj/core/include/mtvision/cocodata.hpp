#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "mtvision/types.hpp"

namespace mtv::coco {

struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  std::vector<std::string> id_to_token;  // index == id; [0,4) reserved
  std::unordered_map<std::string, int> token_to_id;

  int size() const { return static_cast<int>(id_to_token.size()); }
  int id_of(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnk : it->second;
  }
};

// Source category ids -> merged [0,172) space.  Instances land in [0,80),
// stuff in [80,171), 171 is unlabeled.
struct CategoryMap {
  std::map<int, int> instances;
  std::map<int, int> stuff;
};

struct DatasetIndex {
  std::vector<Sample> samples;  // sorted by image id
  std::vector<std::string> file_names;
  CategoryMap category_map;
  std::vector<std::string> instance_category_names;  // by merged id
  std::vector<std::string> stuff_category_names;     // by merged id - 80

  std::unordered_map<std::int64_t, std::size_t> by_image_id;

  const Sample* find(std::int64_t image_id) const {
    auto it = by_image_id.find(image_id);
    return it == by_image_id.end() ? nullptr : &samples[it->second];
  }
};

DatasetIndex load_instances(const std::string& annotation_file);
DatasetIndex load_stuff_merged(const std::string& stuff_file, DatasetIndex index);
DatasetIndex load_captions(const std::string& captions_file, DatasetIndex index);

Vocabulary build_vocab(const DatasetIndex& index, int min_freq = 5);

std::vector<int> encode_caption(const std::string& text, const Vocabulary& vocab,
                                int max_len = 32);
std::string decode_caption(const std::vector<int>& ids, const Vocabulary& vocab);

// lowercase, punctuation removed, whitespace squeezed
std::string normalize_caption(const std::string& text);

// Fills Sample.image for every sample from <image_root>/<file_name>.
void load_image_pixels(DatasetIndex& index, const std::string& image_root);

// Keeps the first max_images samples (samples are ordered by image id).
void limit_images(DatasetIndex& index, int max_images);

// Deterministic binary cache: same index -> byte-identical file.
void save_index_cache(const DatasetIndex& index, const std::string& path);
DatasetIndex load_index_cache(const std::string& path);

// Pixel-center even-odd scanline fill.  polygons: flat x,y pairs, one vector
// per ring; rings are OR-ed together.
Mask rasterize_polygons(const std::vector<std::vector<double>>& polygons, int h, int w);

// COCO column-major RLE, uncompressed counts.
Mask decode_rle_counts(const std::vector<long>& counts, int h, int w);
// COCO compressed RLE string form.
Mask decode_rle_string(const std::string& counts, int h, int w);
std::string encode_rle_string(const Mask& mask);

}  // namespace mtv::coco
