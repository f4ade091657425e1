#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "grdd/errors.hpp"
#include "grdd/rng.hpp"
#include "grdd/tensor.hpp"

namespace grdd {

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "' (expected train, val or test)");
}

struct InputShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;

  std::size_t pixels() const { return height * width * channels; }
  friend bool operator==(const InputShape&, const InputShape&) = default;
};

inline std::string to_string(const InputShape& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
}

// Images with integer category labels and a category -> split assignment.
// Immutable apart from the split assignment; safe to share between readers.
class Dataset {
 public:
  Dataset() = default;

  // `images` is [count, H, W, channels] with values in [0, 1]. Category ids
  // are indices into `category_names`; every category must own at least
  // `min_per_category` images. All categories start in the train split.
  Dataset(Tensor images, std::vector<int> labels, std::vector<std::string> category_names,
          std::size_t min_per_category = 1)
      : images_(std::move(images)), labels_(std::move(labels)), names_(std::move(category_names)) {
    if (images_.rank() != 4) throw DataError("images must be a [count, H, W, channels] array");
    if (labels_.size() != images_.dim(0)) {
      throw DataError("image count " + std::to_string(images_.dim(0)) + " does not match label count " +
                      std::to_string(labels_.size()));
    }
    for (double v : images_.values()) {
      if (!(v >= 0.0 && v <= 1.0)) throw DataError("pixel value outside [0, 1]: " + std::to_string(v));
    }
    by_category_.resize(names_.size());
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      const int y = labels_[i];
      if (y < 0 || static_cast<std::size_t>(y) >= names_.size()) {
        throw DataError("label " + std::to_string(y) + " of image " + std::to_string(i) +
                        " has no category");
      }
      by_category_[static_cast<std::size_t>(y)].push_back(i);
    }
    for (std::size_t c = 0; c < names_.size(); ++c) {
      if (by_category_[c].empty()) throw DataError("category '" + names_[c] + "' has zero images");
      if (by_category_[c].size() < min_per_category) {
        throw DataError("category '" + names_[c] + "' has " + std::to_string(by_category_[c].size()) +
                        " images, fewer than the required " + std::to_string(min_per_category));
      }
      split_[static_cast<int>(c)] = Split::train;
    }
  }

  std::size_t size() const { return labels_.size(); }
  std::size_t category_count() const { return names_.size(); }
  InputShape shape() const { return {images_.dim(1), images_.dim(2), images_.dim(3)}; }

  const Tensor& images() const { return images_; }
  std::span<const double> image(std::size_t i) const { return images_.row(i); }
  const std::vector<int>& labels() const { return labels_; }
  const std::vector<std::string>& category_names() const { return names_; }
  const std::map<int, Split>& split_assignment() const { return split_; }
  const std::vector<std::size_t>& indices_of(int category) const {
    return by_category_.at(static_cast<std::size_t>(category));
  }

  // Category ids assigned to `split`, ascending.
  std::vector<int> categories_in(Split split) const {
    std::vector<int> out;
    for (const auto& [c, s] : split_) {
      if (s == split) out.push_back(c);
    }
    return out;
  }

  // Instance indices whose category belongs to `split`, ascending.
  std::vector<std::size_t> indices_in(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      if (split_.at(labels_[i]) == split) out.push_back(i);
    }
    return out;
  }

  // [indices.size(), H, W, C] batch in the given order.
  Tensor gather(std::span<const std::size_t> indices) const {
    const InputShape s = shape();
    Tensor batch({indices.size(), s.height, s.width, s.channels});
    const std::size_t stride = s.pixels();
    for (std::size_t r = 0; r < indices.size(); ++r) {
      std::copy_n(images_.data() + indices[r] * stride, stride, batch.data() + r * stride);
    }
    return batch;
  }

  void assign_splits(std::map<int, Split> assignment) {
    if (assignment.size() != names_.size()) {
      throw DataError("split assignment covers " + std::to_string(assignment.size()) + " of " +
                      std::to_string(names_.size()) + " categories");
    }
    for (std::size_t c = 0; c < names_.size(); ++c) {
      if (!assignment.contains(static_cast<int>(c))) {
        throw DataError("category '" + names_[c] + "' missing from split assignment");
      }
    }
    split_ = std::move(assignment);
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.images_ == b.images_ && a.labels_ == b.labels_ && a.names_ == b.names_ && a.split_ == b.split_;
  }

 private:
  Tensor images_;
  std::vector<int> labels_;
  std::vector<std::string> names_;
  std::map<int, Split> split_;
  std::vector<std::vector<std::size_t>> by_category_;
};

// ---------------------------------------------------------------------------
// Packed-binary I/O: little-endian u32 count, H, W, channels; then
// count*H*W*channels float32 values; then count int32 labels.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("truncated " + what);
  return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
         (std::uint32_t{b[3]} << 24);
}

}  // namespace detail

struct PackedArrays {
  std::uint32_t count = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  std::vector<float> values;
  std::vector<std::int32_t> labels;

  friend bool operator==(const PackedArrays&, const PackedArrays&) = default;
};

inline void write_packed(const std::filesystem::path& path, const PackedArrays& arrays) {
  const std::size_t expected = std::size_t{arrays.count} * arrays.height * arrays.width * arrays.channels;
  if (arrays.values.size() != expected || arrays.labels.size() != arrays.count) {
    throw DataError("packed arrays are inconsistent with their header");
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  detail::put_u32(os, arrays.count);
  detail::put_u32(os, arrays.height);
  detail::put_u32(os, arrays.width);
  detail::put_u32(os, arrays.channels);
  for (float v : arrays.values) detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
  for (std::int32_t y : arrays.labels) detail::put_u32(os, static_cast<std::uint32_t>(y));
  if (!os) throw DataError("write to '" + path.string() + "' failed");
}

inline PackedArrays read_packed(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path.string() + "'");
  const std::string what = "packed file '" + path.string() + "'";
  PackedArrays a;
  a.count = detail::get_u32(is, what);
  a.height = detail::get_u32(is, what);
  a.width = detail::get_u32(is, what);
  a.channels = detail::get_u32(is, what);
  const std::uintmax_t n = std::uintmax_t{a.count} * a.height * a.width * a.channels;
  const std::uintmax_t expected_bytes = 16 + 4 * (n + a.count);
  if (std::filesystem::file_size(path) != expected_bytes) {
    throw DataError(what + " has " + std::to_string(std::filesystem::file_size(path)) +
                    " bytes, header implies " + std::to_string(expected_bytes));
  }
  a.values.resize(static_cast<std::size_t>(n));
  for (float& v : a.values) v = std::bit_cast<float>(detail::get_u32(is, what));
  a.labels.resize(a.count);
  for (std::int32_t& y : a.labels) y = static_cast<std::int32_t>(detail::get_u32(is, what));
  return a;
}

inline void write_packed_dataset(const std::filesystem::path& path, const Dataset& ds) {
  const InputShape s = ds.shape();
  PackedArrays a;
  a.count = static_cast<std::uint32_t>(ds.size());
  a.height = static_cast<std::uint32_t>(s.height);
  a.width = static_cast<std::uint32_t>(s.width);
  a.channels = static_cast<std::uint32_t>(s.channels);
  a.values.assign(ds.images().values().begin(), ds.images().values().end());
  a.labels.assign(ds.labels().begin(), ds.labels().end());
  write_packed(path, a);
}

// ---------------------------------------------------------------------------
// Netpbm (P2/P3/P5/P6) reader used by the class-folder layout.

namespace detail {

inline std::string next_pnm_token(std::istream& is) {
  std::string tok;
  char c;
  while (is.get(c)) {
    if (c == '#') {
      std::string ignored;
      std::getline(is, ignored);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

struct Image {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<double> pixels;
};

inline Image read_netpbm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  const std::string where = "unreadable image '" + path.string() + "'";
  if (!is) throw DataError(where + ": cannot open");
  const std::string magic = next_pnm_token(is);
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6") {
    throw DataError(where + ": not a netpbm P2/P3/P5/P6 file");
  }
  Image img;
  try {
    img.width = std::stoul(next_pnm_token(is));
    img.height = std::stoul(next_pnm_token(is));
  } catch (const std::exception&) {
    throw DataError(where + ": malformed header");
  }
  unsigned long maxval = 0;
  try {
    maxval = std::stoul(next_pnm_token(is));
  } catch (const std::exception&) {
    throw DataError(where + ": malformed maxval");
  }
  if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 65535) {
    throw DataError(where + ": invalid dimensions or maxval");
  }
  img.channels = (magic == "P3" || magic == "P6") ? 3 : 1;
  const std::size_t n = img.width * img.height * img.channels;
  img.pixels.resize(n);
  const double scale = 1.0 / static_cast<double>(maxval);
  if (magic == "P2" || magic == "P3") {
    for (std::size_t i = 0; i < n; ++i) {
      const std::string tok = next_pnm_token(is);
      if (tok.empty()) throw DataError(where + ": truncated pixel data");
      const unsigned long v = std::stoul(tok);
      if (v > maxval) throw DataError(where + ": pixel exceeds maxval");
      img.pixels[i] = static_cast<double>(v) * scale;
    }
  } else {
    const bool wide = maxval > 255;
    for (std::size_t i = 0; i < n; ++i) {
      unsigned char b[2];
      if (!is.read(reinterpret_cast<char*>(b), wide ? 2 : 1)) throw DataError(where + ": truncated pixel data");
      const unsigned v = wide ? (unsigned{b[0]} << 8) | b[1] : b[0];
      if (v > maxval) throw DataError(where + ": pixel exceeds maxval");
      img.pixels[i] = static_cast<double>(v) * scale;
    }
  }
  return img;
}

}  // namespace detail

// Writes an 8-bit binary PGM (single channel) or PPM (three channels).
inline void write_netpbm(const std::filesystem::path& path, std::span<const double> pixels, std::size_t height,
                         std::size_t width, std::size_t channels) {
  if (channels != 1 && channels != 3) throw DataError("netpbm supports 1 or 3 channels");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  os << (channels == 1 ? "P5" : "P6") << '\n' << width << ' ' << height << "\n255\n";
  for (double v : pixels) {
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
}

enum class DatasetFormat { class_folders, packed_binary };

inline DatasetFormat parse_dataset_format(const std::string& s) {
  if (s == "class_folders") return DatasetFormat::class_folders;
  if (s == "packed_binary") return DatasetFormat::packed_binary;
  throw ConfigError("unknown dataset format '" + s + "' (expected class_folders or packed_binary)");
}

struct LoadOptions {
  // Minimum images per category; enforced here so sampling never fails late.
  std::size_t min_per_category = 1;
};

// class_folders: `root/<class_name>/<image files>`, classes ordered
// lexicographically, files likewise. packed_binary: `root` is the file.
inline Dataset load_dataset(const std::filesystem::path& root, DatasetFormat format, LoadOptions options = {}) {
  namespace fs = std::filesystem;
  if (!fs::exists(root)) throw DataError("dataset path does not exist: '" + root.string() + "'");

  if (format == DatasetFormat::packed_binary) {
    if (!fs::is_regular_file(root)) throw DataError("packed dataset is not a file: '" + root.string() + "'");
    const PackedArrays a = read_packed(root);
    if (a.count == 0) throw DataError("packed dataset '" + root.string() + "' holds no images");
    int max_label = -1;
    for (std::int32_t y : a.labels) {
      if (y < 0) throw DataError("negative label " + std::to_string(y) + " in '" + root.string() + "'");
      max_label = std::max(max_label, static_cast<int>(y));
    }
    std::vector<std::string> names;
    for (int c = 0; c <= max_label; ++c) names.push_back("class_" + std::to_string(c));
    Tensor images({a.count, a.height, a.width, a.channels},
                  std::vector<double>(a.values.begin(), a.values.end()));
    return Dataset(std::move(images), std::vector<int>(a.labels.begin(), a.labels.end()), std::move(names),
                   options.min_per_category);
  }

  if (!fs::is_directory(root)) throw DataError("class-folder root is not a directory: '" + root.string() + "'");
  std::vector<fs::path> classes;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && entry.path().filename().string().front() != '.') classes.push_back(entry.path());
  }
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw DataError("no class folders under '" + root.string() + "'");

  std::vector<std::string> names;
  std::vector<int> labels;
  std::vector<double> pixels;
  InputShape shape;
  bool have_shape = false;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    names.push_back(classes[c].filename().string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(classes[c])) {
      if (entry.is_regular_file() && entry.path().filename().string().front() != '.') files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("category '" + names.back() + "' has zero images");
    for (const auto& f : files) {
      detail::Image img = detail::read_netpbm(f);
      const InputShape s{img.height, img.width, img.channels};
      if (!have_shape) {
        shape = s;
        have_shape = true;
      } else if (!(s == shape)) {
        throw DataError("image '" + f.string() + "' has shape " + to_string(s) + ", expected " + to_string(shape));
      }
      pixels.insert(pixels.end(), img.pixels.begin(), img.pixels.end());
      labels.push_back(static_cast<int>(c));
    }
  }
  Tensor images({labels.size(), shape.height, shape.width, shape.channels}, std::move(pixels));
  return Dataset(std::move(images), std::move(labels), std::move(names), options.min_per_category);
}

// ---------------------------------------------------------------------------

// Desk-scale surrogate: each category is a fixed single-channel template
// (a seeded mixture of Gaussian blobs rescaled into [0.15, 0.85]); each image
// adds independent Gaussian pixel noise and clips to [0, 1]. Noise draws are
// taken in the same order for every sigma, so a fixed seed yields the same
// underlying perturbation at every noise level.
inline Dataset make_synthetic(int n_categories, int per_category, int image_size, double noise_sigma,
                              std::uint64_t seed) {
  if (n_categories < 2) throw DataError("synthetic dataset needs at least 2 categories");
  if (per_category < 2) throw DataError("synthetic dataset needs at least 2 images per category");
  if (image_size < 4) throw DataError("synthetic image size must be at least 4");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw DataError("noise sigma must be finite and >= 0");

  const auto size = static_cast<std::size_t>(image_size);
  const Rng templates(derive_seed(seed, "templates"));
  const Rng noise(derive_seed(seed, "noise"));
  constexpr int kBlobs = 5;

  const std::size_t count = static_cast<std::size_t>(n_categories) * static_cast<std::size_t>(per_category);
  Tensor images({count, size, size, 1});
  std::vector<int> labels;
  std::vector<std::string> names;
  std::vector<double> tmpl(size * size);

  for (int c = 0; c < n_categories; ++c) {
    Rng rng = templates.substream(static_cast<std::uint64_t>(c));
    std::fill(tmpl.begin(), tmpl.end(), 0.0);
    for (int b = 0; b < kBlobs; ++b) {
      const double cy = rng.uniform(0.0, static_cast<double>(size));
      const double cx = rng.uniform(0.0, static_cast<double>(size));
      const double width = rng.uniform(static_cast<double>(size) / 10.0, static_cast<double>(size) / 4.0);
      const double amp = rng.uniform(-1.0, 1.0);
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          const double dy = static_cast<double>(y) - cy;
          const double dx = static_cast<double>(x) - cx;
          tmpl[y * size + x] += amp * std::exp(-(dy * dy + dx * dx) / (2.0 * width * width));
        }
      }
    }
    const auto [lo, hi] = std::minmax_element(tmpl.begin(), tmpl.end());
    const double lo_v = *lo;
    const double range = std::max(*hi - lo_v, 1e-12);
    for (double& v : tmpl) v = 0.15 + 0.7 * (v - lo_v) / range;

    names.push_back("synthetic_" + std::to_string(c));
    for (int k = 0; k < per_category; ++k) {
      const std::size_t idx = static_cast<std::size_t>(c) * static_cast<std::size_t>(per_category) +
                              static_cast<std::size_t>(k);
      Rng pixel_noise = noise.substream(idx);
      std::span<double> img = images.row(idx);
      for (std::size_t p = 0; p < img.size(); ++p) {
        img[p] = std::clamp(tmpl[p] + noise_sigma * pixel_noise.normal(), 0.0, 1.0);
      }
      labels.push_back(c);
    }
  }
  return Dataset(std::move(images), std::move(labels), std::move(names));
}

// Seeded shuffle of the category ids, then contiguous train/val/test blocks.
inline Dataset split_categories(Dataset dataset, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                                std::uint64_t seed) {
  const std::size_t total = dataset.category_count();
  if (n_train + n_val + n_test != total) {
    throw DataError("split sizes " + std::to_string(n_train) + "+" + std::to_string(n_val) + "+" +
                    std::to_string(n_test) + " do not sum to the " + std::to_string(total) + " categories");
  }
  std::vector<int> ids(total);
  for (std::size_t i = 0; i < total; ++i) ids[i] = static_cast<int>(i);
  Rng rng(seed);
  rng.shuffle(ids);
  std::map<int, Split> assignment;
  for (std::size_t i = 0; i < total; ++i) {
    assignment[ids[i]] = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
  }
  dataset.assign_splits(std::move(assignment));
  return dataset;
}

// ---------------------------------------------------------------------------
// Rotation self-supervision.

// Rotates one square channels-last image 90 degrees counterclockwise:
// out(y, x) = in(x, W-1-y).
inline void rotate90_ccw(std::span<const double> in, std::span<double> out, std::size_t side, std::size_t channels) {
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double* src = in.data() + (x * side + (side - 1 - y)) * channels;
      double* dst = out.data() + (y * side + x) * channels;
      std::copy_n(src, channels, dst);
    }
  }
}

struct RotationBatch {
  Tensor images;                    // [4 * N_b, H, W, C]
  std::vector<int> category_labels;  // label of the source image
  std::vector<int> rotation_labels;  // k for a k * 90 degree rotation
};

// Output order is all 0-degree copies, then 90, 180 and 270.
inline RotationBatch augment_rotations(const Tensor& batch_images, std::span<const int> batch_labels) {
  if (batch_images.rank() != 4) throw ShapeError("rotation augmentation expects [N, H, W, C] images");
  const std::size_t n = batch_images.dim(0);
  const std::size_t h = batch_images.dim(1);
  const std::size_t w = batch_images.dim(2);
  const std::size_t ch = batch_images.dim(3);
  if (h != w) throw ShapeError("rotation augmentation needs square images, got " + std::to_string(h) + "x" +
                               std::to_string(w));
  if (batch_labels.size() != n) throw ShapeError("label count does not match batch size");

  RotationBatch out;
  out.images = Tensor({4 * n, h, w, ch});
  const std::size_t stride = h * w * ch;
  std::copy_n(batch_images.data(), n * stride, out.images.data());
  for (std::size_t k = 1; k < 4; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      rotate90_ccw(out.images.row((k - 1) * n + i), out.images.row(k * n + i), h, ch);
    }
  }
  for (int k = 0; k < 4; ++k) {
    out.category_labels.insert(out.category_labels.end(), batch_labels.begin(), batch_labels.end());
    out.rotation_labels.insert(out.rotation_labels.end(), n, k);
  }
  return out;
}

}  // namespace grdd
