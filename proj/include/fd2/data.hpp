#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "fd2/core.hpp"

namespace fd2::data {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Image I/O. Images are [3,H,W] float tensors in [0,1], RGB.
// ---------------------------------------------------------------------------

inline Tensor<float> decode_image(const std::string& path, int target_size) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot decode image file: " + path);
  if (bgr.rows != target_size || bgr.cols != target_size) {
    cv::Mat resized;
    const int interp =
        (bgr.rows > target_size) ? cv::INTER_AREA : cv::INTER_LINEAR;
    cv::resize(bgr, resized, cv::Size(target_size, target_size), 0, 0, interp);
    bgr = resized;
  }
  Tensor<float> img({3, target_size, target_size});
  for (int h = 0; h < target_size; ++h) {
    const cv::Vec3b* row = bgr.ptr<cv::Vec3b>(h);
    for (int w = 0; w < target_size; ++w) {
      img.at3(0, h, w) = row[w][2] / 255.0f;
      img.at3(1, h, w) = row[w][1] / 255.0f;
      img.at3(2, h, w) = row[w][0] / 255.0f;
    }
  }
  return img;
}

inline std::uint8_t quantize8(float v) {
  const float q = std::round(v * 255.0f);
  return static_cast<std::uint8_t>(std::clamp(q, 0.0f, 255.0f));
}

inline void encode_image_png(const std::string& path, const Tensor<float>& img) {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw DimError("encode_image_png expects [3,H,W], got " + shape_str(img));
  const int H = img.dim(1), W = img.dim(2);
  cv::Mat bgr(H, W, CV_8UC3);
  for (int h = 0; h < H; ++h) {
    cv::Vec3b* row = bgr.ptr<cv::Vec3b>(h);
    for (int w = 0; w < W; ++w) {
      row[w][2] = quantize8(img.at3(0, h, w));
      row[w][1] = quantize8(img.at3(1, h, w));
      row[w][0] = quantize8(img.at3(2, h, w));
    }
  }
  if (!cv::imwrite(path, bgr, {cv::IMWRITE_PNG_COMPRESSION, 6}))
    throw IoError("cannot write image file: " + path);
}

// Round-trips the float image through 8-bit quantization so in-memory data
// matches what a PNG write/read cycle would produce.
inline void quantize_inplace(Tensor<float>& img) {
  for (auto& v : img.v) v = quantize8(v) / 255.0f;
}

inline Tensor<float> resize_image(const Tensor<float>& img, int target_size) {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw DimError("resize_image expects [3,H,W]");
  const int H = img.dim(1), W = img.dim(2);
  if (H == target_size && W == target_size) return img;
  cv::Mat src(H, W, CV_32FC3);
  for (int h = 0; h < H; ++h) {
    cv::Vec3f* row = src.ptr<cv::Vec3f>(h);
    for (int w = 0; w < W; ++w)
      row[w] = {img.at3(0, h, w), img.at3(1, h, w), img.at3(2, h, w)};
  }
  cv::Mat dst;
  const int interp = (H > target_size) ? cv::INTER_AREA : cv::INTER_LINEAR;
  cv::resize(src, dst, cv::Size(target_size, target_size), 0, 0, interp);
  Tensor<float> out({3, target_size, target_size});
  for (int h = 0; h < target_size; ++h) {
    const cv::Vec3f* row = dst.ptr<cv::Vec3f>(h);
    for (int w = 0; w < target_size; ++w)
      for (int c = 0; c < 3; ++c)
        out.at3(c, h, w) = std::clamp(row[w][c], 0.0f, 1.0f);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset handle
// ---------------------------------------------------------------------------

struct Dataset {
  std::vector<Tensor<float>> images;  // each [3,S,S]
  std::vector<int> labels;
  std::vector<std::string> class_names;
  int image_size = 0;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::size_t size() const { return images.size(); }

  std::vector<std::size_t> indices_of_class(int k) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == k) out.push_back(i);
    return out;
  }
};

// Class indices follow sorted class-name order; files are read in sorted
// filename order within each class.
inline Dataset load_image_folder(const std::string& path, int image_size) {
  if (!fs::is_directory(path))
    throw IoError("dataset root is not a directory: " + path);
  std::vector<std::string> class_names;
  for (const auto& e : fs::directory_iterator(path))
    if (e.is_directory()) class_names.push_back(e.path().filename().string());
  std::sort(class_names.begin(), class_names.end());
  if (class_names.empty()) throw IoError("no class directories under " + path);

  Dataset ds;
  ds.class_names = class_names;
  ds.image_size = image_size;
  for (int k = 0; k < static_cast<int>(class_names.size()); ++k) {
    const fs::path cdir = fs::path(path) / class_names[k];
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(cdir)) {
      if (!e.is_regular_file()) continue;
      std::string ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
      if (ext == ".png" || ext == ".jpg" || ext == ".jpeg")
        files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
    if (files.empty())
      throw IoError("empty class directory: " + cdir.string());
    for (const auto& f : files) {
      ds.images.push_back(decode_image(f, image_size));
      ds.labels.push_back(k);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Procedural toy fine-grained dataset. The coarse structure (background) is
// drawn per sample index and shared across classes, so class identity lives
// only in a small per-class micro-mark: large intra-class variation, subtle
// inter-class differences.
// ---------------------------------------------------------------------------

struct ToySpec {
  int num_classes = 10;
  int train_per_class = 200;
  int val_per_class = 40;
  int test_per_class = 50;
  int image_size = 64;
  int base_patterns = 4;  // background family count, 1..4
  int mark_size = 7;
  int mark_jitter = 2;
  double noise_level = 0.05;
  bool marks_enabled = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) throw ConfigError("toy: need >= 2 classes");
    if (train_per_class < 1 || val_per_class < 1 || test_per_class < 1)
      throw ConfigError("toy: per-class sample counts must be >= 1");
    if (image_size < 16) throw ConfigError("toy: image size must be >= 16");
    if (base_patterns < 1 || base_patterns > 4)
      throw ConfigError("toy: base_patterns must lie in [1,4]");
    if (mark_size < 3) throw ConfigError("toy: mark size must be >= 3");
    if (mark_jitter < 0) throw ConfigError("toy: mark jitter must be >= 0");
    if (noise_level < 0) throw ConfigError("toy: noise level must be >= 0");
    // micro-marks must stay fine detail
    if (double(mark_size) * mark_size >= 0.1 * image_size * image_size)
      throw ConfigError("toy: mark would cover >= 10% of the image");
    const int margin = mark_size + mark_jitter + 2;
    if (2 * margin >= image_size)
      throw ConfigError("toy: image too small for the mark layout");
  }
};

namespace detail {

struct ToyMarks {
  std::vector<std::vector<char>> glyphs;       // mark_size^2 cells per class
  std::vector<std::pair<int, int>> anchors;    // top-left corner per class
  std::vector<std::array<float, 3>> colors;    // RGB per class
};

inline std::array<float, 3> hsv_to_rgb(float h, float s, float v) {
  const float c = v * s;
  const float hp = h * 6.0f;
  const float x = c * (1.0f - std::abs(std::fmod(hp, 2.0f) - 1.0f));
  float r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const float m = v - c;
  return {r + m, g + m, b + m};
}

// Per-class glyph bits, anchors and colors; pairwise distinct by
// construction (distinct anchors, resampled glyph collisions).
inline ToyMarks make_marks(const ToySpec& spec) {
  ToyMarks marks;
  Rng rng = Rng(spec.seed).fork(0x4d41524bull);  // mark stream
  const int K = spec.num_classes;
  const int cells = spec.mark_size * spec.mark_size;

  std::set<std::string> seen;
  for (int k = 0; k < K; ++k) {
    std::vector<char> glyph(cells);
    while (true) {
      int on = 0;
      for (auto& c : glyph) {
        c = rng.uniform() < 0.55 ? 1 : 0;
        on += c;
      }
      if (on < cells / 3) continue;
      std::string key(glyph.begin(), glyph.end());
      if (seen.insert(key).second) break;
    }
    marks.glyphs.push_back(std::move(glyph));
    marks.colors.push_back(
        hsv_to_rgb(float(k) / float(K), 0.85f, k % 2 ? 1.0f : 0.55f));
  }

  const int margin = spec.mark_size + spec.mark_jitter + 2;
  const int g = static_cast<int>(std::ceil(std::sqrt(double(K))));
  const int span = spec.image_size - 2 * margin;
  std::vector<std::pair<int, int>> grid;
  for (int r = 0; r < g; ++r)
    for (int c = 0; c < g; ++c)
      grid.emplace_back(margin + (g == 1 ? span / 2 : span * r / (g - 1)),
                        margin + (g == 1 ? span / 2 : span * c / (g - 1)));
  rng.shuffle(grid.begin(), grid.end());
  marks.anchors.assign(grid.begin(), grid.begin() + K);
  return marks;
}

inline void render_background(const ToySpec& spec, Rng& rng, Tensor<float>& img) {
  const int S = spec.image_size;
  const int family = static_cast<int>(rng.uniform_int(spec.base_patterns));
  auto rand_color = [&rng]() -> std::array<float, 3> {
    return {float(rng.uniform(0.05, 0.95)), float(rng.uniform(0.05, 0.95)),
            float(rng.uniform(0.05, 0.95))};
  };
  const auto c0 = rand_color(), c1 = rand_color();
  switch (family) {
    case 0: {  // directional gradient
      const double th = rng.uniform(0.0, 2.0 * 3.14159265358979);
      const double dx = std::cos(th), dy = std::sin(th);
      for (int h = 0; h < S; ++h)
        for (int w = 0; w < S; ++w) {
          const double t =
              0.5 + 0.5 * (dx * (w - S / 2.0) + dy * (h - S / 2.0)) / (S * 0.7);
          const float tc = float(std::clamp(t, 0.0, 1.0));
          for (int c = 0; c < 3; ++c)
            img.at3(c, h, w) = (1 - tc) * c0[c] + tc * c1[c];
        }
      break;
    }
    case 1: {  // sinusoidal stripes
      const double period = rng.uniform(8.0, 24.0);
      const double phase = rng.uniform(0.0, period);
      const int orient = static_cast<int>(rng.uniform_int(3));
      for (int h = 0; h < S; ++h)
        for (int w = 0; w < S; ++w) {
          const double p = orient == 0 ? w : orient == 1 ? h : (h + w) * 0.7071;
          const float tc =
              float(0.5 + 0.5 * std::sin(2.0 * 3.14159265358979 *
                                         (p + phase) / period));
          for (int c = 0; c < 3; ++c)
            img.at3(c, h, w) = (1 - tc) * c0[c] + tc * c1[c];
        }
      break;
    }
    case 2: {  // radial blob
      const double cx = rng.uniform(0.2, 0.8) * S;
      const double cy = rng.uniform(0.2, 0.8) * S;
      const double radius = rng.uniform(S * 0.25, S * 0.55);
      for (int h = 0; h < S; ++h)
        for (int w = 0; w < S; ++w) {
          const double d = std::hypot(w - cx, h - cy) / radius;
          const float tc = float(std::clamp(d, 0.0, 1.0));
          for (int c = 0; c < 3; ++c)
            img.at3(c, h, w) = (1 - tc) * c0[c] + tc * c1[c];
        }
      break;
    }
    default: {  // checker plus one random patch
      const int pitch = 8 + static_cast<int>(rng.uniform_int(9));
      const auto c2 = rand_color();
      const int rw = S / 4 + static_cast<int>(rng.uniform_int(S / 4));
      const int rh = S / 4 + static_cast<int>(rng.uniform_int(S / 4));
      const int r0 = static_cast<int>(rng.uniform_int(S - rh));
      const int w0 = static_cast<int>(rng.uniform_int(S - rw));
      for (int h = 0; h < S; ++h)
        for (int w = 0; w < S; ++w) {
          const bool even = ((h / pitch) + (w / pitch)) % 2 == 0;
          const auto& base = even ? c0 : c1;
          const bool in_rect = h >= r0 && h < r0 + rh && w >= w0 && w < w0 + rw;
          for (int c = 0; c < 3; ++c)
            img.at3(c, h, w) = in_rect ? c2[c] : base[c];
        }
      break;
    }
  }
}

}  // namespace detail

// Renders one toy sample. The rng stream depends on (seed, split, index)
// only, so classes share backgrounds, jitter and noise; the class enters
// through the stamped micro-mark alone.
inline Tensor<float> render_toy_image(const ToySpec& spec,
                                      const detail::ToyMarks& marks,
                                      int split_tag, int class_id, int index) {
  Rng rng = Rng(spec.seed)
                .fork(0x42470000ull + static_cast<std::uint64_t>(split_tag))
                .fork(static_cast<std::uint64_t>(index));
  Tensor<float> img({3, spec.image_size, spec.image_size});
  detail::render_background(spec, rng, img);

  const int jr = spec.mark_jitter > 0
                     ? static_cast<int>(rng.uniform_int(2 * spec.mark_jitter + 1)) -
                           spec.mark_jitter
                     : 0;
  const int jc = spec.mark_jitter > 0
                     ? static_cast<int>(rng.uniform_int(2 * spec.mark_jitter + 1)) -
                           spec.mark_jitter
                     : 0;
  if (spec.marks_enabled) {
    const auto& glyph = marks.glyphs[static_cast<std::size_t>(class_id)];
    const auto& color = marks.colors[static_cast<std::size_t>(class_id)];
    const auto [ar, ac] = marks.anchors[static_cast<std::size_t>(class_id)];
    for (int r = 0; r < spec.mark_size; ++r)
      for (int c = 0; c < spec.mark_size; ++c) {
        if (!glyph[static_cast<std::size_t>(r * spec.mark_size + c)]) continue;
        const int h = ar + jr + r, w = ac + jc + c;
        for (int ch = 0; ch < 3; ++ch)
          img.at3(ch, h, w) = 0.15f * img.at3(ch, h, w) + 0.85f * color[ch];
      }
  }
  if (spec.noise_level > 0) {
    for (auto& v : img.v)
      v = std::clamp(v + float(rng.normal(0.0, spec.noise_level)), 0.0f, 1.0f);
  }
  data::quantize_inplace(img);
  return img;
}

inline int split_tag_of(const std::string& split) {
  if (split == "train") return 0;
  if (split == "val") return 1;
  if (split == "test") return 2;
  throw ConfigError("unknown split '" + split + "'");
}

inline Dataset make_toy_split(const ToySpec& spec, const std::string& split) {
  spec.validate();
  const int tag = split_tag_of(split);
  const int per_class = tag == 0   ? spec.train_per_class
                        : tag == 1 ? spec.val_per_class
                                   : spec.test_per_class;
  const detail::ToyMarks marks = detail::make_marks(spec);
  Dataset ds;
  ds.image_size = spec.image_size;
  char name[32];
  for (int k = 0; k < spec.num_classes; ++k) {
    std::snprintf(name, sizeof(name), "class_%03d", k);
    ds.class_names.emplace_back(name);
  }
  for (int k = 0; k < spec.num_classes; ++k)
    for (int i = 0; i < per_class; ++i) {
      ds.images.push_back(render_toy_image(spec, marks, tag, k, i));
      ds.labels.push_back(k);
    }
  return ds;
}

// Writes train/val/test image-folder trees under out_dir.
inline void gen_toy_dataset(const ToySpec& spec, const std::string& out_dir) {
  spec.validate();
  for (const char* split : {"train", "val", "test"}) {
    const fs::path sdir = fs::path(out_dir) / split;
    if (fs::exists(sdir))
      throw IoError("output path collision: " + sdir.string() +
                    " already exists");
  }
  const detail::ToyMarks marks = detail::make_marks(spec);
  char cname[32], fname[32];
  for (const char* split : {"train", "val", "test"}) {
    const int tag = split_tag_of(split);
    const int per_class = tag == 0   ? spec.train_per_class
                          : tag == 1 ? spec.val_per_class
                                     : spec.test_per_class;
    for (int k = 0; k < spec.num_classes; ++k) {
      std::snprintf(cname, sizeof(cname), "class_%03d", k);
      const fs::path cdir = fs::path(out_dir) / split / cname;
      fs::create_directories(cdir);
      for (int i = 0; i < per_class; ++i) {
        Tensor<float> img = render_toy_image(spec, marks, tag, k, i);
        std::snprintf(fname, sizeof(fname), "%05d.png", i);
        encode_image_png((cdir / fname).string(), img);
      }
    }
  }
}

}  // namespace fd2::data
