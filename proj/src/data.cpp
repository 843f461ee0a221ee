#include "bbg/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>

#include "bbg/error.hpp"

namespace bbg {
namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot open '" + path + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t off,
                        const std::string& path) {
  require(off + 4 <= buf.size(), ErrorCode::kFormat,
          "'" + path + "': truncated IDX header");
  return (std::uint32_t{buf[off]} << 24) | (std::uint32_t{buf[off + 1]} << 16) |
         (std::uint32_t{buf[off + 2]} << 8) | std::uint32_t{buf[off + 3]};
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const std::array<char, 4> b = {static_cast<char>(v >> 24),
                                 static_cast<char>(v >> 16),
                                 static_cast<char>(v >> 8),
                                 static_cast<char>(v)};
  out.write(b.data(), 4);
}

double clamp_unit(double v) { return std::clamp(v, -1.0, 1.0); }

}  // namespace

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
  Dataset d;
  d.images = batch(rows);
  d.labels.reserve(rows.size());
  for (auto r : rows) d.labels.push_back(labels.at(r));
  d.num_classes = num_classes;
  d.split = split;
  return d;
}

Tensor Dataset::batch(const std::vector<std::size_t>& rows) const {
  const Shape& s = images.shape();
  const std::size_t per = s[1] * s[2] * s[3];
  Tensor out({rows.size(), s[1], s[2], s[3]});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < s[0], ErrorCode::kInvalidArgument, "row out of range");
    std::copy_n(&images[rows[i] * per], per, &out[i * per]);
  }
  return out;
}

Tensor Dataset::image(std::size_t row) const {
  const Shape& s = images.shape();
  return batch({row}).reshaped({s[1], s[2], s[3]});
}

Dataset load_idx_dataset(const std::string& images_path,
                         const std::string& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  require(read_be32(img, 0, images_path) == kIdxImagesMagic, ErrorCode::kFormat,
          "'" + images_path + "': bad IDX image magic");
  require(read_be32(lab, 0, labels_path) == kIdxLabelsMagic, ErrorCode::kFormat,
          "'" + labels_path + "': bad IDX label magic");
  const std::size_t n = read_be32(img, 4, images_path);
  const std::size_t rows = read_be32(img, 8, images_path);
  const std::size_t cols = read_be32(img, 12, images_path);
  const std::size_t nl = read_be32(lab, 4, labels_path);
  require(img.size() == 16 + n * rows * cols, ErrorCode::kFormat,
          "'" + images_path + "': payload length does not match header");
  require(lab.size() == 8 + nl, ErrorCode::kFormat,
          "'" + labels_path + "': payload length does not match header");
  require(n == nl, ErrorCode::kFormat,
          "image count " + std::to_string(n) + " != label count " +
              std::to_string(nl));

  Dataset d;
  d.images = Tensor({n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i)
    d.images[i] = img[16 + i] / 127.5 - 1.0;
  d.labels.resize(n);
  int max_label = -1;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lab[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.num_classes = max_label + 1;
  return d;
}

void write_idx_dataset(const Dataset& data, const std::string& images_path,
                       const std::string& labels_path) {
  require(data.channels() == 1, ErrorCode::kInvalidArgument,
          "IDX export supports single-channel images only");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  require(img.good() && lab.good(), ErrorCode::kIo, "cannot write IDX files");
  const Shape& s = data.images.shape();
  write_be32(img, kIdxImagesMagic);
  write_be32(img, static_cast<std::uint32_t>(s[0]));
  write_be32(img, static_cast<std::uint32_t>(s[2]));
  write_be32(img, static_cast<std::uint32_t>(s[3]));
  for (double v : data.images.data()) {
    const double byte = std::round((clamp_unit(v) + 1.0) * 127.5);
    img.put(static_cast<char>(static_cast<unsigned char>(byte)));
  }
  write_be32(lab, kIdxLabelsMagic);
  write_be32(lab, static_cast<std::uint32_t>(data.size()));
  for (int l : data.labels) lab.put(static_cast<char>(l));
  require(img.good() && lab.good(), ErrorCode::kIo, "IDX write failed");
}

Dataset synth_dataset(SynthKind kind, std::size_t n, std::uint64_t seed,
                      std::size_t resolution, int num_classes, double noise_scale) {
  require(n >= 1, ErrorCode::kInvalidArgument, "synth_dataset: n must be >= 1");
  require(resolution >= 8, ErrorCode::kInvalidArgument,
          "synth_dataset: resolution must be >= 8");
  require(noise_scale >= 0.0, ErrorCode::kInvalidArgument,
          "synth_dataset: noise_scale must be >= 0");
  if (num_classes <= 0) num_classes = kind == SynthKind::kShapes ? 3 : 4;
  require(kind != SynthKind::kShapes || num_classes == 3,
          ErrorCode::kInvalidArgument, "shapes has exactly 3 classes");

  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double res = static_cast<double>(resolution);
  const std::size_t plane = resolution * resolution;

  Dataset d;
  d.images = Tensor({n, 1, resolution, resolution});
  d.labels.resize(n);
  d.num_classes = num_classes;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(num_classes));
    d.labels[i] = label;
    double* px = &d.images[i * plane];
    if (kind == SynthKind::kShapes) {
      // Center jitter limited to 40% of the slack so the classes stay
      // nearest-neighbour separable in pixel space.
      const double r = (0.25 + 0.1 * unif(rng)) * res;
      const double cx = res / 2 + (2 * unif(rng) - 1) * 0.4 * (res / 2 - r);
      const double cy = res / 2 + (2 * unif(rng) - 1) * 0.4 * (res / 2 - r);
      const double ink = 0.5 + 0.5 * unif(rng);
      auto inside = [&](double x, double y) {
        const double dx = x - cx, dy = y - cy;
        switch (label) {
          case 0: return std::abs(dx) <= r * 0.85 && std::abs(dy) <= r * 0.85;
          case 1: return dx * dx + dy * dy <= r * r;
          default: {
            const double t = (dy + r) / (2 * r);  // 0 at apex, 1 at base
            return t >= 0 && t <= 1 && std::abs(dx) <= r * t;
          }
        }
      };
      for (std::size_t y = 0; y < resolution; ++y)
        for (std::size_t x = 0; x < resolution; ++x) {
          int hits = 0;  // 2x2 supersampling
          for (int sy = 0; sy < 2; ++sy)
            for (int sx = 0; sx < 2; ++sx)
              hits += inside(x + 0.25 + 0.5 * sx, y + 0.25 + 0.5 * sy);
          const double v = ink * hits / 4.0 + 0.04 * noise_scale * normal(rng);
          px[y * resolution + x] = clamp_unit(2.0 * v - 1.0);
        }
    } else {
      const double angle = 2.0 * std::numbers::pi * label / num_classes;
      const double cx = res / 2 + 0.25 * res * std::cos(angle) + 0.03 * res * normal(rng);
      const double cy = res / 2 + 0.25 * res * std::sin(angle) + 0.03 * res * normal(rng);
      const double sigma = 0.12 * res;
      for (std::size_t y = 0; y < resolution; ++y)
        for (std::size_t x = 0; x < resolution; ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          const double v = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)) +
                           0.02 * noise_scale * normal(rng);
          px[y * resolution + x] = clamp_unit(2.0 * v - 1.0);
        }
    }
  }
  return d;
}

HoldoutSplit split_holdout(const Dataset& data, double fraction,
                           std::uint64_t seed) {
  require(fraction > 0.0 && fraction < 1.0, ErrorCode::kInvalidArgument,
          "holdout fraction must be in (0, 1)");
  const std::size_t n = data.size();
  std::size_t n_val = static_cast<std::size_t>(std::ceil(fraction * n));
  require(n_val >= 1 && n_val < n, ErrorCode::kInvalidArgument,
          "dataset too small for a holdout split");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  HoldoutSplit s;
  s.val_rows.assign(perm.begin(), perm.begin() + n_val);
  s.train_rows.assign(perm.begin() + n_val, perm.end());
  std::sort(s.val_rows.begin(), s.val_rows.end());
  std::sort(s.train_rows.begin(), s.train_rows.end());
  s.train = data.subset(s.train_rows);
  s.train.split = Split::kTrain;
  s.train_val = data.subset(s.val_rows);
  s.train_val.split = Split::kTrainVal;
  return s;
}

CropWindow sample_crop(const AugmentSpec& spec, std::size_t src_h,
                       std::size_t src_w, Rng& rng, bool* fell_back) {
  const double h = static_cast<double>(src_h), w = static_cast<double>(src_w);
  const double side = std::min(h, w);
  const CropWindow center{(h - side) / 2, (w - side) / 2, side, side};
  if (fell_back) *fell_back = false;
  if (spec.mode == AugmentMode::kNone) return center;

  const double area_lo = spec.mode == AugmentMode::kBase ? 0.08 : 0.67;
  std::uniform_real_distribution<double> area_d(area_lo, 1.0);
  std::uniform_real_distribution<double> aspect_d(3.0 / 4.0, 4.0 / 3.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = area_d(rng) * h * w;
    const double aspect = aspect_d(rng);
    const double cw = std::sqrt(area * aspect);
    const double ch = std::sqrt(area / aspect);
    const double u = unif(rng), v = unif(rng);
    if (cw > w || ch > h || cw < 1.0 || ch < 1.0) continue;
    if (spec.mode == AugmentMode::kBase)
      return {u * (h - ch), v * (w - cw), ch, cw};
    // Light: offsets stay within the middle half of the slack.
    return {(h - ch) * (0.25 + 0.5 * u), (w - cw) * (0.25 + 0.5 * v), ch, cw};
  }
  if (fell_back) *fell_back = true;
  return center;
}

Tensor resample(const Tensor& image, const CropWindow& win, std::size_t out) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor r({c, out, out});
  const double sy = win.h / out, sx = win.w / out;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < out; ++y) {
      const double fy = std::clamp(win.y0 + (y + 0.5) * sy - 0.5, 0.0, h - 1.0);
      const std::size_t y0 = static_cast<std::size_t>(fy);
      const std::size_t y1 = std::min(y0 + 1, h - 1);
      const double ay = fy - y0;
      for (std::size_t x = 0; x < out; ++x) {
        const double fx = std::clamp(win.x0 + (x + 0.5) * sx - 0.5, 0.0, w - 1.0);
        const std::size_t x0 = static_cast<std::size_t>(fx);
        const std::size_t x1 = std::min(x0 + 1, w - 1);
        const double ax = fx - x0;
        const double* p = &image[ch * h * w];
        const double top = p[y0 * w + x0] * (1 - ax) + p[y0 * w + x1] * ax;
        const double bot = p[y1 * w + x0] * (1 - ax) + p[y1 * w + x1] * ax;
        r[(ch * out + y) * out + x] = top * (1 - ay) + bot * ay;
      }
    }
  return r;
}

Tensor augment(const Tensor& image, const AugmentSpec& spec, Rng& rng) {
  require(image.rank() == 3, ErrorCode::kShapeMismatch,
          "augment expects a [C x H x W] image");
  const std::size_t h = image.dim(1), w = image.dim(2);
  require(spec.crop >= 1 && spec.crop <= std::min(h, w),
          ErrorCode::kInvalidArgument,
          "crop size " + std::to_string(spec.crop) + " exceeds source " +
              std::to_string(h) + "x" + std::to_string(w));
  // Identity fast path keeps mode none exact at matching resolution.
  if (spec.mode == AugmentMode::kNone && h == w && h == spec.crop) return image;
  Tensor out = resample(image, sample_crop(spec, h, w, rng), spec.crop);
  if (spec.mode != AugmentMode::kNone) {
    std::bernoulli_distribution flip(0.5);
    if (flip(rng)) {
      const std::size_t c = out.dim(0), n = spec.crop;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < n; ++y) {
          double* row = &out[(ch * n + y) * n];
          std::reverse(row, row + n);
        }
    }
  }
  return out;
}

Tensor augment_batch(const Tensor& images, const AugmentSpec& spec, Rng& rng) {
  const Shape& s = images.shape();
  const std::size_t per = s[1] * s[2] * s[3];
  Tensor out({s[0], s[1], spec.crop, spec.crop});
  const std::size_t out_per = s[1] * spec.crop * spec.crop;
  for (std::size_t i = 0; i < s[0]; ++i) {
    // One master draw per image; the crop's retries use the derived stream.
    Rng sub(rng());
    Tensor img(Shape{s[1], s[2], s[3]},
               std::vector<double>(&images[i * per], &images[i * per] + per));
    Tensor a = augment(img, spec, sub);
    std::copy_n(a.data().data(), out_per, &out[i * out_per]);
  }
  return out;
}

}  // namespace bbg
