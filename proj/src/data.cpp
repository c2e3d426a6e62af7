#include "fclsim/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <set>

namespace fclsim {

Dataset::Dataset(Shape shape, std::optional<int> n_classes) : shape_(shape), n_classes_(n_classes) {
  if (shape.size() == 0) throw ConfigError("dataset shape must be non-empty");
  if (n_classes && *n_classes < 1) throw ConfigError("n_classes must be >= 1");
}

bool Dataset::labeled() const {
  return !examples_.empty() &&
         std::all_of(examples_.begin(), examples_.end(), [](const Example& e) { return e.label.has_value(); });
}

void Dataset::push_back(Example ex) {
  if (ex.pixels.size() != shape_.size()) {
    throw StructuralError("example has " + std::to_string(ex.pixels.size()) + " pixels, dataset expects " +
                          std::to_string(shape_.size()));
  }
  for (double v : ex.pixels) {
    if (!(v >= 0.0 && v <= 1.0)) throw StructuralError("pixel value outside [0, 1]");
  }
  if (ex.label) {
    if (*ex.label < 0 || (n_classes_ && *ex.label >= *n_classes_)) {
      throw StructuralError("label " + std::to_string(*ex.label) + " out of range");
    }
  }
  examples_.push_back(std::move(ex));
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out(shape_, n_classes_);
  out.examples_.reserve(indices.size());
  for (auto i : indices) out.examples_.push_back(examples_.at(i));
  return out;
}

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(examples_.size());
  for (const auto& e : examples_) {
    if (!e.label) throw StructuralError("dataset is not labeled");
    out.push_back(*e.label);
  }
  return out;
}

Matrix Dataset::to_matrix() const {
  Matrix m(examples_.size(), shape_.size());
  for (std::size_t i = 0; i < examples_.size(); ++i) {
    std::copy(examples_[i].pixels.begin(), examples_[i].pixels.end(), m.row(i).data());
  }
  return m;
}

Matrix Dataset::to_matrix(std::span<const std::size_t> indices) const {
  Matrix m(indices.size(), shape_.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& px = examples_.at(indices[i]).pixels;
    std::copy(px.begin(), px.end(), m.row(i).data());
  }
  return m;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kMinSide = 8;

// One low-frequency pattern per (class, channel), scaled to max |p| == 1.
std::vector<double> make_pattern(const Shape& s, RngStream& rng) {
  constexpr int kComponents = 4;
  std::vector<double> p(s.height * s.width, 0.0);
  for (int k = 0; k < kComponents; ++k) {
    const double fy = static_cast<double>(rng.uniform_index(3));
    const double fx = static_cast<double>(rng.uniform_index(3));
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double amp = rng.uniform(0.5, 1.0);
    for (std::size_t r = 0; r < s.height; ++r) {
      for (std::size_t c = 0; c < s.width; ++c) {
        const double y = static_cast<double>(r) / static_cast<double>(s.height);
        const double x = static_cast<double>(c) / static_cast<double>(s.width);
        p[r * s.width + c] += amp * std::cos(2.0 * std::numbers::pi * (fx * x + fy * y) + phase);
      }
    }
  }
  double peak = 0.0;
  for (double v : p) peak = std::max(peak, std::abs(v));
  if (peak > 0.0)
    for (auto& v : p) v /= peak;
  return p;
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_classes < 2) throw ConfigError("generate_synthetic: n_classes must be >= 2");
  if (spec.n_per_class < 1) throw ConfigError("generate_synthetic: n_per_class must be >= 1");
  if (!(spec.class_separation > 0.0)) throw ConfigError("generate_synthetic: class_separation must be > 0");
  if (spec.noise < 0.0) throw ConfigError("generate_synthetic: noise must be >= 0");
  if (spec.shape.channels < 1 || spec.shape.height < kMinSide || spec.shape.width < kMinSide) {
    throw ConfigError("generate_synthetic: shape must be at least 1x8x8 to host the default trigger");
  }

  const Shape& s = spec.shape;
  const std::size_t plane = s.height * s.width;
  RngStream template_rng(spec.template_seed, 0x7e3d1a7e);
  std::vector<std::vector<double>> templates(spec.n_classes, std::vector<double>(s.size()));
  for (int k = 0; k < spec.n_classes; ++k) {
    for (std::size_t ch = 0; ch < s.channels; ++ch) {
      auto p = make_pattern(s, template_rng);
      for (std::size_t i = 0; i < plane; ++i) {
        templates[k][ch * plane + i] = 0.5 + 0.5 * spec.class_separation * p[i];
      }
    }
  }

  Dataset ds(s, spec.n_classes);
  RngStream noise_rng(spec.seed, 0x5a3b1e);
  for (int k = 0; k < spec.n_classes; ++k) {
    for (int n = 0; n < spec.n_per_class; ++n) {
      Example ex{templates[k], k};
      if (spec.noise > 0.0) {
        for (auto& v : ex.pixels) v = std::clamp(v + noise_rng.normal(0.0, spec.noise), 0.0, 1.0);
      } else {
        for (auto& v : ex.pixels) v = std::clamp(v, 0.0, 1.0);
      }
      ds.push_back(std::move(ex));
    }
  }
  return ds;
}

Dataset generate_synthetic(int n_classes, int n_per_class, Shape shape, double class_separation, double noise,
                           std::uint64_t seed) {
  return generate_synthetic(SyntheticSpec{n_classes, n_per_class, shape, class_separation, noise, seed, seed});
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'F', 'C', 'L', 'D'};
constexpr std::uint16_t kVersion = 1;
constexpr std::size_t kHeaderSize = 4 + 2 + 4 + 1 + 2 + 2 + 1;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* field) {
    need(sizeof(T), field);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }

  void need(std::size_t n, const char* field) const {
    if (bytes_.size() - pos_ < n) {
      throw ParseError(std::string("truncated file while reading ") + field, pos_);
    }
  }

  std::size_t pos() const { return pos_; }
  std::span<const std::uint8_t> take(std::size_t n, const char* field) {
    need(n, field);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

double quantize_pixel(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  const Shape& s = ds.shape();
  if (s.channels > 0xff || s.height > 0xffff || s.width > 0xffff) throw ConfigError("shape too large for FCLD");
  if (ds.size() > 0xffffffffULL) throw ConfigError("too many examples for FCLD");
  const bool has_labels = ds.labeled();

  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + ds.size() * s.size() + (has_labels ? 2 * ds.size() : 0));
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_le<std::uint16_t>(out, kVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.size()));
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(s.channels));
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(s.height));
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(s.width));
  put_le<std::uint8_t>(out, has_labels ? 1 : 0);
  for (const auto& ex : ds.examples()) {
    for (double v : ex.pixels) out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  if (has_labels) {
    for (const auto& ex : ds.examples()) {
      if (*ex.label > 0xffff) throw ConfigError("label too large for FCLD");
      put_le<std::uint16_t>(out, static_cast<std::uint16_t>(*ex.label));
    }
  }
  return out;
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  Reader rd(bytes);
  if (bytes.size() < 4 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw ParseError("bad magic", 0);
  }
  rd.take(4, "magic");
  const auto version = rd.get<std::uint16_t>("version");
  if (version != kVersion) throw ParseError("unsupported version " + std::to_string(version), 4);
  const auto n = rd.get<std::uint32_t>("example count");
  const auto c = rd.get<std::uint8_t>("channels");
  const auto h = rd.get<std::uint16_t>("height");
  const auto w = rd.get<std::uint16_t>("width");
  const std::size_t flag_offset = rd.pos();
  const auto has_labels = rd.get<std::uint8_t>("label flag");
  if (has_labels > 1) throw ParseError("label flag must be 0 or 1", flag_offset);
  if (c == 0 || h == 0 || w == 0) throw ParseError("zero-sized image shape", 10);

  const Shape shape{c, h, w};
  const std::size_t per_image = shape.size();
  const std::size_t remaining = bytes.size() - rd.pos();
  // Guards n * per_image against overflow before any allocation.
  if (n != 0 && per_image > remaining / n + 1) {
    throw ParseError("truncated file: header declares " + std::to_string(n) + " examples of " +
                         std::to_string(per_image) + " bytes",
                     rd.pos() + remaining);
  }
  const std::size_t pixel_bytes = static_cast<std::size_t>(n) * per_image;
  if (pixel_bytes > remaining) {
    throw ParseError("truncated file: header declares " + std::to_string(n) + " examples, body holds " +
                         std::to_string(remaining / per_image),
                     bytes.size());
  }
  auto pixels = rd.take(pixel_bytes, "pixels");
  std::vector<int> labels;
  if (has_labels) {
    rd.need(2 * static_cast<std::size_t>(n), "labels");
    labels.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) labels.push_back(rd.get<std::uint16_t>("label"));
  }
  if (rd.pos() != bytes.size()) throw ParseError("trailing bytes after dataset body", rd.pos());

  std::optional<int> n_classes;
  if (has_labels && n > 0) n_classes = *std::max_element(labels.begin(), labels.end()) + 1;
  Dataset ds(shape, n_classes);
  for (std::uint32_t i = 0; i < n; ++i) {
    Example ex;
    ex.pixels.resize(per_image);
    for (std::size_t k = 0; k < per_image; ++k) ex.pixels[k] = pixels[i * per_image + k] / 255.0;
    if (has_labels) ex.label = labels[i];
    ds.push_back(std::move(ex));
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  const auto bytes = encode_dataset(ds);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_dataset(bytes);
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

AugmentPolicy AugmentPolicy::simclr_lite() {
  AugmentPolicy p;
  p.crop = true;
  p.crop_min_area = 0.5;
  p.flip = true;
  p.noise_sigma = 0.05;
  p.brightness = 0.2;
  return p;
}

Example augment(const Example& x, const Shape& s, RngStream& rng, const AugmentPolicy& policy) {
  Example out = x;
  const std::size_t H = s.height, W = s.width, plane = H * W;

  if (policy.crop) {
    const double area = rng.uniform(std::clamp(policy.crop_min_area, 0.0, 1.0), 1.0);
    const double side = std::sqrt(area);
    const double ch = std::max(1.0, side * static_cast<double>(H));
    const double cw = std::max(1.0, side * static_cast<double>(W));
    const double top = rng.uniform(0.0, static_cast<double>(H) - ch);
    const double left = rng.uniform(0.0, static_cast<double>(W) - cw);
    for (std::size_t c = 0; c < s.channels; ++c) {
      for (std::size_t r = 0; r < H; ++r) {
        // Bilinear sample at the centre of each output pixel.
        const double sy = std::clamp(top + (r + 0.5) * ch / H - 0.5, 0.0, static_cast<double>(H - 1));
        const auto y0 = static_cast<std::size_t>(sy);
        const std::size_t y1 = std::min(y0 + 1, H - 1);
        const double fy = sy - y0;
        for (std::size_t col = 0; col < W; ++col) {
          const double sx = std::clamp(left + (col + 0.5) * cw / W - 0.5, 0.0, static_cast<double>(W - 1));
          const auto x0 = static_cast<std::size_t>(sx);
          const std::size_t x1 = std::min(x0 + 1, W - 1);
          const double fx = sx - x0;
          const double* src = x.pixels.data() + c * plane;
          const double v = (1 - fy) * ((1 - fx) * src[y0 * W + x0] + fx * src[y0 * W + x1]) +
                           fy * ((1 - fx) * src[y1 * W + x0] + fx * src[y1 * W + x1]);
          out.pixels[c * plane + r * W + col] = v;
        }
      }
    }
  }

  if (policy.flip && rng.bernoulli(0.5)) {
    for (std::size_t c = 0; c < s.channels; ++c)
      for (std::size_t r = 0; r < H; ++r) {
        auto* row = out.pixels.data() + c * plane + r * W;
        std::reverse(row, row + W);
      }
  }

  if (policy.noise_sigma > 0.0) {
    for (auto& v : out.pixels) v += rng.normal(0.0, policy.noise_sigma);
  }

  if (policy.brightness > 0.0) {
    for (std::size_t c = 0; c < s.channels; ++c) {
      const double shift = rng.uniform(-policy.brightness, policy.brightness);
      for (std::size_t i = 0; i < plane; ++i) out.pixels[c * plane + i] += shift;
    }
  }

  for (auto& v : out.pixels) v = std::clamp(v, 0.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Triggers
// ---------------------------------------------------------------------------

Trigger Trigger::white_square(const Shape& image, std::size_t side, std::size_t row, std::size_t col, int id) {
  Trigger t;
  t.patch_shape = Shape{image.channels, side, side};
  t.patch.assign(t.patch_shape.size(), 1.0);
  t.row = row;
  t.col = col;
  t.id = id;
  return t;
}

Trigger Trigger::default_for(const Shape& image, int id) {
  const std::size_t side = (std::min(image.height, image.width) + 7) / 8;
  return white_square(image, side, image.height - side, image.width - side, id);
}

bool Trigger::fits(const Shape& image) const {
  return patch_shape.channels == image.channels && patch.size() == patch_shape.size() &&
         row + patch_shape.height <= image.height && col + patch_shape.width <= image.width;
}

Example embed_trigger(const Example& x, const Shape& s, const Trigger& e) {
  if (!e.fits(s)) throw StructuralError("trigger does not fit inside the image at its anchor position");
  if (x.pixels.size() != s.size()) throw StructuralError("embed_trigger: example does not match shape");
  Example out = x;
  const auto& p = e.patch_shape;
  for (std::size_t c = 0; c < p.channels; ++c)
    for (std::size_t r = 0; r < p.height; ++r)
      for (std::size_t col = 0; col < p.width; ++col) {
        out.pixels[(c * s.height + e.row + r) * s.width + e.col + col] = e.patch[(c * p.height + r) * p.width + col];
      }
  return out;
}

Dataset embed_trigger(const Dataset& ds, const Trigger& e) {
  Dataset out(ds.shape(), ds.n_classes());
  for (const auto& ex : ds.examples()) out.push_back(embed_trigger(ex, ds.shape(), e));
  return out;
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

namespace {

Partition iid_split(std::size_t n, int n_clients, RngStream& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  Partition p;
  const std::size_t k = static_cast<std::size_t>(n_clients);
  for (std::size_t c = 0; c < k; ++c) {
    // Client c takes positions c, c+k, c+2k... so sizes differ by at most one.
    auto& bucket = p[static_cast<int>(c)];
    for (std::size_t i = c; i < n; i += k) bucket.push_back(idx[i]);
    std::sort(bucket.begin(), bucket.end());
  }
  return p;
}

Partition dirichlet_split(const Dataset& ds, int n_clients, double alpha, RngStream& rng) {
  const auto labels = ds.labels();
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

  Partition p;
  for (int c = 0; c < n_clients; ++c) p[c];
  std::gamma_distribution<double> gamma(alpha, 1.0);
  for (auto& [label, members] : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    std::vector<double> share(n_clients);
    double total = 0.0;
    for (auto& s : share) total += (s = gamma(rng));
    if (!(total > 0.0)) {
      share.assign(n_clients, 1.0);
      total = n_clients;
    }
    double cum = 0.0;
    std::size_t start = 0;
    for (int c = 0; c < n_clients; ++c) {
      cum += share[c] / total;
      const std::size_t end =
          c + 1 == n_clients ? members.size()
                             : std::min(members.size(), static_cast<std::size_t>(cum * members.size()));
      for (std::size_t i = start; i < end; ++i) p[c].push_back(members[i]);
      start = std::max(start, end);
    }
  }
  for (auto& [c, bucket] : p) std::sort(bucket.begin(), bucket.end());
  return p;
}

}  // namespace

Partition partition(const Dataset& ds, int n_clients, const PartitionMode& mode, std::uint64_t seed) {
  if (n_clients < 1) throw ConfigError("partition: n_clients must be >= 1");
  if (ds.size() < static_cast<std::size_t>(n_clients)) {
    throw ConfigError("partition: fewer examples than clients, some client would be empty");
  }
  RngStream rng(seed, 0x9a27);
  if (mode.kind == PartitionMode::Kind::iid) return iid_split(ds.size(), n_clients, rng);

  if (!(mode.alpha > 0.0)) throw ConfigError("partition: dirichlet alpha must be > 0");
  if (!ds.labeled()) throw ConfigError("partition: dirichlet mode requires a labeled dataset");
  constexpr int kMaxAttempts = 100;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    auto p = dirichlet_split(ds, n_clients, mode.alpha, rng);
    if (std::all_of(p.begin(), p.end(), [](const auto& kv) { return !kv.second.empty(); })) return p;
  }
  throw ConfigError("partition: could not draw a dirichlet split without empty clients after 100 attempts");
}

bool partition_is_valid(const Partition& p, std::size_t n) {
  std::set<std::size_t> seen;
  for (const auto& [client, idx] : p) {
    if (idx.empty()) return false;
    for (auto i : idx) {
      if (i >= n || !seen.insert(i).second) return false;
    }
  }
  return true;
}

}  // namespace fclsim
