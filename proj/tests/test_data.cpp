#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "fclsim/data.hpp"

using namespace fclsim;

namespace {

SyntheticSpec small_spec(std::uint64_t seed) {
  SyntheticSpec s;
  s.n_classes = 4;
  s.n_per_class = 20;
  s.shape = {1, 8, 8};
  s.class_separation = 0.8;
  s.noise = 0.05;
  s.seed = seed;
  s.template_seed = 99;
  return s;
}

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "fclsim_test_data";
  std::filesystem::create_directories(dir);
  return dir / name;
}

double entropy(const std::vector<double>& counts) {
  double total = 0.0, h = 0.0;
  for (double c : counts) total += c;
  for (double c : counts)
    if (c > 0) h -= c / total * std::log(c / total);
  return h;
}

}  // namespace

TEST_CASE("noise-free synthetic classes are constant") {
  auto spec = small_spec(1);
  spec.noise = 0.0;
  const Dataset ds = generate_synthetic(spec);
  REQUIRE(ds.size() == 80);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& first = ds[static_cast<std::size_t>(*ds[i].label) * 20];
    CHECK(ds[i].pixels == first.pixels);
  }
  CHECK(ds[0].pixels != ds[20].pixels);
}

TEST_CASE("synthetic generation is deterministic in its seed") {
  CHECK(generate_synthetic(small_spec(5)) == generate_synthetic(small_spec(5)));
  CHECK_FALSE(generate_synthetic(small_spec(5)) == generate_synthetic(small_spec(6)));
}

TEST_CASE("synthetic pixels are in range and labels are balanced") {
  const Dataset ds = generate_synthetic(small_spec(2));
  std::vector<int> per_class(4);
  for (const auto& ex : ds.examples()) {
    for (double v : ex.pixels) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    ++per_class[static_cast<std::size_t>(*ex.label)];
  }
  for (int c : per_class) CHECK(c == 20);
}

TEST_CASE("synthetic classes are separable by raw-pixel nearest neighbour") {
  auto spec = small_spec(3);
  spec.shape = {1, 12, 12};
  const Dataset train = generate_synthetic(spec);
  spec.seed = 4;
  const Dataset test = generate_synthetic(spec);
  // 1-NN by squared Euclidean distance, written out independently of the library.
  std::size_t hits = 0;
  for (const auto& q : test.examples()) {
    double best = 1e300;
    int label = -1;
    for (const auto& b : train.examples()) {
      double d = 0.0;
      for (std::size_t k = 0; k < q.pixels.size(); ++k) d += (q.pixels[k] - b.pixels[k]) * (q.pixels[k] - b.pixels[k]);
      if (d < best) {
        best = d;
        label = *b.label;
      }
    }
    hits += label == *q.label;
  }
  CHECK(hits == test.size());
}

TEST_CASE("synthetic generation rejects tiny images and bad parameters") {
  auto spec = small_spec(1);
  spec.shape = {1, 7, 16};
  CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
  spec = small_spec(1);
  spec.n_classes = 1;
  CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
  spec = small_spec(1);
  spec.class_separation = 0.0;
  CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
}

TEST_CASE("dataset file round trip is exact after quantization") {
  const Dataset ds = generate_synthetic(small_spec(7));
  const auto path = temp_file("roundtrip.fcld");
  save_dataset(ds, path);
  const Dataset back = load_dataset(path);
  REQUIRE(back.size() == ds.size());
  CHECK(back.shape() == ds.shape());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(back[i].label == ds[i].label);
    for (std::size_t k = 0; k < ds[i].pixels.size(); ++k) CHECK(back[i].pixels[k] == quantize_pixel(ds[i].pixels[k]));
  }
  // A second trip is lossless.
  CHECK(decode_dataset(encode_dataset(back)) == back);
}

TEST_CASE("unlabeled datasets round trip without labels") {
  Dataset ds(Shape{2, 8, 8}, std::nullopt);
  ds.push_back({std::vector<double>(128, 0.25), std::nullopt});
  const auto back = decode_dataset(encode_dataset(ds));
  REQUIRE(back.size() == 1);
  CHECK_FALSE(back[0].label.has_value());
  CHECK(back.shape() == ds.shape());
}

TEST_CASE("dataset decoding errors carry offsets") {
  SUBCASE("empty input") {
    try {
      decode_dataset({});
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("bad magic") != std::string::npos);
      CHECK(e.offset() == 0);
    }
  }
  SUBCASE("truncated body") {
    SyntheticSpec spec = small_spec(1);
    spec.n_classes = 2;
    spec.n_per_class = 5;
    auto bytes = encode_dataset(generate_synthetic(spec));
    // Header says 10 examples; drop the labels and the last image.
    bytes.resize(16 + 9 * 64);
    CHECK_THROWS_WITH_AS(decode_dataset(bytes), doctest::Contains("truncated"), ParseError);
  }
  SUBCASE("trailing garbage") {
    auto bytes = encode_dataset(generate_synthetic(small_spec(1)));
    bytes.push_back(0);
    CHECK_THROWS_AS(decode_dataset(bytes), ParseError);
  }
  SUBCASE("absurd example count") {
    auto bytes = encode_dataset(generate_synthetic(small_spec(1)));
    bytes[6] = bytes[7] = bytes[8] = bytes[9] = 0xff;
    CHECK_THROWS_AS(decode_dataset(bytes), ParseError);
  }
  CHECK_THROWS(load_dataset(temp_file("does_not_exist.fcld")));
}

TEST_CASE("an empty augmentation policy is the identity") {
  const Dataset ds = generate_synthetic(small_spec(8));
  RngStream rng(1, 1);
  CHECK(augment(ds[3], ds.shape(), rng, AugmentPolicy::none()) == ds[3]);
}

TEST_CASE("augmentation is deterministic per stream and varies across streams") {
  const Dataset ds = generate_synthetic(small_spec(9));
  const auto policy = AugmentPolicy::simclr_lite();
  RngStream a(3, 1), b(3, 1);
  CHECK(augment(ds[0], ds.shape(), a, policy) == augment(ds[0], ds.shape(), b, policy));

  int collisions = 0;
  for (std::uint64_t k = 0; k < 100; ++k) {
    RngStream s1(10, 2 * k), s2(10, 2 * k + 1);
    collisions += augment(ds[0], ds.shape(), s1, policy) == augment(ds[0], ds.shape(), s2, policy);
  }
  CHECK(collisions <= 1);
}

TEST_CASE("augmentation preserves shape and range") {
  const Dataset ds = generate_synthetic(small_spec(10));
  AugmentPolicy loud = AugmentPolicy::simclr_lite();
  loud.noise_sigma = 0.8;
  loud.brightness = 0.9;
  loud.crop_min_area = 0.1;
  RngStream rng(4, 4);
  for (const auto& policy : {AugmentPolicy::simclr_lite(), loud}) {
    for (const auto& ex : ds.examples()) {
      const auto out = augment(ex, ds.shape(), rng, policy);
      REQUIRE(out.pixels.size() == ex.pixels.size());
      CHECK(out.label == ex.label);
      for (double v : out.pixels) CHECK((v >= 0.0 && v <= 1.0));
    }
  }
}

TEST_CASE("white patch on a black image") {
  const Shape s{3, 8, 8};
  const Example black{std::vector<double>(s.size(), 0.0), std::nullopt};
  const auto t = Trigger::white_square(s, 3, 0, 0);
  const auto out = embed_trigger(black, s, t);
  int ones = 0, zeros = 0;
  for (double v : out.pixels) {
    ones += v == 1.0;
    zeros += v == 0.0;
  }
  CHECK(ones == 27);
  CHECK(zeros == static_cast<int>(s.size()) - 27);
  CHECK(black.pixels == std::vector<double>(s.size(), 0.0));
}

TEST_CASE("trigger embedding is idempotent and local") {
  const Dataset ds = generate_synthetic(small_spec(11));
  const auto t = Trigger::default_for(ds.shape());
  for (const auto& ex : ds.examples()) {
    const auto once = embed_trigger(ex, ds.shape(), t);
    CHECK(embed_trigger(once, ds.shape(), t) == once);
    CHECK(once.pixels.size() == ex.pixels.size());
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 8; ++c) {
        const bool inside = r >= t.row && r < t.row + t.patch_shape.height && c >= t.col && c < t.col + t.patch_shape.width;
        if (inside) {
          CHECK(once.at(ds.shape(), 0, r, c) == 1.0);
        } else {
          CHECK(once.at(ds.shape(), 0, r, c) == ex.at(ds.shape(), 0, r, c));
        }
      }
  }
}

TEST_CASE("default trigger sits in the bottom-right corner") {
  const auto t = Trigger::default_for(Shape{1, 16, 12});
  CHECK(t.patch_shape.height == 2);
  CHECK(t.row == 14);
  CHECK(t.col == 10);
}

TEST_CASE("out-of-bounds triggers are rejected") {
  const Shape s{1, 8, 8};
  const Example ex{std::vector<double>(64, 0.5), 0};
  CHECK_THROWS_AS(embed_trigger(ex, s, Trigger::white_square(s, 3, 6, 0)), StructuralError);
  CHECK_THROWS_AS(embed_trigger(ex, s, Trigger::white_square(Shape{3, 8, 8}, 2, 0, 0)), StructuralError);
}

TEST_CASE("single client owns everything") {
  const Dataset ds = generate_synthetic(small_spec(12));
  for (const auto& mode : {PartitionMode::iid(), PartitionMode::dirichlet(0.5)}) {
    const auto p = partition(ds, 1, mode, 3);
    REQUIRE(p.size() == 1);
    CHECK(p.at(0).size() == ds.size());
  }
}

TEST_CASE("iid split is even and covers every index") {
  auto spec = small_spec(13);
  spec.n_classes = 10;
  spec.n_per_class = 100;
  const Dataset ds = generate_synthetic(spec);
  const auto p = partition(ds, 10, PartitionMode::iid(), 17);
  std::set<std::size_t> all;
  for (const auto& [c, idx] : p) {
    CHECK(idx.size() == 100);
    all.insert(idx.begin(), idx.end());
  }
  CHECK(all.size() == 1000);
  CHECK(*all.rbegin() == 999);
}

TEST_CASE("partitions are valid for every mode and seed") {
  auto spec = small_spec(14);
  spec.n_classes = 5;
  spec.n_per_class = 13;
  const Dataset ds = generate_synthetic(spec);
  RngStream rng(77, 0);
  for (int t = 0; t < 60; ++t) {
    const int n = 1 + static_cast<int>(rng.uniform_index(12));
    const PartitionMode mode = rng.bernoulli(0.5) ? PartitionMode::iid() : PartitionMode::dirichlet(rng.uniform(0.2, 5.0));
    const auto seed = rng();
    const auto p = partition(ds, n, mode, seed);
    CHECK(partition_is_valid(p, ds.size()));
    CHECK(static_cast<int>(p.size()) == n);
    std::size_t covered = 0;
    for (const auto& [c, idx] : p) covered += idx.size();
    CHECK(covered == ds.size());
    CHECK(p == partition(ds, n, mode, seed));
  }
}

TEST_CASE("dirichlet splits are less mixed than iid splits") {
  SyntheticSpec spec = small_spec(15);
  spec.n_classes = 10;
  spec.n_per_class = 50;
  spec.noise = 0.0;
  const Dataset ds = generate_synthetic(spec);
  const auto labels = ds.labels();
  auto max_entropy = [&](const Partition& p) {
    double best = 0.0;
    for (const auto& [c, idx] : p) {
      std::vector<double> counts(10);
      for (auto i : idx) counts[static_cast<std::size_t>(labels[i])] += 1;
      best = std::max(best, entropy(counts));
    }
    return best;
  };
  double iid = 0.0, dir = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    iid += max_entropy(partition(ds, 10, PartitionMode::iid(), seed));
    dir += max_entropy(partition(ds, 10, PartitionMode::dirichlet(0.5), seed));
  }
  CHECK(dir / 50 < iid / 50);
}

TEST_CASE("partition errors") {
  const Dataset ds = generate_synthetic(small_spec(16));
  CHECK_THROWS_AS(partition(ds, 0, PartitionMode::iid(), 1), ConfigError);
  CHECK_THROWS_AS(partition(ds, 81, PartitionMode::iid(), 1), ConfigError);
  CHECK_THROWS_AS(partition(ds, 4, PartitionMode::dirichlet(0.0), 1), ConfigError);
  Dataset unlabeled(ds.shape(), std::nullopt);
  for (int i = 0; i < 10; ++i) unlabeled.push_back({ds[static_cast<std::size_t>(i)].pixels, std::nullopt});
  CHECK_THROWS_AS(partition(unlabeled, 2, PartitionMode::dirichlet(1.0), 1), ConfigError);
  // 80 examples across 80 clients with a tiny alpha almost surely leaves someone empty.
  CHECK_THROWS_AS(partition(ds, 80, PartitionMode::dirichlet(0.01), 1), ConfigError);
}

TEST_CASE("dataset push_back validates its input") {
  Dataset ds(Shape{1, 8, 8}, 3);
  CHECK_THROWS(ds.push_back({std::vector<double>(63, 0.5), 0}));
  CHECK_THROWS(ds.push_back({std::vector<double>(64, 1.5), 0}));
  CHECK_THROWS(ds.push_back({std::vector<double>(64, 0.5), 3}));
  ds.push_back({std::vector<double>(64, 0.5), 2});
  CHECK(ds.size() == 1);
}
