#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "flowdiff/dataset.hpp"
#include "flowdiff/errors.hpp"
#include "flowdiff/forward_model.hpp"
#include "flowdiff/image_io.hpp"
#include "flowdiff/metrics.hpp"
#include "flowdiff/tensor.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using flowdiff::Dataset;
using flowdiff::ForwardModel;
using flowdiff_test::make_noisy_toy_dataset;
using flowdiff_test::read_file;
using flowdiff_test::TempDir;

TEST_CASE("corruption is reproducible byte for byte") {
  TempDir tmp;
  const auto m1 = make_noisy_toy_dataset(tmp.path() / "one", 6, 8, 8,
                                         ForwardModel::noise_only(0.3), 77);
  // Reuse the clean images so only the corruption run is repeated.
  const auto m2 = flowdiff::build_corrupted_dataset(tmp.path() / "one" / "clean",
                                                    tmp.path() / "two", ForwardModel::noise_only(0.3),
                                                    "noise", 77);
  REQUIRE(m1.entries.size() == m2.entries.size());
  CHECK(read_file(m1.base_dir / "manifest.json") == read_file(m2.base_dir / "manifest.json"));
  for (std::size_t i = 0; i < m1.entries.size(); ++i) {
    CHECK(m1.entries[i].id == m2.entries[i].id);
    CHECK(read_file(m1.observation_file(i)) == read_file(m2.observation_file(i)));
    CHECK(read_file(*m1.reference_file(i)) == read_file(*m2.reference_file(i)));
  }

  // A different corruption seed produces different observations.
  const auto m3 = flowdiff::build_corrupted_dataset(
      tmp.path() / "one" / "clean", tmp.path() / "three", ForwardModel::noise_only(0.3), "noise", 78);
  bool any_diff = false;
  for (std::size_t i = 0; i < m1.entries.size(); ++i) {
    if (read_file(m1.observation_file(i)) != read_file(m3.observation_file(i))) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("a noiseless identity corruption copies the clean bytes") {
  TempDir tmp;
  const auto m = make_noisy_toy_dataset(tmp.path() / "d", 4, 8, 8,
                                        ForwardModel::identity_model(0.0), 5);
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto clean = tmp.path() / "d" / "clean" / (m.entries[i].id + ".pgm");
    CHECK(read_file(m.observation_file(i)) == read_file(clean));
    CHECK(read_file(*m.reference_file(i)) == read_file(clean));
  }
}

TEST_CASE("ids come from sorted file stems") {
  TempDir tmp;
  const auto m = make_noisy_toy_dataset(tmp.path() / "d", 5, 8, 8,
                                        ForwardModel::noise_only(0.1), 1);
  REQUIRE(m.entries.size() == 5);
  auto ids = m.entries;
  CHECK(std::is_sorted(ids.begin(), ids.end(),
                       [](const auto& a, const auto& b) { return a.id < b.id; }));
  for (const auto& e : m.entries) {
    CHECK(e.observation_path == "obs/" + e.id + ".pgm");
    CHECK(*e.reference_path == "ref/" + e.id + ".pgm");
  }
}

TEST_CASE("mixed clean shapes are rejected with the offending ids") {
  TempDir tmp;
  const auto clean = tmp.path() / "clean";
  fs::create_directories(clean);
  flowdiff::save_image(flowdiff::Tensor::full({1, 8, 8}, 0.5), clean / "a.pgm");
  flowdiff::save_image(flowdiff::Tensor::full({1, 8, 8}, 0.5), clean / "b.pgm");
  flowdiff::save_image(flowdiff::Tensor::full({1, 6, 6}, 0.5), clean / "c_odd.pgm");
  try {
    (void)flowdiff::build_corrupted_dataset(clean, tmp.path() / "out",
                                            ForwardModel::noise_only(0.1), "noise", 1);
    FAIL("expected a shape error");
  } catch (const flowdiff::ShapeError& e) {
    CHECK(std::string(e.what()).find("c_odd") != std::string::npos);
  }
}

TEST_CASE("corruption requires an existing, non-empty clean directory") {
  TempDir tmp;
  CHECK_THROWS_AS((void)flowdiff::build_corrupted_dataset(tmp.path() / "missing", tmp.path() / "o",
                                                          ForwardModel::noise_only(0.1), "n", 1),
                  flowdiff::IoError);
  fs::create_directories(tmp.path() / "empty");
  CHECK_THROWS_AS((void)flowdiff::build_corrupted_dataset(tmp.path() / "empty", tmp.path() / "o",
                                                          ForwardModel::noise_only(0.1), "n", 1),
                  flowdiff::IoError);
}

TEST_CASE("moderate noise lands observations in the expected PSNR band") {
  TempDir tmp;
  const auto m = make_noisy_toy_dataset(tmp.path() / "d", 16, 8, 8,
                                        ForwardModel::noise_only(0.3), 123);
  const double obs_psnr = flowdiff_test::observation_psnr(Dataset(m));
  CHECK(obs_psnr > 12.5);
  CHECK(obs_psnr < 14.5);
}

TEST_CASE("the manifest round-trips and validates on load") {
  TempDir tmp;
  const auto m = make_noisy_toy_dataset(tmp.path() / "d", 3, 8, 8,
                                        ForwardModel::noise_only(0.2), 9);
  const auto loaded = flowdiff::load_manifest(tmp.path() / "d" / "dataset" / "manifest.json");
  REQUIRE(loaded.entries.size() == 3);
  CHECK(loaded.forward_model_id == m.forward_model_id);
  CHECK(loaded.corruption_seed == 9);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(loaded.entries[i].id == m.entries[i].id);
    CHECK(loaded.entries[i].observation_path == m.entries[i].observation_path);
  }

  // Deleting a referenced file invalidates the manifest.
  fs::remove(loaded.observation_file(1));
  CHECK_THROWS_AS((void)flowdiff::load_manifest(tmp.path() / "d" / "dataset" / "manifest.json"),
                  flowdiff::IoError);
}

TEST_CASE("duplicate ids are rejected at load") {
  TempDir tmp;
  const auto dir = tmp.path();
  flowdiff::save_image(flowdiff::Tensor::full({1, 8, 8}, 0.5), dir / "x.pgm");
  const std::string manifest = R"({
    "forward_model_id": "noise",
    "corruption_seed": 1,
    "entries": [
      {"id": "x", "observation_path": "x.pgm"},
      {"id": "x", "observation_path": "x.pgm"}
    ]
  })";
  {
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    out << manifest;
  }
  CHECK_THROWS_AS((void)flowdiff::load_manifest(dir / "manifest.json"), flowdiff::FormatError);
}

TEST_CASE("an empty manifest is a valid empty dataset") {
  TempDir tmp;
  const std::string manifest = R"({"forward_model_id": "noise", "corruption_seed": 0, "entries": []})";
  {
    std::ofstream out(tmp.path() / "manifest.json", std::ios::binary);
    out << manifest;
  }
  const auto m = flowdiff::load_manifest(tmp.path() / "manifest.json");
  const Dataset ds(m);
  CHECK(ds.size() == 0);
  CHECK_THROWS_AS((void)flowdiff::BatchStream(ds, 4, 0), flowdiff::PreconditionError);
}

TEST_CASE("the dataset exposes images and batches faithfully") {
  TempDir tmp;
  const auto m = make_noisy_toy_dataset(tmp.path() / "d", 5, 8, 8,
                                        ForwardModel::noise_only(0.2), 44);
  const Dataset ds(m);
  REQUIRE(ds.size() == 5);
  CHECK(ds.has_references());
  CHECK(ds.image_shape() == std::vector<std::int64_t>{1, 8, 8});

  // Accessors agree with the files on disk.
  const flowdiff::Tensor obs0 = flowdiff::load_image(m.observation_file(0));
  for (std::int64_t i = 0; i < obs0.numel(); ++i) CHECK(ds.observation(0)[i] == obs0[i]);

  const std::vector<std::size_t> idxs = {3, 0, 3};
  const auto batch = ds.make_batch(idxs);
  REQUIRE(batch.observations.shape() == std::vector<std::int64_t>{3, 1, 8, 8});
  REQUIRE(batch.references.has_value());
  CHECK(batch.ids == std::vector<std::string>{ds.id(3), ds.id(0), ds.id(3)});
  for (std::int64_t i = 0; i < 64; ++i) {
    CHECK(batch.observations[i] == ds.observation(3)[i]);
    CHECK(batch.observations[64 + i] == ds.observation(0)[i]);
    CHECK((*batch.references)[i] == ds.reference(3)[i]);
  }

  CHECK_THROWS_AS((void)ds.make_batch(std::vector<std::size_t>{}), flowdiff::PreconditionError);
  CHECK_THROWS_AS((void)ds.make_batch(std::vector<std::size_t>{9}), flowdiff::PreconditionError);
}

TEST_CASE("epoch permutations are lawful and seed-keyed") {
  const auto p1 = flowdiff::epoch_permutation(10, 0);
  const auto p2 = flowdiff::epoch_permutation(10, 0);
  const auto p3 = flowdiff::epoch_permutation(10, 1);
  CHECK(p1 == p2);
  CHECK(p1 != p3);
  std::set<std::size_t> seen(p1.begin(), p1.end());
  CHECK(seen.size() == 10);
  CHECK(*seen.begin() == 0);
  CHECK(*seen.rbegin() == 9);
  CHECK(flowdiff::epoch_permutation(0, 5).empty());
}

TEST_CASE("epoch batches cut the permutation with one partial tail") {
  const auto batches = flowdiff::epoch_batches(10, 4, 7);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size() == 4);
  CHECK(batches[1].size() == 4);
  CHECK(batches[2].size() == 2);
  std::vector<std::size_t> flat;
  for (const auto& b : batches) flat.insert(flat.end(), b.begin(), b.end());
  CHECK(flat == flowdiff::epoch_permutation(10, 7));
}

TEST_CASE("a batch stream resumes exactly from (epoch, cursor)") {
  TempDir tmp;
  const auto m = make_noisy_toy_dataset(tmp.path() / "d", 5, 8, 8,
                                        ForwardModel::noise_only(0.2), 3);
  const Dataset ds(m);

  flowdiff::BatchStream a(ds, 2, 99);
  for (int i = 0; i < 4; ++i) (void)a.next();  // crosses an epoch boundary
  const auto epoch = a.epoch();
  const auto cursor = a.cursor();

  flowdiff::BatchStream b(ds, 2, 99);
  b.seek(epoch, cursor);
  for (int i = 0; i < 5; ++i) {
    const auto ba = a.next();
    const auto bb = b.next();
    CHECK(ba.ids == bb.ids);
    REQUIRE(ba.observations.shape() == bb.observations.shape());
    for (std::int64_t k = 0; k < ba.observations.numel(); ++k)
      CHECK(ba.observations[k] == bb.observations[k]);
  }

  // Across one epoch every id appears exactly once.
  flowdiff::BatchStream c(ds, 2, 99);
  std::multiset<std::string> ids;
  int batches = 0;
  const auto epoch0 = c.epoch();
  while (c.epoch() == epoch0) {
    for (const auto& id : c.next().ids) ids.insert(id);
    ++batches;
  }
  CHECK(batches == 3);
  CHECK(ids.size() == 5);
  for (std::size_t i = 0; i < ds.size(); ++i) CHECK(ids.count(ds.id(i)) == 1);
}
