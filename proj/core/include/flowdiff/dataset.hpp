#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowdiff/forward_model.hpp"
#include "flowdiff/tensor.hpp"

namespace flowdiff {

struct ManifestEntry {
  std::string id;
  std::string observation_path;  // relative to the manifest's directory
  std::optional<std::string> reference_path;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::string forward_model_id;
  std::uint64_t corruption_seed = 0;
  std::filesystem::path base_dir;  // directory of the manifest file

  std::filesystem::path observation_file(std::size_t i) const;
  std::optional<std::filesystem::path> reference_file(std::size_t i) const;
};

// Reads manifest.json; checks id uniqueness and that every referenced file
// exists.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// Corrupts every image of clean_dir (sorted PGM/PPM files, one common
// shape) exactly once with a per-image stream keyed by (seed, id), clamps
// to [0,1], and materializes 8-bit observations plus reference copies under
// out_dir. Rerunning with identical inputs reproduces identical bytes.
DatasetManifest build_corrupted_dataset(const std::filesystem::path& clean_dir,
                                        const std::filesystem::path& out_dir,
                                        const ForwardModel& fm, const std::string& fm_id,
                                        std::uint64_t seed);

struct ImageBatch {
  Tensor observations;              // (B, C, H, W)
  std::optional<Tensor> references; // present when every entry has one
  std::vector<std::string> ids;
};

// In-memory dataset; all images are loaded eagerly (toy scale).
class Dataset {
 public:
  explicit Dataset(const DatasetManifest& manifest);

  std::size_t size() const { return ids_.size(); }
  bool has_references() const { return has_refs_; }
  const std::vector<std::int64_t>& image_shape() const { return shape_; }  // (C, H, W)
  const std::string& id(std::size_t i) const { return ids_[i]; }
  const Tensor& observation(std::size_t i) const { return observations_[i]; }
  const Tensor& reference(std::size_t i) const;

  ImageBatch make_batch(std::span<const std::size_t> idxs) const;

 private:
  std::vector<std::string> ids_;
  std::vector<Tensor> observations_;
  std::vector<Tensor> references_;
  std::vector<std::int64_t> shape_;
  bool has_refs_ = false;
};

// Seeded permutation of [0, n); the shuffle consumes only the given stream.
std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t epoch_seed);

// One epoch's batch index groups: a seeded permutation cut into batch_size
// pieces, the last piece possibly partial.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::int64_t batch_size,
                                                    std::uint64_t epoch_seed);

// Stateful epoch-spanning batch cursor. Epoch e uses the seed derived from
// (base_seed, e), so any position is reproducible from (base_seed, epoch,
// cursor) alone.
class BatchStream {
 public:
  BatchStream(const Dataset& dataset, std::int64_t batch_size, std::uint64_t base_seed);

  ImageBatch next();
  std::uint64_t epoch() const { return epoch_; }
  std::size_t cursor() const { return cursor_; }
  void seek(std::uint64_t epoch, std::size_t cursor);

 private:
  void reshuffle();

  const Dataset& dataset_;
  std::int64_t batch_size_;
  std::uint64_t base_seed_;
  std::uint64_t epoch_ = 0;
  std::size_t cursor_ = 0;  // position within the epoch permutation
  std::vector<std::size_t> order_;
};

}  // namespace flowdiff
