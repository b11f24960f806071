#include "flowdiff/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "flowdiff/errors.hpp"
#include "flowdiff/image_io.hpp"
#include "flowdiff/rng.hpp"

namespace flowdiff {

namespace fs = std::filesystem;
using nlohmann::json;

std::filesystem::path DatasetManifest::observation_file(std::size_t i) const {
  return base_dir / entries.at(i).observation_path;
}

std::optional<std::filesystem::path> DatasetManifest::reference_file(std::size_t i) const {
  const auto& e = entries.at(i);
  if (!e.reference_path) return std::nullopt;
  return base_dir / *e.reference_path;
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }

  DatasetManifest m;
  m.base_dir = path.parent_path();
  try {
    m.forward_model_id = j.at("forward_model_id").get<std::string>();
    m.corruption_seed = j.at("corruption_seed").get<std::uint64_t>();
    for (const auto& je : j.at("entries")) {
      ManifestEntry e;
      e.id = je.at("id").get<std::string>();
      e.observation_path = je.at("observation").get<std::string>();
      if (je.contains("reference") && !je.at("reference").is_null())
        e.reference_path = je.at("reference").get<std::string>();
      m.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw FormatError("manifest " + path.string() + ": " + e.what());
  }

  std::set<std::string> seen;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    if (!seen.insert(e.id).second)
      throw FormatError("manifest " + path.string() + ": duplicate id '" + e.id + "'");
    if (!fs::exists(m.observation_file(i)))
      throw IoError("manifest " + path.string() + ": missing observation file for id '" + e.id +
                    "': " + m.observation_file(i).string());
    if (auto r = m.reference_file(i); r && !fs::exists(*r))
      throw IoError("manifest " + path.string() + ": missing reference file for id '" + e.id +
                    "': " + r->string());
  }
  return m;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  json j;
  j["forward_model_id"] = manifest.forward_model_id;
  j["corruption_seed"] = manifest.corruption_seed;
  json entries = json::array();
  for (const auto& e : manifest.entries) {
    json je;
    je["id"] = e.id;
    je["observation"] = e.observation_path;
    if (e.reference_path) je["reference"] = *e.reference_path;
    entries.push_back(std::move(je));
  }
  j["entries"] = std::move(entries);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing manifest: " + path.string());
}

DatasetManifest build_corrupted_dataset(const fs::path& clean_dir, const fs::path& out_dir,
                                        const ForwardModel& fm, const std::string& fm_id,
                                        std::uint64_t seed) {
  ForwardModel model = fm;
  model.validate();
  if (!fs::is_directory(clean_dir))
    throw IoError("clean image directory does not exist: " + clean_dir.string());

  std::vector<fs::path> files;
  for (const auto& de : fs::directory_iterator(clean_dir)) {
    if (!de.is_regular_file()) continue;
    auto ext = de.path().extension().string();
    if (ext == ".pgm" || ext == ".ppm") files.push_back(de.path());
  }
  if (files.empty()) throw IoError("no .pgm/.ppm files in " + clean_dir.string());
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });

  fs::create_directories(out_dir / "obs");
  fs::create_directories(out_dir / "ref");

  DatasetManifest m;
  m.forward_model_id = fm_id;
  m.corruption_seed = seed;
  m.base_dir = out_dir;

  std::vector<std::int64_t> common_shape;
  std::vector<std::string> bad_ids;
  struct Loaded {
    std::string id;
    Tensor image;
  };
  std::vector<Loaded> loaded;
  for (const auto& f : files) {
    Tensor img = load_image(f);
    std::string id = f.stem().string();
    if (common_shape.empty()) common_shape = img.shape();
    if (img.shape() != common_shape) bad_ids.push_back(id);
    loaded.push_back({std::move(id), std::move(img)});
  }
  if (!bad_ids.empty()) {
    std::ostringstream oss;
    oss << "clean images disagree on shape (expected "
        << Tensor::zeros(common_shape).shape_str() << "); offending ids:";
    for (const auto& id : bad_ids) oss << ' ' << id;
    throw ShapeError(oss.str());
  }

  for (const auto& item : loaded) {
    RngStream rng(seed, fnv1a(item.id));
    Tensor x = item.image.reshaped({1, common_shape[0], common_shape[1], common_shape[2]});
    Tensor y = observe(model, x, rng);
    // Observations are materialized as 8-bit files; values outside [0,1]
    // clamp here, once, so the stored dataset is the ground truth downstream.
    for (auto& v : y.vec())
      v = std::clamp(v, 0.0, 1.0);
    Tensor y_img = y.reshaped(common_shape);

    ManifestEntry e;
    e.id = item.id;
    e.observation_path = "obs/" + item.id + (common_shape[0] == 3 ? ".ppm" : ".pgm");
    e.reference_path = "ref/" + item.id + (common_shape[0] == 3 ? ".ppm" : ".pgm");
    save_image(y_img, out_dir / e.observation_path);
    save_image(item.image, out_dir / *e.reference_path);
    m.entries.push_back(std::move(e));
  }

  save_manifest(m, out_dir / "manifest.json");
  return m;
}

Dataset::Dataset(const DatasetManifest& manifest) {
  // An empty manifest is a valid (if degenerate) dataset; batch iteration
  // rejects it, reconstruction loops simply do nothing.
  has_refs_ = !manifest.entries.empty();
  std::vector<std::string> bad_ids;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& e = manifest.entries[i];
    Tensor obs = load_image(manifest.observation_file(i));
    if (shape_.empty()) shape_ = obs.shape();
    if (obs.shape() != shape_) bad_ids.push_back(e.id);
    ids_.push_back(e.id);
    observations_.push_back(std::move(obs));
    if (auto r = manifest.reference_file(i)) {
      Tensor ref = load_image(*r);
      if (ref.shape() != shape_) bad_ids.push_back(e.id);
      references_.push_back(std::move(ref));
    } else {
      has_refs_ = false;
    }
  }
  if (!bad_ids.empty()) {
    std::ostringstream oss;
    oss << "dataset images disagree on shape; offending ids:";
    for (const auto& id : bad_ids) oss << ' ' << id;
    throw ShapeError(oss.str());
  }
  if (!has_refs_) references_.clear();
}

const Tensor& Dataset::reference(std::size_t i) const {
  if (!has_refs_) throw PreconditionError("dataset has no reference images");
  return references_.at(i);
}

ImageBatch Dataset::make_batch(std::span<const std::size_t> idxs) const {
  if (idxs.empty()) throw PreconditionError("empty batch");
  const std::int64_t b = static_cast<std::int64_t>(idxs.size());
  ImageBatch batch;
  batch.observations = Tensor::zeros({b, shape_[0], shape_[1], shape_[2]});
  if (has_refs_) batch.references = Tensor::zeros({b, shape_[0], shape_[1], shape_[2]});
  const std::int64_t stride = shape_[0] * shape_[1] * shape_[2];
  for (std::int64_t k = 0; k < b; ++k) {
    const std::size_t i = idxs[static_cast<std::size_t>(k)];
    if (i >= size()) throw PreconditionError("batch index out of range");
    std::copy(observations_[i].vec().begin(), observations_[i].vec().end(),
              batch.observations.vec().begin() + k * stride);
    if (has_refs_)
      std::copy(references_[i].vec().begin(), references_[i].vec().end(),
                batch.references->vec().begin() + k * stride);
    batch.ids.push_back(ids_[i]);
  }
  return batch;
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t epoch_seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  RngStream rng(epoch_seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::uint64_t j = rng.next_index(i);
    std::swap(order[i - 1], order[static_cast<std::size_t>(j)]);
  }
  return order;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::int64_t batch_size,
                                                    std::uint64_t epoch_seed) {
  if (batch_size < 1) throw PreconditionError("batch_size must be >= 1");
  auto order = epoch_permutation(n, epoch_seed);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

BatchStream::BatchStream(const Dataset& dataset, std::int64_t batch_size, std::uint64_t base_seed)
    : dataset_(dataset), batch_size_(batch_size), base_seed_(base_seed) {
  if (batch_size_ < 1) throw PreconditionError("batch_size must be >= 1");
  if (dataset_.size() == 0) throw PreconditionError("cannot iterate an empty dataset");
  reshuffle();
}

void BatchStream::reshuffle() {
  // Epoch seed derived from (base_seed, epoch) so seek() is stateless.
  const std::uint64_t epoch_seed = RngStream(base_seed_, epoch_).next_u64();
  order_ = epoch_permutation(dataset_.size(), epoch_seed);
}

ImageBatch BatchStream::next() {
  if (cursor_ >= order_.size()) {
    ++epoch_;
    cursor_ = 0;
    reshuffle();
  }
  const std::size_t end = std::min(order_.size(), cursor_ + static_cast<std::size_t>(batch_size_));
  std::span<const std::size_t> idxs(order_.data() + cursor_, end - cursor_);
  cursor_ = end;
  return dataset_.make_batch(idxs);
}

void BatchStream::seek(std::uint64_t epoch, std::size_t cursor) {
  epoch_ = epoch;
  reshuffle();
  if (cursor > order_.size()) throw PreconditionError("batch cursor out of range");
  cursor_ = cursor;
}

}  // namespace flowdiff
