#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "detox/model.hpp"
#include "detox/types.hpp"

namespace detox {

enum class Split { kFit, kEval };

struct ManifestEntry {
  std::string filename;  // relative to the manifest root
  int y = 0;
  int a = 0;
  std::optional<Split> split;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;

  std::size_t size() const noexcept { return entries.size(); }
  bool has_splits() const;
  DatasetManifest subset(const std::vector<std::size_t>& rows) const;
  DatasetManifest subset(Split split) const;
  // Content hash over root and entries; keys the activation cache.
  std::string hash() const;
};

// CSV with header `filename,label,protected[,split]`.
DatasetManifest load_manifest(const std::filesystem::path& csv_path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& csv_path);

// Decodes the given rows (in the given order) at the model's input shape.
LabeledBatch load_rows(const DatasetManifest& manifest, const std::vector<std::size_t>& rows,
                       const std::vector<std::size_t>& input_shape);
LabeledBatch load_all(const DatasetManifest& manifest,
                      const std::vector<std::size_t>& input_shape);

// Index partition of one epoch: a seeded permutation cut into batches, the
// final batch possibly short.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed);

class BatchStream {
 public:
  BatchStream(DatasetManifest manifest, std::size_t batch_size, std::uint64_t seed,
              std::vector<std::size_t> input_shape);

  std::optional<LabeledBatch> next();
  // Manifest rows of the batch most recently returned by next().
  const std::vector<std::size_t>& last_rows() const noexcept { return last_rows_; }
  std::size_t batch_count() const noexcept { return batches_.size(); }

 private:
  DatasetManifest manifest_;
  std::vector<std::size_t> input_shape_;
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> last_rows_;
};

BatchStream iterate_batches(const DatasetManifest& manifest, std::size_t batch_size,
                            std::uint64_t seed, const std::vector<std::size_t>& input_shape);

// Shape encodes the label (square = 0, circle = 1); the fill colour's
// dominant channel encodes the protected attribute (red = 0, blue = 1).
struct SyntheticBiasSpec {
  std::size_t n = 1000;
  double rho = 0.9;  // fraction of samples with a == y
  std::size_t image_size = 32;
  std::uint64_t seed = 0;
};

// Writes `<out_dir>/images/*.png` and `<out_dir>/manifest.csv`.
DatasetManifest make_synthetic_biased(const SyntheticBiasSpec& spec,
                                      const std::filesystem::path& out_dir);

struct CachedActivations {
  ActivationMatrix activations;
  std::vector<int> y;
  std::vector<int> a;
  bool cache_hit = false;
  std::filesystem::path file;
};

// `DETOX_CACHE_DIR` when set, else `fallback`.
std::filesystem::path default_cache_dir(const std::filesystem::path& fallback);

CachedActivations cache_activations(const Model& model, const DatasetManifest& manifest,
                                    const LayerId& layer,
                                    const std::filesystem::path& cache_dir);

}  // namespace detox
