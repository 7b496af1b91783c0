#include "detox/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <map>
#include <sstream>

#include "detox/error.hpp"
#include "detox/image_io.hpp"
#include "detox/util.hpp"
#include "json.hpp"

namespace detox {
namespace {

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(trim(field));
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  fields.push_back(trim(field));
  return fields;
}

int parse_binary(const std::string& text, const char* column, std::size_t row) {
  if (text == "0") return 0;
  if (text == "1") return 1;
  fail(ErrorCode::kBadLabel, "row " + std::to_string(row) + ": " + column + " must be 0 or 1, got '" +
                                 text + "'");
}

}  // namespace

bool DatasetManifest::has_splits() const {
  return !entries.empty() &&
         std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.split.has_value(); });
}

DatasetManifest DatasetManifest::subset(const std::vector<std::size_t>& rows) const {
  DatasetManifest out{root, {}};
  out.entries.reserve(rows.size());
  for (std::size_t r : rows) out.entries.push_back(entries.at(r));
  return out;
}

DatasetManifest DatasetManifest::subset(Split split) const {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split == split) rows.push_back(i);
  }
  return subset(rows);
}

std::string DatasetManifest::hash() const {
  Hasher h;
  h.update(std::filesystem::absolute(root).lexically_normal().string());
  for (const auto& e : entries) {
    h.update(e.filename);
    h.update(std::to_string(e.y) + std::to_string(e.a) +
             (e.split ? (*e.split == Split::kFit ? "f" : "e") : "-"));
  }
  return h.hex();
}

DatasetManifest load_manifest(const std::filesystem::path& csv_path) {
  if (!std::filesystem::exists(csv_path)) {
    fail(ErrorCode::kMissingFile, "manifest not found: " + csv_path.string());
  }
  std::istringstream in(read_text_file(csv_path));
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::kMissingColumn, "manifest has no header");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* required : {"filename", "label", "protected"}) {
    if (!col.contains(required)) {
      fail(ErrorCode::kMissingColumn,
           csv_path.string() + " lacks required column '" + required + "'");
    }
  }
  const bool has_split = col.contains("split");

  DatasetManifest manifest;
  manifest.root = csv_path.parent_path();
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row;
    const auto fields = split_csv_line(line);
    const auto get = [&](const std::string& name) -> const std::string& {
      const std::size_t idx = col.at(name);
      if (idx >= fields.size()) {
        fail(ErrorCode::kMissingColumn, "row " + std::to_string(row) + " has no '" + name + "' field");
      }
      return fields[idx];
    };
    ManifestEntry entry;
    entry.filename = get("filename");
    entry.y = parse_binary(get("label"), "label", row);
    entry.a = parse_binary(get("protected"), "protected", row);
    if (has_split) {
      const std::string& s = get("split");
      if (s == "fit") {
        entry.split = Split::kFit;
      } else if (s == "eval") {
        entry.split = Split::kEval;
      } else if (!s.empty()) {
        fail(ErrorCode::kBadLabel, "row " + std::to_string(row) + ": split must be fit or eval");
      }
    }
    if (!std::filesystem::exists(manifest.root / entry.filename)) {
      fail(ErrorCode::kMissingFile, "row " + std::to_string(row) + ": " +
                                        (manifest.root / entry.filename).string() + " does not exist");
    }
    manifest.entries.push_back(std::move(entry));
  }
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& csv_path) {
  const bool splits = std::any_of(manifest.entries.begin(), manifest.entries.end(),
                                  [](const auto& e) { return e.split.has_value(); });
  std::string text = splits ? "filename,label,protected,split\n" : "filename,label,protected\n";
  for (const auto& e : manifest.entries) {
    text += e.filename + "," + std::to_string(e.y) + "," + std::to_string(e.a);
    if (splits) text += std::string(",") + (e.split ? (*e.split == Split::kFit ? "fit" : "eval") : "");
    text += "\n";
  }
  write_text_file(csv_path, text);
}

LabeledBatch load_rows(const DatasetManifest& manifest, const std::vector<std::size_t>& rows,
                       const std::vector<std::size_t>& input_shape) {
  if (rows.empty()) fail(ErrorCode::kEmptyBatch, "no rows requested");
  const std::size_t c = input_shape.at(0), h = input_shape.at(1), w = input_shape.at(2);
  LabeledBatch batch;
  batch.images = Tensor({rows.size(), c, h, w});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& e = manifest.entries.at(rows[i]);
    const auto path = manifest.root / e.filename;
    Tensor img;
    try {
      img = load_image_tensor(path, c, h, w);
    } catch (const Error& err) {
      if (err.code() == ErrorCode::kMissingFile) throw;
      fail(ErrorCode::kDecodeError, "cannot decode " + path.string() + " (" + err.what() + ")");
    }
    std::memcpy(batch.images.slice(i).data(), img.data(), img.size() * sizeof(double));
    batch.y.push_back(e.y);
    batch.a.push_back(e.a);
  }
  return batch;
}

LabeledBatch load_all(const DatasetManifest& manifest, const std::vector<std::size_t>& input_shape) {
  std::vector<std::size_t> rows(manifest.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return load_rows(manifest, rows, input_shape);
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed) {
  if (batch_size == 0) fail(ErrorCode::kInvalidArgument, "batch size must be at least 1");
  const auto order = permutation(n, seed);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  }
  return out;
}

BatchStream::BatchStream(DatasetManifest manifest, std::size_t batch_size, std::uint64_t seed,
                         std::vector<std::size_t> input_shape)
    : manifest_(std::move(manifest)),
      input_shape_(std::move(input_shape)),
      batches_(epoch_batches(manifest_.size(), batch_size, seed)) {}

std::optional<LabeledBatch> BatchStream::next() {
  if (cursor_ >= batches_.size()) return std::nullopt;
  last_rows_ = batches_[cursor_++];
  return load_rows(manifest_, last_rows_, input_shape_);
}

BatchStream iterate_batches(const DatasetManifest& manifest, std::size_t batch_size,
                            std::uint64_t seed, const std::vector<std::size_t>& input_shape) {
  return BatchStream(manifest, batch_size, seed, input_shape);
}

DatasetManifest make_synthetic_biased(const SyntheticBiasSpec& spec,
                                      const std::filesystem::path& out_dir) {
  if (spec.n < 20) fail(ErrorCode::kInvalidArgument, "synthetic set needs n >= 20");
  if (!(spec.rho >= 0.0 && spec.rho <= 1.0)) {
    fail(ErrorCode::kInvalidArgument, "correlation must lie in [0, 1]");
  }
  if (spec.image_size < 8) fail(ErrorCode::kInvalidArgument, "image size must be >= 8");
  const std::size_t n = spec.n;
  const double size = static_cast<double>(spec.image_size);

  // Exactly floor(n/2) positives and round(rho*n) samples with a == y.
  std::vector<int> y(n, 0);
  for (std::size_t i = 0; i < n / 2; ++i) y[i] = 1;
  Rng label_rng(derive_seed(spec.seed, "labels"));
  label_rng.shuffle(y);
  std::vector<int> a(n);
  const auto agree = static_cast<std::size_t>(std::llround(spec.rho * static_cast<double>(n)));
  const auto order = permutation(n, derive_seed(spec.seed, "attributes"));
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = order[k];
    a[i] = k < agree ? y[i] : 1 - y[i];
  }

  DatasetManifest manifest;
  manifest.root = out_dir;
  std::filesystem::create_directories(out_dir / "images");
  Rng rng(derive_seed(spec.seed, "pixels"));
  constexpr double kTinyShare = 0.3;
  constexpr double kColor[2][3] = {{0.78, 0.38, 0.36}, {0.36, 0.40, 0.78}};
  for (std::size_t i = 0; i < n; ++i) {
    // A fixed share of shapes are a few pixels wide, where circle and square look alike
    // and only colour is left to go on.
    const bool tiny = rng.uniform(0.0, 1.0) < kTinyShare;
    const double radius = tiny ? rng.uniform(1.8, 2.3) : size * rng.uniform(0.14, 0.28);
    const double cx = size * rng.uniform(0.35, 0.65);
    const double cy = size * rng.uniform(0.35, 0.65);
    // Equal-area square so that area carries no label signal.
    const double half_side = radius * std::sqrt(M_PI) / 2.0;
    const double brightness = rng.uniform(-0.08, 0.08);
    const double background = rng.uniform(0.42, 0.58);
    RgbImage img(spec.image_size, spec.image_size);
    for (std::size_t py = 0; py < spec.image_size; ++py) {
      for (std::size_t px = 0; px < spec.image_size; ++px) {
        const double dx = static_cast<double>(px) + 0.5 - cx;
        const double dy = static_cast<double>(py) + 0.5 - cy;
        const bool inside = y[i] == 1 ? dx * dx + dy * dy <= radius * radius
                                      : std::abs(dx) <= half_side && std::abs(dy) <= half_side;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          double v = inside ? kColor[a[i]][ch] + brightness : background;
          v += 0.06 * rng.normal();
          img.at(px, py)[ch] =
              static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        }
      }
    }
    char name[48];
    std::snprintf(name, sizeof(name), "images/img_%05zu.png", i);
    write_png(out_dir / name, img);
    manifest.entries.push_back(ManifestEntry{name, y[i], a[i], std::nullopt});
  }
  save_manifest(manifest, out_dir / "manifest.csv");
  return manifest;
}

std::filesystem::path default_cache_dir(const std::filesystem::path& fallback) {
  if (const char* env = std::getenv("DETOX_CACHE_DIR"); env != nullptr && *env != '\0') {
    return std::filesystem::path(env);
  }
  return fallback;
}

namespace {

constexpr char kCacheMagic[8] = {'D', 'T', 'X', 'A', 'C', 'T', '0', '1'};

void write_cache(const std::filesystem::path& file, const CachedActivations& c,
                 const nlohmann::json& meta) {
  const std::string text = meta.dump();
  const auto& m = c.activations.values;
  std::vector<double> row_major;
  row_major.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index k = 0; k < m.cols(); ++k) row_major.push_back(m(r, k));
  }
  const auto raw = doubles_to_bytes(row_major);
  const std::uint64_t len = text.size();
  std::vector<std::uint8_t> bytes(16 + text.size() + raw.size() + c.y.size() + c.a.size());
  std::memcpy(bytes.data(), kCacheMagic, 8);
  std::memcpy(bytes.data() + 8, &len, 8);
  std::uint8_t* out = bytes.data() + 16;
  out = std::copy(text.begin(), text.end(), out);
  out = std::copy(raw.begin(), raw.end(), out);
  for (int v : c.y) *out++ = static_cast<std::uint8_t>(v);
  for (int v : c.a) *out++ = static_cast<std::uint8_t>(v);
  // Write then rename so a concurrent reader never sees a partial file.
  auto tmp = file;
  tmp += ".tmp";
  write_file_bytes(tmp, bytes);
  std::filesystem::rename(tmp, file);
}

std::optional<CachedActivations> read_cache(const std::filesystem::path& file,
                                            const nlohmann::json& expect) {
  if (!std::filesystem::exists(file)) return std::nullopt;
  const auto bytes = read_file_bytes(file);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCacheMagic, 8) != 0) return std::nullopt;
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 8);
  if (16 + len > bytes.size()) return std::nullopt;
  const auto meta = nlohmann::json::parse(bytes.begin() + 16,
                                          bytes.begin() + static_cast<std::ptrdiff_t>(16 + len),
                                          nullptr, false);
  if (meta.is_discarded() || meta != expect) return std::nullopt;
  const std::size_t n = meta.at("n"), d = meta.at("dim");
  const std::size_t body = 16 + len;
  if (bytes.size() != body + n * d * 8 + 2 * n) return std::nullopt;
  const auto values = bytes_to_doubles(
      std::span<const std::uint8_t>(bytes).subspan(body, n * d * 8));
  CachedActivations out;
  out.activations.layer = LayerId{meta.at("layer"), d};
  out.activations.values = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                           Eigen::RowMajor>>(
      values.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const std::size_t labels = body + n * d * 8;
  for (std::size_t i = 0; i < n; ++i) {
    out.y.push_back(bytes[labels + i]);
    out.a.push_back(bytes[labels + n + i]);
  }
  out.cache_hit = true;
  out.file = file;
  return out;
}

}  // namespace

CachedActivations cache_activations(const Model& model, const DatasetManifest& manifest,
                                    const LayerId& layer,
                                    const std::filesystem::path& cache_dir) {
  const LayerId resolved = model.layer(layer.name);
  if (manifest.entries.empty()) fail(ErrorCode::kEmptyBatch, "manifest has no entries");
  const std::string fingerprint = model.fingerprint();
  const std::string manifest_hash = manifest.hash();
  const std::string key =
      sha256_hex(fingerprint + "|" + resolved.name + "|" + manifest_hash).substr(0, 32);
  const auto file = cache_dir / "activations" / (key + ".bin");
  const nlohmann::json meta = {{"n", manifest.size()},
                               {"dim", resolved.dim},
                               {"layer", resolved.name},
                               {"model_fingerprint", fingerprint},
                               {"manifest_hash", manifest_hash}};
  if (auto hit = read_cache(file, meta)) return std::move(*hit);

  CachedActivations out;
  out.activations.layer = resolved;
  out.activations.values.resize(static_cast<Eigen::Index>(manifest.size()),
                                static_cast<Eigen::Index>(resolved.dim));
  constexpr std::size_t kBatch = 64;
  for (std::size_t start = 0; start < manifest.size(); start += kBatch) {
    std::vector<std::size_t> rows;
    for (std::size_t i = start; i < std::min(manifest.size(), start + kBatch); ++i) rows.push_back(i);
    const auto batch = load_rows(manifest, rows, model.input_shape());
    const auto act = model.capture_activations(batch, resolved);
    out.activations.values.middleRows(static_cast<Eigen::Index>(start),
                                      static_cast<Eigen::Index>(rows.size())) = act.values;
    out.y.insert(out.y.end(), batch.y.begin(), batch.y.end());
    out.a.insert(out.a.end(), batch.a.begin(), batch.a.end());
  }
  out.file = file;
  write_cache(file, out, meta);
  return out;
}

}  // namespace detox
