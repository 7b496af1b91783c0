#include <cstring>

#include "detox/error.hpp"
#include "detox/model.hpp"
#include "detox/util.hpp"
#include "json.hpp"

namespace detox {
namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'D', 'T', 'X', 'M', 'O', 'D', 'E', 'L'};
constexpr int kFormatVersion = 1;

json op_to_json(const Op& op) {
  json j;
  j["type"] = op_name(op);
  if (const auto* c = std::get_if<Conv2d>(&op)) {
    j["in"] = c->in_channels;
    j["out"] = c->out_channels;
    j["kernel"] = c->kernel;
    j["padding"] = c->padding;
  } else if (const auto* l = std::get_if<Linear>(&op)) {
    j["in"] = l->in_features;
    j["out"] = l->out_features;
  } else if (const auto* p = std::get_if<MaxPool2d>(&op)) {
    j["size"] = p->size;
  } else if (const auto* p = std::get_if<AvgPool2d>(&op)) {
    j["size"] = p->size;
  }
  return j;
}

Op op_from_json(const json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "conv2d") {
    Conv2d c;
    c.in_channels = j.at("in");
    c.out_channels = j.at("out");
    c.kernel = j.at("kernel");
    c.padding = j.at("padding");
    c.weight = Tensor({c.out_channels, c.in_channels, c.kernel, c.kernel});
    c.bias = Tensor({c.out_channels});
    return c;
  }
  if (type == "linear") {
    Linear l;
    l.in_features = j.at("in");
    l.out_features = j.at("out");
    l.weight = Tensor({l.out_features, l.in_features});
    l.bias = Tensor({l.out_features});
    return l;
  }
  if (type == "relu") return Relu{};
  if (type == "tanh") return Tanh{};
  if (type == "maxpool2d") return MaxPool2d{j.at("size").get<std::size_t>()};
  if (type == "avgpool2d") return AvgPool2d{j.at("size").get<std::size_t>()};
  if (type == "global_avgpool") return GlobalAvgPool{};
  if (type == "flatten") return Flatten{};
  fail(ErrorCode::kUnsupportedArchitecture, "checkpoint contains unknown op '" + type + "'");
}

}  // namespace

void save_model(const Model& model, const std::filesystem::path& path) {
  json header;
  header["format"] = kFormatVersion;
  header["arch"] = model.arch();
  header["input_shape"] = model.input_shape();
  std::vector<double> payload;
  for (const auto& block : model.blocks()) {
    json jb;
    jb["name"] = block.name;
    jb["ops"] = json::array();
    for (const auto& op : block.ops) jb["ops"].push_back(op_to_json(op));
    header["blocks"].push_back(jb);
  }
  for (const auto& p : model.parameters()) {
    payload.insert(payload.end(), p.tensor->values().begin(), p.tensor->values().end());
  }
  header["edits"] = json::array();
  for (const auto& e : model.edits()) {
    header["edits"].push_back(
        {{"layer", e.layer.name}, {"dim", e.layer.dim}, {"kind", eraser_kind_name(e.kind)}});
    for (Eigen::Index r = 0; r < e.matrix.rows(); ++r) {
      for (Eigen::Index c = 0; c < e.matrix.cols(); ++c) payload.push_back(e.matrix(r, c));
    }
    for (Eigen::Index i = 0; i < e.bias.size(); ++i) payload.push_back(e.bias(i));
  }
  header["payload_doubles"] = payload.size();

  const std::string text = header.dump();
  std::vector<std::uint8_t> bytes(kMagic, kMagic + sizeof(kMagic));
  const std::uint64_t len = text.size();
  const auto* len_bytes = reinterpret_cast<const std::uint8_t*>(&len);
  bytes.insert(bytes.end(), len_bytes, len_bytes + sizeof(len));
  bytes.insert(bytes.end(), text.begin(), text.end());
  const auto raw = doubles_to_bytes(payload);
  bytes.insert(bytes.end(), raw.begin(), raw.end());
  write_file_bytes(path, bytes);
}

Model load_model(const std::filesystem::path& path, std::string_view arch_id) {
  if (!std::filesystem::exists(path)) {
    fail(ErrorCode::kMissingFile, "no checkpoint at " + path.string());
  }
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < sizeof(kMagic) + 8 ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    fail(ErrorCode::kDecodeError, path.string() + " is not a model checkpoint");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof(kMagic), sizeof(len));
  const std::size_t header_end = sizeof(kMagic) + 8 + len;
  if (header_end > bytes.size()) fail(ErrorCode::kDecodeError, "truncated checkpoint header");
  json header;
  try {
    header = json::parse(bytes.begin() + sizeof(kMagic) + 8, bytes.begin() + header_end);
  } catch (const json::exception& e) {
    fail(ErrorCode::kDecodeError, "checkpoint header: " + std::string(e.what()));
  }
  if (header.value("format", 0) != kFormatVersion) {
    fail(ErrorCode::kDecodeError, "unsupported checkpoint format version");
  }
  const std::string arch = header.at("arch");
  if (arch != arch_id) {
    fail(ErrorCode::kUnsupportedArchitecture,
         "checkpoint holds '" + arch + "' but '" + std::string(arch_id) + "' was requested");
  }
  const auto payload = bytes_to_doubles(
      std::span<const std::uint8_t>(bytes).subspan(header_end));
  if (payload.size() != header.at("payload_doubles").get<std::size_t>()) {
    fail(ErrorCode::kDecodeError, "checkpoint payload size mismatch");
  }

  std::vector<Block> blocks;
  for (const auto& jb : header.at("blocks")) {
    Block b{jb.at("name"), {}};
    for (const auto& jo : jb.at("ops")) b.ops.push_back(op_from_json(jo));
    blocks.push_back(std::move(b));
  }
  std::size_t at = 0;
  auto take = [&](std::span<double> dst) {
    if (at + dst.size() > payload.size()) fail(ErrorCode::kDecodeError, "payload too short");
    std::copy_n(payload.begin() + static_cast<std::ptrdiff_t>(at), dst.size(), dst.begin());
    at += dst.size();
  };
  for (auto& block : blocks) {
    for (auto& op : block.ops) {
      if (auto* c = std::get_if<Conv2d>(&op)) {
        take(c->weight.values());
        take(c->bias.values());
      } else if (auto* l = std::get_if<Linear>(&op)) {
        take(l->weight.values());
        take(l->bias.values());
      }
    }
  }
  Model model(arch, header.at("input_shape").get<std::vector<std::size_t>>(), std::move(blocks));
  for (const auto& je : header.at("edits")) {
    AffineEraser e;
    e.layer = LayerId{je.at("layer"), je.at("dim")};
    e.kind = parse_eraser_kind(je.at("kind").get<std::string>());
    const auto d = static_cast<Eigen::Index>(e.layer.dim);
    std::vector<double> row_major(static_cast<std::size_t>(d * d));
    take(row_major);
    e.matrix = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        row_major.data(), d, d);
    e.bias = Eigen::VectorXd(d);
    take(std::span<double>(e.bias.data(), static_cast<std::size_t>(d)));
    model = model.install_eraser(e);
  }
  if (at != payload.size()) fail(ErrorCode::kDecodeError, "trailing checkpoint payload");
  return model;
}

}  // namespace detox
