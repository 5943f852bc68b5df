#include "tridet/checkpoint.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <stdexcept>

namespace tridet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json config_to_json(const DetectorConfig& c) {
  return json{{"image_size", c.image_size},
              {"conv1", c.conv1},
              {"conv2", c.conv2},
              {"conv3", c.conv3},
              {"rpn_channels", c.rpn_channels},
              {"fc", c.fc},
              {"pool", c.pool},
              {"anchor_sides", c.anchor_sides},
              {"num_proposals", c.num_proposals},
              {"proposal_nms", c.proposal_nms},
              {"min_proposal_side", c.min_proposal_side},
              {"rpn_pos_iou", c.rpn_pos_iou},
              {"rpn_neg_iou", c.rpn_neg_iou},
              {"rpn_batch", c.rpn_batch},
              {"rpn_pos_fraction", c.rpn_pos_fraction},
              {"rcnn_pos_iou", c.rcnn_pos_iou},
              {"rcnn_batch", c.rcnn_batch},
              {"rcnn_pos_fraction", c.rcnn_pos_fraction}};
}

DetectorConfig config_from_json(const json& j) {
  DetectorConfig c;
  j.at("image_size").get_to(c.image_size);
  j.at("conv1").get_to(c.conv1);
  j.at("conv2").get_to(c.conv2);
  j.at("conv3").get_to(c.conv3);
  j.at("rpn_channels").get_to(c.rpn_channels);
  j.at("fc").get_to(c.fc);
  j.at("pool").get_to(c.pool);
  j.at("anchor_sides").get_to(c.anchor_sides);
  j.at("num_proposals").get_to(c.num_proposals);
  j.at("proposal_nms").get_to(c.proposal_nms);
  j.at("min_proposal_side").get_to(c.min_proposal_side);
  j.at("rpn_pos_iou").get_to(c.rpn_pos_iou);
  j.at("rpn_neg_iou").get_to(c.rpn_neg_iou);
  j.at("rpn_batch").get_to(c.rpn_batch);
  j.at("rpn_pos_fraction").get_to(c.rpn_pos_fraction);
  j.at("rcnn_pos_iou").get_to(c.rcnn_pos_iou);
  j.at("rcnn_batch").get_to(c.rcnn_batch);
  j.at("rcnn_pos_fraction").get_to(c.rcnn_pos_fraction);
  return c;
}

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t r = 0;
  for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
  return r;
}

std::string manifest_text(const DetectorModel& model) {
  json tensors = json::array();
  std::size_t offset = 0;
  for (const auto& p : model.params) {
    tensors.push_back(
        {{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}, {"count", p.value.numel()}});
    offset += p.value.numel();
  }
  json m{{"format", "tridet-checkpoint"},
         {"version", 1},
         {"dtype", "float64-le"},
         {"num_classes", model.num_classes},
         {"seed", model.seed},
         {"config", config_to_json(model.config)},
         {"tensors", tensors}};
  return m.dump(2) + "\n";
}

std::string param_bytes(const DetectorModel& model) {
  std::string out;
  for (const auto& p : model.params)
    for (double v : p.value.data()) {
      const std::uint64_t le = to_le(std::bit_cast<std::uint64_t>(v));
      char buf[8];
      std::memcpy(buf, &le, 8);
      out.append(buf, 8);
    }
  return out;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

void save_checkpoint(const DetectorModel& model, const fs::path& dir) {
  validate_model(model);
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    out << manifest_text(model);
    if (!out) throw std::runtime_error("failed writing " + (dir / "manifest.json").string());
  }
  std::ofstream out(dir / "params.bin", std::ios::binary);
  const std::string bytes = param_bytes(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + (dir / "params.bin").string());
}

DetectorModel load_checkpoint(const fs::path& dir) {
  json m;
  try {
    m = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw std::runtime_error((dir / "manifest.json").string() + ": " + e.what());
  }
  if (m.value("format", "") != "tridet-checkpoint")
    throw std::runtime_error((dir / "manifest.json").string() + ": not a checkpoint manifest");
  const std::string bytes = read_file(dir / "params.bin");

  DetectorModel model;
  model.config = config_from_json(m.at("config"));
  model.num_classes = m.at("num_classes").get<int>();
  model.seed = m.at("seed").get<std::uint64_t>();
  for (const auto& t : m.at("tensors")) {
    const auto shape = t.at("shape").get<Shape>();
    const auto offset = t.at("offset").get<std::size_t>();
    const auto count = t.at("count").get<std::size_t>();
    if (shape_numel(shape) != count || (offset + count) * 8 > bytes.size())
      throw std::runtime_error((dir / "params.bin").string() + ": tensor " +
                               t.at("name").get<std::string>() + " out of range");
    std::vector<double> data(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t le;
      std::memcpy(&le, bytes.data() + (offset + i) * 8, 8);
      data[i] = std::bit_cast<double>(to_le(le));
    }
    model.params.push_back({t.at("name").get<std::string>(), Tensor(shape, std::move(data))});
  }
  validate_model(model);
  return model;
}

std::string model_hash(const DetectorModel& model) {
  return sha256_hex(manifest_text(model) + param_bytes(model));
}

std::string checkpoint_hash(const fs::path& dir) {
  return sha256_hex(read_file(dir / "manifest.json") + read_file(dir / "params.bin"));
}

}  // namespace tridet
