#include "otfuse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace otfuse::model {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

using nlohmann::json;

json arch_to_json(const ArchConfig &arch) {
  return json{{"hidden_dim", arch.hidden_dim},
              {"intermediate_dim", arch.intermediate_dim},
              {"num_layers", arch.num_layers},
              {"num_heads", arch.num_heads},
              {"grid_side", arch.grid_side},
              {"patch_dim", arch.patch_dim},
              {"num_classes", arch.num_classes},
              {"eps_ln", arch.eps_ln}};
}

ArchConfig arch_from_json(const json &j) {
  ArchConfig a;
  a.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  a.intermediate_dim = j.at("intermediate_dim").get<std::size_t>();
  a.num_layers = j.at("num_layers").get<std::size_t>();
  a.num_heads = j.at("num_heads").get<std::size_t>();
  a.grid_side = j.at("grid_side").get<std::size_t>();
  a.patch_dim = j.at("patch_dim").get<std::size_t>();
  a.num_classes = j.at("num_classes").get<std::size_t>();
  a.eps_ln = j.at("eps_ln").get<float>();
  return a;
}

namespace {

template <typename T> void put(std::string &out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T> T get(const std::string &in, std::size_t at) {
  T v;
  std::memcpy(&v, in.data() + at, sizeof(T));
  return v;
}

} // namespace

std::string encode_checkpoint(const TransformerParams &params,
                              const ArchConfig &arch) {
  check_params(params, arch);
  json dir = json::array();
  std::size_t offset = 0;
  params.visit([&](const std::string &name, const Tensor &t) {
    dir.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * sizeof(float);
  });
  json header{{"arch", arch_to_json(arch)},
              {"tensors", dir},
              {"payload_bytes", offset}};
  const std::string text = header.dump(1);

  std::string out;
  out.append(kCheckpointMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  params.visit([&](const std::string &, const Tensor &t) {
    out.append(reinterpret_cast<const char *>(t.data().data()),
               t.size() * sizeof(float));
  });
  return out;
}

std::pair<TransformerParams, ArchConfig>
decode_checkpoint(const std::string &bytes) {
  constexpr std::size_t kPrefix = 4 + 4 + 8;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw Error(ErrorKind::BadMagic, "bad magic: not an OTFZ checkpoint");
  if (bytes.size() < kPrefix)
    throw Error(ErrorKind::Truncated, "truncated header");
  const auto version = get<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion)
    throw Error(ErrorKind::UnknownVersion,
                "unknown checkpoint version " + std::to_string(version));
  const auto header_len = get<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - kPrefix)
    throw Error(ErrorKind::Truncated, "truncated header");

  json header;
  ArchConfig arch;
  try {
    header = json::parse(bytes.substr(kPrefix, header_len));
    arch = arch_from_json(header.at("arch"));
    arch.validate();
  } catch (const json::exception &e) {
    throw Error(ErrorKind::Inconsistent,
                std::string("malformed checkpoint header: ") + e.what());
  } catch (const Error &e) {
    throw Error(ErrorKind::Inconsistent, e.what());
  }

  const std::size_t payload_at = kPrefix + header_len;
  const std::size_t payload_len = bytes.size() - payload_at;
  TransformerParams params = zeros_like(arch);
  std::size_t expected_bytes = 0;
  try {
    const json &dir = header.at("tensors");
    std::size_t idx = 0, next_offset = 0;
    std::size_t count = 0;
    params.visit([&](const std::string &, const Tensor &) { ++count; });
    if (dir.size() != count)
      throw Error(ErrorKind::Inconsistent,
                  "directory lists " + std::to_string(dir.size()) +
                      " tensors, architecture needs " + std::to_string(count));
    params.visit([&](const std::string &name, Tensor &t) {
      const json &entry = dir.at(idx++);
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      if (entry.at("name").get<std::string>() != name || shape != t.shape())
        throw Error(ErrorKind::Inconsistent,
                    "directory entry " + entry.at("name").get<std::string>() +
                        " " + shape_str(shape) + " does not match " + name +
                        " " + shape_str(t.shape()));
      if (offset != next_offset)
        throw Error(ErrorKind::Inconsistent,
                    "tensor " + name + " offset overlaps or leaves a gap");
      next_offset += t.size() * sizeof(float);
    });
    expected_bytes = next_offset;
    if (header.at("payload_bytes").get<std::size_t>() != expected_bytes)
      throw Error(ErrorKind::Inconsistent,
                  "payload_bytes disagrees with the tensor directory");
  } catch (const json::exception &e) {
    throw Error(ErrorKind::Inconsistent,
                std::string("malformed tensor directory: ") + e.what());
  }

  if (payload_len < expected_bytes)
    throw Error(ErrorKind::Truncated,
                "truncated payload: " + std::to_string(payload_len) +
                    " of " + std::to_string(expected_bytes) + " bytes");
  if (payload_len > expected_bytes)
    throw Error(ErrorKind::Inconsistent, "trailing bytes after payload");

  std::size_t at = payload_at;
  params.visit([&](const std::string &, Tensor &t) {
    std::memcpy(t.data().data(), bytes.data() + at, t.size() * sizeof(float));
    at += t.size() * sizeof(float);
  });
  return {std::move(params), arch};
}

void save_checkpoint(const TransformerParams &params, const ArchConfig &arch,
                     const std::string &path) {
  const std::string bytes = encode_checkpoint(params, arch);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw Error(ErrorKind::Io, "cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out)
    throw Error(ErrorKind::Io, "failed writing " + path);
}

std::pair<TransformerParams, ArchConfig>
load_checkpoint(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error(ErrorKind::Io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

} // namespace otfuse::model
