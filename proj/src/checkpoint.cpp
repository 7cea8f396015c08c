#include "offkd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <type_traits>

#include "json.hpp"
#include "offkd/error.hpp"
#include "offkd/tsv.hpp"

namespace offkd {
namespace {

using nlohmann::json;

template <typename T>
constexpr const char* dtype_name() {
  return std::is_same_v<T, float> ? "f32" : "f64";
}

void put_le(std::vector<std::uint8_t>& out, std::uint64_t value, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

std::uint64_t get_le(std::span<const std::uint8_t> in, std::size_t offset, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(in[offset + i]) << (8 * i);
  return v;
}

template <typename T>
void put_values(std::vector<std::uint8_t>& out, const std::vector<T>& values) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (T v : values) put_le(out, std::bit_cast<Bits>(v), sizeof(T));
}

json config_json(const EncoderConfig& c) {
  json heads = json::object();
  for (const auto& [task, classes] : c.task_classes) heads[std::string(task_name(task))] = classes;
  return json{{"layers", c.layers},         {"hidden", c.hidden},   {"heads", c.heads},
              {"ffn", c.ffn},               {"vocab_size", c.vocab_size},
              {"max_len", c.max_len},       {"task_classes", heads}, {"dropout", c.dropout},
              {"tie_mlm", c.tie_mlm}};
}

EncoderConfig config_from(const json& j) {
  EncoderConfig c;
  c.layers = j.at("layers").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ffn = j.at("ffn").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.tie_mlm = j.at("tie_mlm").get<bool>();
  c.task_classes.clear();
  for (const auto& [name, classes] : j.at("task_classes").items()) {
    const auto task = parse_task(name);
    if (!task) throw CheckpointManifestError("unknown task '" + name + "' in config");
    c.task_classes[*task] = classes.get<std::size_t>();
  }
  return c;
}

}  // namespace

std::string config_to_json(const EncoderConfig& config) { return config_json(config).dump(); }

EncoderConfig config_from_json(const std::string& text) {
  try {
    return config_from(json::parse(text));
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed encoder config: ") + e.what());
  }
}

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const ModelParameters<T>& params) {
  json manifest = json::array();
  params.visit([&](const std::string& name, const Tensor<T>& t) {
    manifest.push_back(json{{"name", name}, {"dtype", dtype_name<T>()}, {"shape", t.shape}});
  });
  const std::string header = json{{"config", config_json(params.config)}, {"tensors", manifest}}.dump();

  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  put_le(out, kCheckpointVersion, 4);
  put_le(out, header.size(), 8);
  out.insert(out.end(), header.begin(), header.end());
  params.visit([&](const std::string&, const Tensor<T>& t) { put_values(out, t.data); });
  return out;
}

template <typename T>
ModelParameters<T> deserialize_checkpoint(std::span<const std::uint8_t> bytes,
                                          const std::string& source) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointMagicError(source + ": not a checkpoint (bad magic bytes)");
  }
  if (bytes.size() < 16) throw CheckpointManifestError(source + ": truncated checkpoint header");
  const auto version = static_cast<std::uint32_t>(get_le(bytes, 4, 4));
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError(source + ": unsupported checkpoint version " +
                                 std::to_string(version));
  }
  const auto header_len = get_le(bytes, 8, 8);
  if (header_len > bytes.size() - 16) {
    throw CheckpointManifestError(source + ": truncated checkpoint header");
  }
  json header;
  EncoderConfig config;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    config = config_from(header.at("config"));
    config.validate();
  } catch (const json::exception& e) {
    throw CheckpointManifestError(source + ": malformed checkpoint header: " + e.what());
  } catch (const InvalidArgument& e) {
    throw CheckpointManifestError(source + ": " + e.what());
  }

  auto params = zero_params<T>(config);
  const json* manifest = nullptr;
  try {
    manifest = &header.at("tensors");
  } catch (const json::exception& e) {
    throw CheckpointManifestError(source + ": checkpoint header has no tensor manifest");
  }
  std::size_t offset = 16 + header_len;
  std::size_t index = 0;
  params.visit([&](const std::string& name, Tensor<T>& t) {
    if (index >= manifest->size()) {
      throw CheckpointManifestError(source + ": manifest is missing tensor " + name);
    }
    const auto& entry = (*manifest)[index++];
    std::string dtype;
    std::vector<std::size_t> shape;
    try {
      if (entry.at("name").get<std::string>() != name) {
        throw CheckpointManifestError(source + ": manifest entry " + std::to_string(index - 1) +
                                      " is '" + entry.at("name").get<std::string>() +
                                      "', expected '" + name + "'");
      }
      dtype = entry.at("dtype").get<std::string>();
      shape = entry.at("shape").get<std::vector<std::size_t>>();
    } catch (const json::exception& e) {
      throw CheckpointManifestError(source + ": malformed manifest entry: " + e.what());
    }
    if (shape != t.shape) {
      throw CheckpointManifestError(source + ": manifest shape of " + name +
                                    " disagrees with its config");
    }
    std::size_t width = 0;
    if (dtype == "f32") {
      width = 4;
    } else if (dtype == "f64" && std::is_same_v<T, double>) {
      width = 8;
    } else {
      throw CheckpointManifestError(source + ": cannot load dtype '" + dtype + "' of " + name +
                                    " as " + dtype_name<T>());
    }
    if (t.size() * width > bytes.size() - offset) {
      throw CheckpointManifestError(source + ": payload truncated in tensor " + name);
    }
    for (auto& v : t.data) {
      const auto raw = get_le(bytes, offset, static_cast<int>(width));
      v = width == 4 ? static_cast<T>(std::bit_cast<float>(static_cast<std::uint32_t>(raw)))
                     : static_cast<T>(std::bit_cast<double>(raw));
      offset += width;
    }
  });
  if (index != manifest->size()) {
    throw CheckpointManifestError(source + ": manifest lists unexpected extra tensors");
  }
  if (offset != bytes.size()) {
    throw CheckpointManifestError(source + ": trailing bytes after the last tensor");
  }
  return params;
}

template <typename T>
void save_checkpoint(const ModelParameters<T>& params, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(params);
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

template <typename T>
ModelParameters<T> load_checkpoint(const std::filesystem::path& path) {
  const std::string content = read_file(path);
  return deserialize_checkpoint<T>(
      std::span(reinterpret_cast<const std::uint8_t*>(content.data()), content.size()),
      path.string());
}

template <typename T>
ModelParameters<T> load_checkpoint(const std::filesystem::path& path, const EncoderConfig& expected) {
  auto params = load_checkpoint<T>(path);
  const auto reference = zero_params<T>(expected);
  std::vector<std::pair<std::string, std::vector<std::size_t>>> want;
  reference.visit([&](const std::string& name, const Tensor<T>& t) { want.emplace_back(name, t.shape); });
  std::size_t i = 0;
  params.visit([&](const std::string& name, const Tensor<T>& t) {
    if (i >= want.size() || want[i].first != name) {
      throw ShapeMismatchError(path.string() + ": tensor " + name +
                               " is not part of the expected architecture");
    }
    if (want[i].second != t.shape) {
      auto dims = [](const std::vector<std::size_t>& s) {
        std::string out;
        for (std::size_t k = 0; k < s.size(); ++k) out += (k ? "x" : "") + std::to_string(s[k]);
        return out;
      };
      throw ShapeMismatchError(path.string() + ": tensor " + name + " has shape " + dims(t.shape) +
                               ", expected " + dims(want[i].second));
    }
    ++i;
  });
  if (i != want.size()) {
    throw ShapeMismatchError(path.string() + ": checkpoint lacks tensors the expected architecture needs");
  }
  return params;
}

#define OFFKD_INSTANTIATE(T)                                                                    \
  template std::vector<std::uint8_t> serialize_checkpoint<T>(const ModelParameters<T>&);        \
  template ModelParameters<T> deserialize_checkpoint<T>(std::span<const std::uint8_t>,          \
                                                        const std::string&);                    \
  template void save_checkpoint<T>(const ModelParameters<T>&, const std::filesystem::path&);    \
  template ModelParameters<T> load_checkpoint<T>(const std::filesystem::path&);                 \
  template ModelParameters<T> load_checkpoint<T>(const std::filesystem::path&, const EncoderConfig&);

OFFKD_INSTANTIATE(float)
OFFKD_INSTANTIATE(double)
#undef OFFKD_INSTANTIATE

}  // namespace offkd
