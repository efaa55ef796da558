#include "ipf/nn/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "ipf/error.hpp"

namespace ipf::nn {

namespace {

constexpr std::array<char, 8> kMagic = {'I', 'P', 'F', 'C', 'K', 'P', 'T', '\0'};

template <typename U>
void put_le(std::ostream& out, U value) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    buf[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFF);
  }
  out.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get_le(std::istream& in, const std::filesystem::path& path) {
  unsigned char buf[sizeof(U)];
  in.read(reinterpret_cast<char*>(buf), sizeof(U));
  if (!in) throw DataError("truncated checkpoint: " + path.string());
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const nlohmann::json& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(config.dump())));
  return buf;
}

template <typename T>
void save_archive(const std::filesystem::path& path, nlohmann::json header,
                  const ParamStore<T>& params) {
  header["format_version"] = kArchiveVersion;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& v = params.value(i);
    header["tensors"].push_back({{"name", params.name(i)},
                                 {"shape", v.shape},
                                 {"offset", offset},
                                 {"count", v.size()},
                                 {"trainable", params.trainable(i)}});
    offset += v.size();
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path.string());
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(out, kArchiveVersion);
  put_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (T v : params.value(i).data) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  if (!out) throw DataError("failed writing checkpoint: " + path.string());
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw DataError("not a checkpoint archive: " + path.string());
  const auto version = get_le<std::uint32_t>(in, path);
  if (version != kArchiveVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = get_le<std::uint64_t>(in, path);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw DataError("truncated checkpoint header: " + path.string());

  Archive a;
  try {
    a.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint header: " + std::string(e.what()));
  }
  for (const auto& t : a.header.at("tensors")) {
    Tensor<float> v(t.at("shape").get<Shape>());
    if (v.size() != t.at("count").get<std::size_t>()) {
      throw DataError("checkpoint tensor count mismatch: " + t.at("name").get<std::string>());
    }
    for (auto& x : v.data) x = std::bit_cast<float>(get_le<std::uint32_t>(in, path));
    a.params.add(t.at("name").get<std::string>(), std::move(v), t.value("trainable", true));
  }
  return a;
}

template void save_archive(const std::filesystem::path&, nlohmann::json, const ParamStore<float>&);
template void save_archive(const std::filesystem::path&, nlohmann::json, const ParamStore<double>&);

}  // namespace ipf::nn
