#pragma once

// Run manifests: what produced an artifact (command, config, seed, inputs).
// Manifests carry no timestamps, so identical runs produce identical files.

#include <atm/error.hpp>

#include <json.hpp>
#include <openssl/evp.h>
#include <unistd.h>

#include <array>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace atm {

inline constexpr const char* kVersion = "0.1.0";

inline std::string to_hex(const unsigned char* data, std::size_t n) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(2 * n, '0');
  for (std::size_t i = 0; i < n; ++i) {
    out[2 * i] = digits[data[i] >> 4];
    out[2 * i + 1] = digits[data[i] & 0xf];
  }
  return out;
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw InternalError("SHA-256 init failed");
  }
  Sha256& update(std::string_view data) {
    if (EVP_DigestUpdate(ctx_.get(), data.data(), data.size()) != 1) throw InternalError("SHA-256 update failed");
    return *this;
  }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int n = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), md.data(), &n) != 1) throw InternalError("SHA-256 final failed");
    return to_hex(md.data(), n);
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::string_view data) { return Sha256().update(data).hex(); }

inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  Sha256 h;
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    h.update(std::string_view(buf.data(), static_cast<std::size_t>(in.gcount())));
  }
  return h.hex();
}

// Write-temp-then-rename so readers never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  static std::atomic<unsigned long> counter{0};
  tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw InputError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Manifest {
  std::string command;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> inputs;  // path, sha256

  void add_input(const std::filesystem::path& p) { inputs.emplace_back(p.string(), sha256_file(p)); }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["tool"] = "atm";
    j["version"] = kVersion;
    j["command"] = command;
    j["seed"] = seed;
    j["config_sha256"] = sha256_hex(config.dump());
    j["config"] = config;
    j["inputs"] = nlohmann::ordered_json::array();
    for (const auto& [path, hash] : inputs) j["inputs"].push_back({{"path", path}, {"sha256", hash}});
    return j;
  }

  // Content hash of the manifest; artifacts embed this as their reference.
  std::string id() const { return sha256_hex(to_json().dump()); }
};

inline std::filesystem::path manifest_path_for(const std::filesystem::path& artifact) {
  std::filesystem::path p = artifact;
  p += ".manifest.json";
  return p;
}

// Writes <artifact>.manifest.json next to an artifact.
inline void write_manifest(const std::filesystem::path& artifact, const Manifest& m) {
  nlohmann::ordered_json j = m.to_json();
  j["manifest_id"] = m.id();
  j["artifact"] = artifact.filename().string();
  write_file_atomic(manifest_path_for(artifact), j.dump(2) + "\n");
}

}  // namespace atm
