#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace latentad {

// Self-describing checkpoint container: magic + format version + JSON header
// + named float32 blobs (little-endian). The header carries the architecture
// config; kind-specific fields (ordering descriptor, producer hashes) are
// plain JSON entries.
struct CheckpointFile {
    static constexpr char kMagic[5] = "LADC";
    static constexpr uint32_t kVersion = 1;

    nlohmann::json header;
    std::vector<std::pair<std::string, std::vector<float>>> blobs;

    void add_blob(const std::string& name, std::vector<float> data) {
        blobs.emplace_back(name, std::move(data));
    }

    const std::vector<float>& blob(const std::string& name) const;
    bool has_blob(const std::string& name) const;

    void save(const std::string& path) const;
    static CheckpointFile load(const std::string& path);
};

// FNV-1a over the whole file; used as the checkpoint identity.
uint64_t file_content_hash(const std::string& path);

} // namespace latentad
