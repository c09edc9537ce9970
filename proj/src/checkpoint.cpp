#include "latentad/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "latentad/errors.hpp"
#include "latentad/hash.hpp"
#include "latentad/png_io.hpp"

namespace latentad {

const std::vector<float>& CheckpointFile::blob(const std::string& name) const {
    for (const auto& [blob_name, data] : blobs)
        if (blob_name == name) return data;
    throw ConfigError("checkpoint blob missing: " + name);
}

bool CheckpointFile::has_blob(const std::string& name) const {
    for (const auto& [blob_name, data] : blobs)
        if (blob_name == name) return true;
    return false;
}

namespace {

template <class T>
void append_le(std::string& out, T value) {
    // Little-endian on all supported targets; serialize bytes directly.
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

template <class T>
T read_le(const std::string& bytes, size_t& pos) {
    if (pos + sizeof(T) > bytes.size()) throw InputError("truncated checkpoint");
    T value;
    std::memcpy(&value, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
}

} // namespace

void CheckpointFile::save(const std::string& path) const {
    nlohmann::json full = header;
    full["format_version"] = kVersion;
    nlohmann::json blob_index = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, data] : blobs) {
        blob_index.push_back({{"name", name}, {"offset", offset}, {"count", data.size()}});
        offset += data.size() * sizeof(float);
    }
    full["blobs"] = blob_index;
    const std::string header_bytes = full.dump();

    std::string out;
    out.reserve(16 + header_bytes.size() + offset);
    out.append(kMagic, 4);
    append_le<uint32_t>(out, kVersion);
    append_le<uint64_t>(out, header_bytes.size());
    out += header_bytes;
    for (const auto& [name, data] : blobs)
        out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));

    atomic_write_file(path, out);
}

CheckpointFile CheckpointFile::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open checkpoint: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    size_t pos = 0;
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw InputError("not a checkpoint file: " + path);
    pos = 4;
    const auto version = read_le<uint32_t>(bytes, pos);
    if (version != kVersion)
        throw ConfigError("unsupported checkpoint version " + std::to_string(version));
    const auto header_len = read_le<uint64_t>(bytes, pos);
    if (pos + header_len > bytes.size()) throw InputError("truncated checkpoint header");

    CheckpointFile ckpt;
    ckpt.header = nlohmann::json::parse(bytes.substr(pos, header_len));
    pos += header_len;

    const size_t payload_base = pos;
    for (const auto& entry : ckpt.header.at("blobs")) {
        const std::string name = entry.at("name");
        const uint64_t offset = entry.at("offset");
        const uint64_t count = entry.at("count");
        const size_t start = payload_base + offset;
        if (start + count * sizeof(float) > bytes.size())
            throw InputError("truncated checkpoint blob: " + name);
        std::vector<float> data(count);
        std::memcpy(data.data(), bytes.data() + start, count * sizeof(float));
        ckpt.blobs.emplace_back(name, std::move(data));
    }
    return ckpt;
}

uint64_t file_content_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open file for hashing: " + path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (in) {
        in.read(buf, sizeof(buf));
        const auto got = in.gcount();
        if (got > 0) h = fnv1a64(buf, static_cast<size_t>(got), h);
    }
    return h;
}

} // namespace latentad
