#pragma once

// Tensor container shared by adapters, gates and model checkpoints:
//
//   [u64 LE header length N][N bytes UTF-8 JSON header][payload][u32 LE CRC32]
//
// The JSON header maps tensor name -> {"dtype": "f32", "shape": [rows, cols],
// "offset": byte offset into payload, "length": byte count}, plus a
// "__metadata__" object of string -> string (always carries "kind").
// Payload floats are little-endian IEEE-754. The CRC covers every byte
// before it. Unknown header or metadata keys are ignored on load.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>
#include <zlib.h>

#include "loraview/numerics/matrix.hpp"

namespace loraview::lora {

struct TensorFile {
    std::map<std::string, std::string> metadata;
    std::map<std::string, Matrix> tensors;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}
inline std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}
inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks
    std::size_t pos = 0;
    while (pos < bytes.size()) {
        auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
        crc = crc32(crc, bytes.data() + pos, n);
        pos += n;
    }
    return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(const TensorFile& file) {
    nlohmann::json header = nlohmann::json::object();
    nlohmann::json meta = nlohmann::json::object();
    for (const auto& [k, v] : file.metadata) meta[k] = v;
    header["__metadata__"] = meta;
    std::uint64_t offset = 0;
    for (const auto& [name, m] : file.tensors) {
        if (name == "__metadata__") throw ParameterError("tensor name '__metadata__' is reserved");
        const std::uint64_t length = m.size() * sizeof(float);
        header[name] = {{"dtype", "f32"}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}, {"length", length}};
        offset += length;
    }
    const std::string text = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(8 + text.size() + offset + 4);
    detail::put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& [name, m] : file.tensors)
        for (float f : m.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
    detail::put_u32(out, detail::crc32_of(out));
    return out;
}

inline TensorFile decode(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 12) throw FormatError("file shorter than the minimal container", bytes.size());
    const std::uint64_t header_len = detail::get_u64(bytes.data());
    if (header_len > bytes.size() - 12) throw FormatError("header length field exceeds file size", 0);
    const std::size_t crc_pos = bytes.size() - 4;
    const std::uint32_t stored_crc = detail::get_u32(bytes.data() + crc_pos);
    if (stored_crc != detail::crc32_of(bytes.first(crc_pos))) throw FormatError("checksum mismatch", crc_pos);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("malformed JSON header: ") + e.what(), 8 + e.byte);
    }
    if (!header.is_object()) throw FormatError("header is not a JSON object", 8);

    const std::size_t payload_pos = 8 + header_len;
    const std::size_t payload_len = crc_pos - payload_pos;
    TensorFile file;
    std::uint64_t expected_end = 0;
    for (const auto& [name, entry] : header.items()) {
        if (name == "__metadata__") {
            if (!entry.is_object()) throw FormatError("__metadata__ is not an object", 8);
            for (const auto& [k, v] : entry.items())
                if (v.is_string()) file.metadata[k] = v.get<std::string>();
            continue;
        }
        try {
            if (entry.at("dtype").get<std::string>() != "f32")
                throw FormatError("tensor '" + name + "' has unsupported dtype", 8);
            const auto shape = entry.at("shape").get<std::vector<std::uint64_t>>();
            const auto offset = entry.at("offset").get<std::uint64_t>();
            const auto length = entry.at("length").get<std::uint64_t>();
            if (shape.size() != 2) throw FormatError("tensor '" + name + "' is not 2-D", 8);
            if (length != shape[0] * shape[1] * sizeof(float))
                throw FormatError("tensor '" + name + "' length disagrees with its shape", 8);
            if (offset > payload_len || length > payload_len - offset)
                throw FormatError("tensor '" + name + "' extends past the payload", payload_pos + offset);
            Matrix m(shape[0], shape[1]);
            const std::uint8_t* src = bytes.data() + payload_pos + offset;
            for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::bit_cast<float>(detail::get_u32(src + 4 * i));
            expected_end = std::max(expected_end, offset + length);
            file.tensors.emplace(name, std::move(m));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("bad entry for tensor '" + name + "': " + e.what(), 8);
        }
    }
    if (expected_end != payload_len) throw FormatError("payload size disagrees with header", payload_pos + expected_end);
    return file;
}

inline void write_file(const std::filesystem::path& path, const TensorFile& file) {
    const auto bytes = encode(file);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("io error", "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("io error", "short write to " + path.string());
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("io error", "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline TensorFile read_file(const std::filesystem::path& path) { return decode(read_bytes(path)); }

/// Checks the trailing CRC without decoding the header.
inline bool verify_crc(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4) return false;
    return detail::get_u32(bytes.data() + bytes.size() - 4) == detail::crc32_of(bytes.first(bytes.size() - 4));
}

}  // namespace loraview::lora
