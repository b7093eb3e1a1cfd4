#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "loraview/numerics/matrix.hpp"

namespace loraview::scenegen {

/// Binary PGM (P5, maxval 255). Values are clamped to [0,1] and rounded.
inline void write_pgm(const std::filesystem::path& path, const Matrix& image) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("io error", "cannot open " + path.string() + " for writing");
    out << "P5\n" << image.cols() << ' ' << image.rows() << "\n255\n";
    std::vector<unsigned char> bytes(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) {
        float v = std::clamp(image[i], 0.0f, 1.0f);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("io error", "short write to " + path.string());
}

inline Matrix read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("io error", "cannot open " + path.string());
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P5" || maxval != 255 || w == 0 || h == 0)
        throw FormatError("not a P5/255 graymap: " + path.string(), static_cast<std::uint64_t>(in.tellg()));
    in.get();  // single whitespace after the header
    std::vector<unsigned char> bytes(w * h);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<std::size_t>(in.gcount()) != bytes.size())
        throw FormatError("truncated pixel data in " + path.string(), static_cast<std::uint64_t>(in.gcount()));
    Matrix m(h, w);
    for (std::size_t i = 0; i < bytes.size(); ++i) m[i] = static_cast<float>(bytes[i]) / 255.0f;
    return m;
}

}  // namespace loraview::scenegen
