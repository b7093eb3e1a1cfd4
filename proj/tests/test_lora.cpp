#include <cstring>
#include <filesystem>

#include <gtest/gtest.h>
#include <zlib.h>

#include "loraview/lora/adapter.hpp"
#include "oracles.hpp"

using namespace loraview;
using namespace loraview::lora;

namespace {

// Container bytes assembled by hand: header length, JSON text, raw floats,
// CRC32 of everything before it.
std::vector<std::uint8_t> hand_built(const std::string& json, const std::vector<float>& payload, bool good_crc = true) {
    std::vector<std::uint8_t> out;
    std::uint64_t n = json.size();
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(n >> (8 * i)));
    out.insert(out.end(), json.begin(), json.end());
    for (float f : payload) {
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
    }
    std::uint32_t crc = static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), out.data(), static_cast<uInt>(out.size())));
    if (!good_crc) crc ^= 1u;
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
    return out;
}

LoraAdapter random_adapter(std::uint64_t seed, std::size_t rank = 3) {
    Rng r(seed);
    std::map<std::string, std::pair<std::size_t, std::size_t>> shapes = {{"block0.self.q", {8, 8}},
                                                                         {"block0.cross.v", {8, 8}}};
    auto a = make_adapter(shapes, rank, r, 0.5, "view");
    for (auto& [k, l] : a.layers) l.b = r.normal_matrix(l.b.rows(), l.b.cols());
    a.uid_tokens = {53, 77};
    return a;
}

}  // namespace

TEST(Container, DecodesHandBuiltFileWithForeignKeys) {
    const std::string json =
        R"({"__metadata__":{"kind":"adapter","producer":"elsewhere","n":"1"},)"
        R"("x":{"dtype":"f32","shape":[1,2],"offset":0,"length":8,"note":"extra"},)"
        R"("y":{"dtype":"f32","shape":[2,1],"offset":8,"length":8},"comment":{"dtype":"f32","shape":[1,1],"offset":16,"length":4}})";
    auto bytes = hand_built(json, {1.5f, -2.0f, 3.0f, 4.0f, 0.25f});
    auto f = decode(bytes);
    EXPECT_EQ(f.metadata.at("kind"), "adapter");
    EXPECT_EQ(f.metadata.at("producer"), "elsewhere");
    EXPECT_TRUE(f.tensors.at("x").bit_equal(Matrix::from({{1.5f, -2.0f}})));
    EXPECT_TRUE(f.tensors.at("y").bit_equal(Matrix::from({{3.0f}, {4.0f}})));
    EXPECT_TRUE(verify_crc(bytes));
}

TEST(Container, RejectsCorruption) {
    const std::string json = R"({"__metadata__":{"kind":"gates"},"x":{"dtype":"f32","shape":[1,2],"offset":0,"length":8}})";
    EXPECT_NO_THROW(decode(hand_built(json, {1, 2})));
    EXPECT_THROW(decode(hand_built(json, {1, 2}, false)), FormatError);
    EXPECT_FALSE(verify_crc(hand_built(json, {1, 2}, false)));

    auto bad_len = hand_built(json, {1, 2});
    bad_len[0] = 0xFF;  // header length beyond the file; CRC recomputed so only the length is wrong
    bad_len.resize(bad_len.size() - 4);
    auto crc = static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), bad_len.data(), static_cast<uInt>(bad_len.size())));
    for (int i = 0; i < 4; ++i) bad_len.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
    try {
        decode(bad_len);
        FAIL() << "accepted an oversized header length";
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }

    EXPECT_THROW(decode(hand_built(json, {1, 2, 3})), FormatError);  // payload longer than declared
    EXPECT_THROW(decode(hand_built(json, {1})), FormatError);        // shorter
    const std::string f16 = R"({"x":{"dtype":"f16","shape":[1,2],"offset":0,"length":8}})";
    EXPECT_THROW(decode(hand_built(f16, {1, 2})), FormatError);
    EXPECT_THROW(decode(hand_built("{not json", {})), FormatError);
    EXPECT_THROW(decode(std::vector<std::uint8_t>(5, 0)), FormatError);
}

TEST(Container, EncodeDecodeIsByteExact) {
    TensorFile f;
    f.metadata["kind"] = "model";
    Rng r(3);
    f.tensors["a"] = r.normal_matrix(3, 4);
    f.tensors["b"] = Matrix(1, 1, -0.0f);
    auto bytes = encode(f);
    auto back = decode(bytes);
    EXPECT_EQ(encode(back), bytes);
    EXPECT_TRUE(back.tensors.at("b").bit_equal(f.tensors.at("b")));
    TensorFile reserved;
    reserved.tensors["__metadata__"] = Matrix(1, 1);
    EXPECT_THROW(encode(reserved), ParameterError);
}

TEST(Adapter, FreshAdapterHasZeroDelta) {
    Rng r(1);
    auto a = make_adapter({{"k", {6, 5}}}, 2, r, 0.1);
    EXPECT_EQ(frobenius(materialize(a, "k")), 0.0);
    EXPECT_THROW(make_adapter({{"k", {6, 5}}}, 6, r, 0.1), ParameterError);
    EXPECT_THROW(materialize(a, "missing"), KeyError);
}

TEST(Adapter, MaterializeMatchesOracleProduct) {
    auto a = random_adapter(4);
    a.layers.at("block0.self.q").scale = 0.5f;
    for (const auto& [k, l] : a.layers) {
        auto ref = oracle::matmul(oracle::DMat(l.a), oracle::DMat(l.b));
        for (auto& v : ref.v) v *= l.scale;
        EXPECT_LT(oracle::relative_error(materialize(l), ref), 1e-6);
    }
}

TEST(Adapter, ExtractAtFullRankReconstructs) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng r(seed);
        Matrix delta = matmul(r.normal_matrix(10, 4), r.normal_matrix(4, 7));
        auto layer = extract_lora(delta, 4);
        EXPECT_EQ(layer.rank(), 4u);
        EXPECT_LT(relative_error(materialize(layer), delta), 1e-5);
    }
}

TEST(Adapter, PersistenceRoundTripIsByteExact) {
    auto a = random_adapter(8);
    const auto dir = std::filesystem::temp_directory_path();
    save(a, dir / "lv_adapter.lvt");
    auto b = load_adapter(dir / "lv_adapter.lvt");
    EXPECT_EQ(b.concept_tag, "view");
    EXPECT_EQ(b.uid_tokens, a.uid_tokens);
    for (const auto& [k, l] : a.layers) {
        EXPECT_TRUE(b.layers.at(k).a.bit_equal(l.a));
        EXPECT_TRUE(b.layers.at(k).b.bit_equal(l.b));
    }
    save(b, dir / "lv_adapter2.lvt");
    EXPECT_EQ(read_bytes(dir / "lv_adapter.lvt"), read_bytes(dir / "lv_adapter2.lvt"));
    TensorFile wrong = to_tensor_file(a);
    wrong.metadata["kind"] = "gates";
    EXPECT_THROW(adapter_from_tensor_file(wrong), FormatError);
    std::filesystem::remove(dir / "lv_adapter.lvt");
    std::filesystem::remove(dir / "lv_adapter2.lvt");
}

TEST(Alignment, IdenticalAdaptersAreFullyAlignedAndNoiseIsNot) {
    auto a = random_adapter(1, 8);
    auto rep = alignment(a, a, 50);
    EXPECT_NEAR(rep.mean_abs_cos, 1.0, 1e-6);
    auto b = random_adapter(2, 8);
    auto rep2 = alignment(a, b, 50);
    EXPECT_LT(rep2.mean_abs_cos, 0.6);
    EXPECT_GT(rep2.random_p95, rep2.random_mean_abs_cos);
    // Gaussian 8-vectors: E|cos| = Gamma(4) / (sqrt(pi) Gamma(4.5)) ~ 0.2910
    EXPECT_NEAR(rep2.random_mean_abs_cos, 0.2910, 0.02);
}
