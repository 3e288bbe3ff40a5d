#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "mmrg/error.hpp"
#include "mmrg/rng.hpp"
#include "mmrg/tensor_store.hpp"
#include "support.hpp"

using namespace mmrg;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    out << bytes;
}

tensor_map random_map(counter_rng& rng) {
    tensor_map m;
    const int n = static_cast<int>(rng.below(6));
    for (int i = 0; i < n; ++i) {
        shape_t shape;
        const int rank = 1 + static_cast<int>(rng.below(3));
        for (int r = 0; r < rank; ++r) shape.push_back(1 + static_cast<int64_t>(rng.below(7)));
        tensor t(shape);
        for (auto& v : t.data) {
            // raw bit patterns, rejecting non-finite ones
            uint32_t bits;
            float f;
            do {
                bits = static_cast<uint32_t>(rng.next_u64());
                std::memcpy(&f, &bits, 4);
            } while (!std::isfinite(f));
            v = f;
        }
        m.entries.emplace("t" + std::to_string(rng.below(1000)) + ".w", std::move(t));
    }
    m.meta["stage"] = "sft";
    m.meta["note"] = "run " + std::to_string(rng.below(100));
    return m;
}

} // namespace

TEST_CASE("empty map round-trips") {
    test::temp_dir dir("empty");
    tensor_map m;
    m.meta["stage"] = "pretrained";
    save_checkpoint(m, dir.path / "e.mmrg");
    const auto back = load_checkpoint(dir.path / "e.mmrg");
    CHECK(back.entries.empty());
    CHECK(back == m);
}

TEST_CASE("one tensor round-trips and saving twice gives identical bytes") {
    test::temp_dir dir("one");
    const auto m = test::one_tensor_map("w", {1.0f, 2.0f});
    save_checkpoint(m, dir.path / "a.mmrg");
    save_checkpoint(m, dir.path / "b.mmrg");
    CHECK(load_checkpoint(dir.path / "a.mmrg") == m);
    CHECK(slurp(dir.path / "a.mmrg") == slurp(dir.path / "b.mmrg"));
}

TEST_CASE("container layout") {
    tensor_map m = test::one_tensor_map("b", {1.0f});
    m.entries.emplace("a", test::make_tensor({2, 2}, {1, 2, 3, 4}));
    const std::string bytes = encode_container(m);
    CHECK(bytes.substr(0, 4) == "MMRG");
    uint32_t version = 0;
    std::memcpy(&version, bytes.data() + 4, 4);
    CHECK(version == 1);
    uint64_t header = 0;
    std::memcpy(&header, bytes.data() + 8, 8);
    const std::string text = bytes.substr(16, header);
    // index sorted by name, meta lines after
    CHECK(text.find("a\tf32\t2,2\t0\t16\n") == 0);
    CHECK(text.find("b\tf32\t1\t64\t4\n") != std::string::npos);
    CHECK(text.find("#meta\tstage\tpretrained") != std::string::npos);
    // data section starts at the next 64-byte boundary
    const size_t data = (16 + header + 63) / 64 * 64;
    float first = 0;
    std::memcpy(&first, bytes.data() + data + 12, 4);
    CHECK(first == 4.0f);
    std::memcpy(&first, bytes.data() + data + 64, 4);
    CHECK(first == 1.0f);
    CHECK(bytes.size() == data + 68);
}

TEST_CASE("fuzz: 100 random maps round-trip bit-exactly") {
    counter_rng rng(99);
    for (int i = 0; i < 100; ++i) {
        const auto m = random_map(rng);
        const auto back = decode_container(encode_container(m));
        REQUIRE(back.entries.size() == m.entries.size());
        for (const auto& [name, t] : m.entries) {
            const auto& u = back.at(name);
            CHECK(u.shape == t.shape);
            CHECK(std::memcmp(u.data.data(), t.data.data(), t.data.size() * sizeof(float)) == 0);
        }
        CHECK(back.meta == m.meta);
    }
}

TEST_CASE("corrupted files are rejected") {
    tensor_map m = test::one_tensor_map("w", {1.0f, 2.0f, 3.0f});
    const std::string good = encode_container(m);

    SUBCASE("truncated payload") {
        CHECK_THROWS_WITH_AS(decode_container(good.substr(0, good.size() - 2)), "payload shorter than index",
                             format_error);
    }
    SUBCASE("bad magic") {
        std::string bad = good;
        bad[0] = 'X';
        CHECK_THROWS_AS(decode_container(bad), format_error);
    }
    SUBCASE("wrong version") {
        std::string bad = good;
        bad[4] = 7;
        CHECK_THROWS_AS(decode_container(bad), format_error);
    }
    SUBCASE("header longer than file") {
        std::string bad = good;
        bad[12] = 0x7f;
        CHECK_THROWS_AS(decode_container(bad), format_error);
    }
    SUBCASE("duplicate name in index") {
        tensor_map two = m;
        two.entries.emplace("x", test::make_tensor({3}, {4, 5, 6}));
        std::string bad = encode_container(two);
        const auto pos = bad.find("x\tf32");
        REQUIRE(pos != std::string::npos);
        bad[pos] = 'w';
        CHECK_THROWS_WITH_AS(decode_container(bad), doctest::Contains("duplicate"), format_error);
    }
    SUBCASE("shape and length disagree") {
        std::string bad = good;
        const auto pos = bad.find("w\tf32\t3\t");
        REQUIRE(pos != std::string::npos);
        bad[pos + 6] = '2';
        CHECK_THROWS_AS(decode_container(bad), format_error);
    }
    SUBCASE("NaN payload") {
        std::string bad = good;
        const float nan = std::numeric_limits<float>::quiet_NaN();
        std::memcpy(bad.data() + bad.size() - 4, &nan, 4);
        CHECK_THROWS_AS(decode_container(bad), format_error);
    }
    SUBCASE("empty input") {
        CHECK_THROWS_AS(decode_container(""), format_error);
    }
}

TEST_CASE("corrupted file on disk") {
    test::temp_dir dir("disk");
    const auto p = dir.path / "c.mmrg";
    save_checkpoint(test::one_tensor_map("w", {1.0f, 2.0f}), p);
    const std::string bytes = slurp(p);
    spit(p, bytes.substr(0, bytes.size() - 1));
    CHECK_THROWS_AS(load_checkpoint(p), format_error);
    CHECK_THROWS_AS(load_checkpoint(dir.path / "missing.mmrg"), missing_artifact);
}

TEST_CASE("save refuses invalid maps") {
    test::temp_dir dir("invalid");
    tensor_map m = test::one_tensor_map("w", {1.0f, std::numeric_limits<float>::infinity()});
    CHECK_THROWS_AS(save_checkpoint(m, dir.path / "x.mmrg"), format_error);
    CHECK_FALSE(std::filesystem::exists(dir.path / "x.mmrg"));

    tensor_map no_stage = test::one_tensor_map("w", {1.0f});
    no_stage.meta.clear();
    CHECK_THROWS_AS(save_checkpoint(no_stage, dir.path / "y.mmrg"), format_error);
    no_stage.meta["stage"] = "finished";
    CHECK_THROWS_AS(save_checkpoint(no_stage, dir.path / "y.mmrg"), format_error);

    tensor_map bad_len = test::one_tensor_map("w", {1.0f});
    bad_len.entries["w"].shape = {2};
    CHECK_THROWS_AS(validate_tensor_map(bad_len), format_error);

    tensor_map bad_meta = test::one_tensor_map("w", {1.0f});
    bad_meta.meta["note"] = "a\tb";
    CHECK_THROWS_AS(validate_tensor_map(bad_meta), format_error);
}

TEST_CASE("validate_compatibility") {
    tensor_map pre = test::one_tensor_map("w", {1.0f, 2.0f});
    pre.entries.emplace("v", test::make_tensor({1}, {3.0f}));

    SUBCASE("identical maps") {
        const auto part = validate_compatibility(pre, pre);
        CHECK(part.adapter_names.empty());
        CHECK(part.shared_names == std::set<std::string>{"v", "w"});
    }
    SUBCASE("one extra tensor") {
        tensor_map sft = pre;
        sft.entries.emplace("adapter.q", test::make_tensor({2}, {0, 0}));
        const auto part = validate_compatibility(sft, pre);
        CHECK(part.adapter_names == std::set<std::string>{"adapter.q"});
        CHECK(part.shared_names == std::set<std::string>{"v", "w"});
    }
    SUBCASE("shape mismatch") {
        tensor_map sft = pre;
        sft.entries["w"] = test::make_tensor({1, 2}, {1, 2});
        CHECK_THROWS_AS(validate_compatibility(sft, pre), format_error);
    }
    SUBCASE("pretrained tensor missing from the fine-tuned map") {
        tensor_map sft = pre;
        sft.entries.erase("v");
        CHECK_THROWS_AS(validate_compatibility(sft, pre), format_error);
    }
}

TEST_CASE("partition invariants on random maps") {
    counter_rng rng(5);
    for (int i = 0; i < 20; ++i) {
        tensor_map pre = random_map(rng);
        tensor_map sft = pre;
        const int extra = static_cast<int>(rng.below(3));
        for (int k = 0; k < extra; ++k) sft.entries.emplace("adapter.x" + std::to_string(k), test::make_tensor({1}, {0}));
        const auto part = validate_compatibility(sft, pre);
        for (const auto& n : part.adapter_names) CHECK(part.shared_names.count(n) == 0);
        CHECK(part.adapter_names.size() + part.shared_names.size() == sft.entries.size());
    }
}
