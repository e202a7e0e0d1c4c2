#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "rdpm/data.hpp"

using namespace rdpm;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::ostringstream buf;
    buf << is.rdbuf();
    return buf.str();
}

}  // namespace

TEST_CASE("synthetic dataset is balanced and in range") {
    SyntheticSpec spec;
    spec.num_classes = 4;
    spec.images_per_class = 50;
    spec.seed = 3;
    auto data = generate_synthetic(spec);
    REQUIRE(data.size() == 200);
    std::vector<int> counts(4, 0);
    for (const auto& im : data) {
        ++counts[static_cast<std::size_t>(im.label)];
        REQUIRE(im.pixels.size() == 32u * 32u * 3u);
        for (double p : im.pixels) {
            REQUIRE(std::isfinite(p));
            REQUIRE(p >= 0.0);
            REQUIRE(p <= 1.0);
        }
    }
    for (int c : counts) CHECK(c == 50);
}

TEST_CASE("synthetic generation is a pure function of the spec") {
    SyntheticSpec spec;
    spec.seed = 9;
    spec.images_per_class = 5;
    auto a = generate_synthetic(spec);
    auto b = generate_synthetic(spec);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].label == b[i].label);
        REQUIRE(a[i].pixels == b[i].pixels);
    }

    CHECK_THROWS_AS(generate_synthetic(SyntheticSpec{1, 5, 32, 0}), std::invalid_argument);
    CHECK_THROWS_AS(generate_synthetic(SyntheticSpec{4, 5, 4, 0}), std::invalid_argument);
}

TEST_CASE("centroid probe beats chance on raw pixels") {
    SyntheticSpec spec;
    spec.seed = 11;
    auto data = generate_synthetic(spec);
    auto probe = CentroidProbe::fit(data, spec.num_classes);
    int hits = 0;
    for (const auto& im : data)
        if (probe.classify(im.pixels) == im.label) ++hits;
    double acc = static_cast<double>(hits) / static_cast<double>(data.size());
    INFO("probe accuracy " << acc);
    CHECK(acc > 0.25);
}

TEST_CASE("all-black 2x2 P6 file matches the format byte for byte") {
    std::string path = tmp_path("rdpm_black.ppm");
    write_ppm(path, std::vector<double>(12, 0.0), 2, 2);
    std::string bytes = slurp(path);
    REQUIRE(bytes.size() == 11 + 12);
    CHECK(bytes.substr(0, 11) == "P6\n2 2\n255\n");
    for (std::size_t i = 11; i < bytes.size(); ++i) CHECK(bytes[i] == '\0');
    std::remove(path.c_str());
}

TEST_CASE("ppm round trip within the 8-bit quantization bound") {
    Rng rng(4);
    LabeledImage img;
    img.height = 6;
    img.width = 5;
    img.pixels.resize(6 * 5 * 3);
    for (auto& p : img.pixels) p = rng.uniform();
    std::string path = tmp_path("rdpm_rt.ppm");
    write_ppm(path, img.pixels, img.height, img.width);
    LabeledImage back = read_ppm(path);
    REQUIRE(back.height == 6);
    REQUIRE(back.width == 5);
    double max_err = 0.0;
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        max_err = std::max(max_err, std::abs(img.pixels[i] - back.pixels[i]));
    CHECK(max_err <= 0.5 / 255.0 + 1e-12);

    // second write of the reread image is byte-identical
    std::string path2 = tmp_path("rdpm_rt2.ppm");
    write_ppm(path2, back.pixels, back.height, back.width);
    LabeledImage again = read_ppm(path2);
    CHECK(back.pixels == again.pixels);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("ppm reader rejects malformed and truncated files") {
    std::string path = tmp_path("rdpm_bad.ppm");
    {
        std::ofstream os(path, std::ios::binary);
        os << "P5\n2 2\n255\n";
    }
    CHECK_THROWS_WITH(read_ppm(path), Catch::Matchers::ContainsSubstring("byte offset 0"));
    {
        std::ofstream os(path, std::ios::binary);
        os << "P6\n2 2\n255\n";
        os.put('\0');  // 1 of 12 payload bytes
    }
    CHECK_THROWS_WITH(read_ppm(path), Catch::Matchers::ContainsSubstring("truncated"));
    {
        std::ofstream os(path, std::ios::binary);
        os << "P6\n2 2\n65535\n";
    }
    CHECK_THROWS_WITH(read_ppm(path), Catch::Matchers::ContainsSubstring("maxval"));
    CHECK_THROWS_AS(read_ppm(tmp_path("rdpm_missing.ppm")), IoError);
    std::remove(path.c_str());

    // comments in the header are fine
    {
        std::ofstream os(path, std::ios::binary);
        os << "P6\n# hello\n1 1\n255\n";
        os.put('\x10');
        os.put('\x20');
        os.put('\x30');
    }
    LabeledImage img = read_ppm(path);
    CHECK(img.width == 1);
    CHECK_THAT(img.pixels[0], Catch::Matchers::WithinAbs(0x10 / 255.0, 1e-12));
    std::remove(path.c_str());
}

TEST_CASE("record files round trip bit-exactly") {
    Rng rng(5);
    RecordFileHeader hdr;
    hdr.kind = ScheduleKind::Pow;
    hdr.T = 3;
    hdr.phi = 0.75;
    hdr.h = 2;
    hdr.w = 2;
    hdr.d_code = 4;
    hdr.K = 16;
    std::vector<TokenizationRecord> records;
    for (int i = 0; i < 10; ++i) {
        TokenizationRecord r;
        r.T = 3;
        r.h = 2;
        r.w = 2;
        r.noise_seed = rng.next_u64();
        r.label = i % 4;
        for (int t = 0; t < 3; ++t) {
            std::vector<std::uint16_t> grid(4);
            for (auto& c : grid) c = static_cast<std::uint16_t>(rng.next_index(16));
            r.codes.push_back(std::move(grid));
        }
        records.push_back(std::move(r));
    }
    std::string path = tmp_path("rdpm_records.bin");
    save_records(path, hdr, records);
    auto [hdr2, back] = load_records(path);
    CHECK(hdr2.kind == hdr.kind);
    CHECK(hdr2.T == hdr.T);
    CHECK(hdr2.phi == hdr.phi);
    CHECK(hdr2.K == hdr.K);
    REQUIRE(back.size() == records.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].noise_seed == records[i].noise_seed);
        CHECK(back[i].label == records[i].label);
        CHECK(back[i].codes == records[i].codes);
    }

    // idempotent persistence: writing the reloaded records gives equal bytes
    std::string path2 = tmp_path("rdpm_records2.bin");
    save_records(path2, hdr2, back);
    CHECK(slurp(path) == slurp(path2));
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("record file error paths") {
    std::string path = tmp_path("rdpm_rec_err.bin");
    RecordFileHeader hdr;
    hdr.T = 1;
    hdr.h = 1;
    hdr.w = 2;
    hdr.d_code = 2;
    hdr.K = 4;

    SECTION("empty list is a valid file") {
        save_records(path, hdr, {});
        auto [h2, back] = load_records(path);
        CHECK(back.empty());
        CHECK(h2.w == 2);
    }

    SECTION("geometry mismatch rejected at save") {
        TokenizationRecord r;
        r.T = 2;
        r.h = 1;
        r.w = 2;
        CHECK_THROWS_AS(save_records(path, hdr, {r}), IoError);
    }

    SECTION("truncation names the record index") {
        TokenizationRecord r;
        r.T = 1;
        r.h = 1;
        r.w = 2;
        r.codes = {{1, 2}};
        save_records(path, hdr, {r, r, r});
        auto bytes = slurp(path);
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 6));
        os.close();
        CHECK_THROWS_WITH(load_records(path), Catch::Matchers::ContainsSubstring("record 2"));
    }

    SECTION("version mismatch rejected") {
        save_records(path, hdr, {});
        auto bytes = slurp(path);
        bytes[8] = 9;  // version field follows the 8-byte magic
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        os.close();
        CHECK_THROWS_WITH(load_records(path), Catch::Matchers::ContainsSubstring("version"));
    }

    SECTION("out-of-range code rejected with record index") {
        TokenizationRecord r;
        r.T = 1;
        r.h = 1;
        r.w = 2;
        r.codes = {{1, 200}};  // K = 4
        save_records(path, hdr, {r});
        CHECK_THROWS_WITH(load_records(path), Catch::Matchers::ContainsSubstring("record 0"));
    }
    std::remove(path.c_str());
}
