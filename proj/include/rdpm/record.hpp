#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rdpm/schedule.hpp"

namespace rdpm {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Output of one pass of the diffusion quantizer over one image: the T code
// grids plus the seed of the noise stream that produced them. Noise is
// regenerated from the seed, never stored.
struct TokenizationRecord {
    int T = 0;
    int h = 0;
    int w = 0;
    std::vector<std::vector<std::uint16_t>> codes;  // [T][h*w]
    std::uint64_t noise_seed = 0;
    int label = 0;
    std::vector<double> z_final;  // accumulated quantized latent, h*w*d (in-memory only)
};

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
    // serialized little-endian; this targets little-endian hosts
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& what) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("record file: truncated while reading " + what);
    return v;
}

}  // namespace detail

struct RecordFileHeader {
    ScheduleKind kind = ScheduleKind::Pow;
    int T = 0;
    double phi = 0.75;
    int h = 0, w = 0, d_code = 0, K = 0;
};

inline constexpr char kRecordMagic[8] = {'R', 'D', 'P', 'M', 'R', 'E', 'C', 'S'};
inline constexpr std::uint32_t kRecordVersion = 1;

inline void save_records(const std::string& path, const RecordFileHeader& hdr,
                         const std::vector<TokenizationRecord>& records) {
    for (const auto& r : records)
        if (r.T != hdr.T || r.h != hdr.h || r.w != hdr.w)
            throw IoError("save_records: record geometry differs from header");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("save_records: cannot open " + path);
    os.write(kRecordMagic, 8);
    detail::put<std::uint32_t>(os, kRecordVersion);
    detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(hdr.kind));
    detail::put<std::uint16_t>(os, static_cast<std::uint16_t>(hdr.T));
    detail::put<double>(os, hdr.phi);
    detail::put<std::uint16_t>(os, static_cast<std::uint16_t>(hdr.h));
    detail::put<std::uint16_t>(os, static_cast<std::uint16_t>(hdr.w));
    detail::put<std::uint16_t>(os, static_cast<std::uint16_t>(hdr.d_code));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(hdr.K));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        detail::put<std::int32_t>(os, r.label);
        detail::put<std::uint64_t>(os, r.noise_seed);
        for (const auto& step : r.codes) {
            if (static_cast<int>(step.size()) != r.h * r.w)
                throw IoError("save_records: code grid size mismatch");
            os.write(reinterpret_cast<const char*>(step.data()),
                     static_cast<std::streamsize>(step.size() * sizeof(std::uint16_t)));
        }
    }
    if (!os) throw IoError("save_records: write failed for " + path);
}

inline std::pair<RecordFileHeader, std::vector<TokenizationRecord>> load_records(
    const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_records: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kRecordMagic, 8) != 0)
        throw IoError("load_records: bad magic in " + path);
    auto version = detail::get<std::uint32_t>(is, "version");
    if (version != kRecordVersion)
        throw IoError("load_records: version " + std::to_string(version) +
                      " unsupported (expected " + std::to_string(kRecordVersion) + ")");
    RecordFileHeader hdr;
    hdr.kind = static_cast<ScheduleKind>(detail::get<std::uint8_t>(is, "schedule kind"));
    hdr.T = detail::get<std::uint16_t>(is, "T");
    hdr.phi = detail::get<double>(is, "phi");
    hdr.h = detail::get<std::uint16_t>(is, "h");
    hdr.w = detail::get<std::uint16_t>(is, "w");
    hdr.d_code = detail::get<std::uint16_t>(is, "d_code");
    hdr.K = detail::get<std::uint32_t>(is, "K");
    auto count = detail::get<std::uint32_t>(is, "record count");
    std::vector<TokenizationRecord> records;
    records.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        TokenizationRecord r;
        r.T = hdr.T;
        r.h = hdr.h;
        r.w = hdr.w;
        try {
            r.label = detail::get<std::int32_t>(is, "label");
            r.noise_seed = detail::get<std::uint64_t>(is, "noise seed");
            r.codes.assign(static_cast<std::size_t>(hdr.T),
                           std::vector<std::uint16_t>(static_cast<std::size_t>(hdr.h) * hdr.w));
            for (auto& step : r.codes) {
                is.read(reinterpret_cast<char*>(step.data()),
                        static_cast<std::streamsize>(step.size() * sizeof(std::uint16_t)));
                if (!is) throw IoError("truncated codes");
                for (std::uint16_t c : step)
                    if (c >= hdr.K) throw IoError("code out of range");
            }
        } catch (const IoError& e) {
            throw IoError("load_records: record " + std::to_string(i) + ": " + e.what());
        }
        records.push_back(std::move(r));
    }
    return {hdr, std::move(records)};
}

}  // namespace rdpm
