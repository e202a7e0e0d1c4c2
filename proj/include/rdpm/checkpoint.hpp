#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rdpm/generator.hpp"
#include "rdpm/tokenizer.hpp"

namespace rdpm {

// Checkpoint container: magic "RDPM0001", a u64 length-prefixed JSON manifest
// (section tag, model configuration, parameter names and shapes), then the
// raw little-endian f64 weight blobs in manifest order. Generator files
// append a second blob sequence with the EMA shadow values. Round trips are
// bit-exact because values are stored verbatim.

inline constexpr char kCheckpointMagic[8] = {'R', 'D', 'P', 'M', '0', '0', '0', '1'};

namespace detail {

inline void write_blob(std::ostream& os, const std::vector<double>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline void read_blob(std::istream& is, std::vector<double>& v, const std::string& what) {
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!is) throw IoError("checkpoint: truncated while reading " + what);
}

inline nlohmann::json param_manifest(const Params& ps) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [name, t] : ps.items)
        arr.push_back({{"name", name}, {"shape", t.shape()}});
    return arr;
}

inline void check_params(const nlohmann::json& manifest, const Params& ps,
                         const std::string& path) {
    if (manifest.size() != ps.items.size())
        throw IoError("checkpoint " + path + ": manifest lists " +
                      std::to_string(manifest.size()) + " parameters, model has " +
                      std::to_string(ps.items.size()));
    for (std::size_t i = 0; i < ps.items.size(); ++i) {
        const auto& [name, t] = ps.items[i];
        if (manifest[i].at("name").get<std::string>() != name ||
            manifest[i].at("shape").get<Shape>() != t.shape())
            throw IoError("checkpoint " + path + ": parameter " + std::to_string(i) +
                          " (" + manifest[i].at("name").get<std::string>() +
                          ") does not match model parameter " + name);
    }
}

inline nlohmann::json read_manifest(std::istream& is, const std::string& path,
                                    const std::string& want_section) {
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw IoError("checkpoint " + path + ": bad magic");
    std::uint64_t len = detail::get<std::uint64_t>(is, "manifest length");
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    if (!is) throw IoError("checkpoint " + path + ": truncated manifest");
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint " + path + ": manifest is not valid JSON: " + e.what());
    }
    if (m.value("section", "") != want_section)
        throw IoError("checkpoint " + path + ": section '" + m.value("section", "") +
                      "', expected '" + want_section + "'");
    return m;
}

inline void write_manifest(std::ostream& os, const nlohmann::json& m) {
    std::string text = m.dump();
    os.write(kCheckpointMagic, 8);
    detail::put<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
}

}  // namespace detail

// ---------------------------------------------------------------- tokenizer

inline void save_tokenizer(const std::string& path, const TokenizerModel& model) {
    const auto& c = model.cfg;
    nlohmann::json m{{"section", "tokenizer"},
                     {"config",
                      {{"image_size", c.image_size},
                       {"ratio", c.ratio},
                       {"K", c.K},
                       {"d_code", c.d_code},
                       {"base_channels", c.base_channels},
                       {"res_blocks", c.res_blocks},
                       {"use_bias_conv", c.use_bias_conv},
                       {"use_gamma_weight", c.use_gamma_weight},
                       {"schedule", to_string(c.schedule_kind)},
                       {"T", c.T},
                       {"phi", c.phi},
                       {"delta", c.delta},
                       {"commitment", c.commitment},
                       {"eta", c.eta}}},
                     {"params", detail::param_manifest(model.params)}};
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("save_tokenizer: cannot open " + path);
    detail::write_manifest(os, m);
    for (const auto& [name, t] : model.params.items) detail::write_blob(os, t.data());
    if (!os) throw IoError("save_tokenizer: write failed for " + path);
}

inline TokenizerModel load_tokenizer(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_tokenizer: cannot open " + path);
    nlohmann::json m = detail::read_manifest(is, path, "tokenizer");
    const auto& jc = m.at("config");
    TokenizerConfig cfg;
    cfg.image_size = jc.at("image_size");
    cfg.ratio = jc.at("ratio");
    cfg.K = jc.at("K");
    cfg.d_code = jc.at("d_code");
    cfg.base_channels = jc.at("base_channels");
    cfg.res_blocks = jc.at("res_blocks");
    cfg.use_bias_conv = jc.at("use_bias_conv");
    cfg.use_gamma_weight = jc.at("use_gamma_weight");
    cfg.schedule_kind = schedule_kind_from(jc.at("schedule"));
    cfg.T = jc.at("T");
    cfg.phi = jc.at("phi");
    cfg.delta = jc.at("delta");
    cfg.commitment = jc.at("commitment");
    cfg.eta = jc.at("eta");
    Rng rng(0);
    TokenizerModel model(cfg, rng);
    detail::check_params(m.at("params"), model.params, path);
    for (auto& [name, t] : model.params.items)
        detail::read_blob(is, t.mutable_data(), name);
    return model;
}

// ---------------------------------------------------------------- generator

inline void save_generator(const std::string& path, const GeneratorModel& model,
                           const Ema* ema = nullptr) {
    const auto& c = model.cfg;
    nlohmann::json m{{"section", "generator"},
                     {"config",
                      {{"depth", c.depth},
                       {"K", c.K},
                       {"d_code", c.d_code},
                       {"tokens", c.tokens},
                       {"T", c.T},
                       {"num_classes", c.num_classes},
                       {"mlp_ratio", c.mlp_ratio}}},
                     {"params", detail::param_manifest(model.params)},
                     {"has_ema", ema != nullptr}};
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("save_generator: cannot open " + path);
    detail::write_manifest(os, m);
    for (const auto& [name, t] : model.params.items) detail::write_blob(os, t.data());
    if (ema) {
        if (ema->shadow.size() != model.params.items.size())
            throw IoError("save_generator: EMA shadow count differs from parameter count");
        for (const auto& s : ema->shadow) detail::write_blob(os, s);
    }
    if (!os) throw IoError("save_generator: write failed for " + path);
}

struct LoadedGenerator {
    GeneratorModel model;
    Ema ema;  // empty shadow when the file has no EMA section
    bool has_ema = false;
};

inline LoadedGenerator load_generator(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_generator: cannot open " + path);
    nlohmann::json m = detail::read_manifest(is, path, "generator");
    const auto& jc = m.at("config");
    GeneratorConfig cfg;
    cfg.depth = jc.at("depth");
    cfg.K = jc.at("K");
    cfg.d_code = jc.at("d_code");
    cfg.tokens = jc.at("tokens");
    cfg.T = jc.at("T");
    cfg.num_classes = jc.at("num_classes");
    cfg.mlp_ratio = jc.at("mlp_ratio");
    Rng rng(0);
    LoadedGenerator out{GeneratorModel(cfg, rng), {}, m.value("has_ema", false)};
    detail::check_params(m.at("params"), out.model.params, path);
    for (auto& [name, t] : out.model.params.items)
        detail::read_blob(is, t.mutable_data(), name);
    if (out.has_ema) {
        out.ema.init(out.model.params);
        for (std::size_t i = 0; i < out.ema.shadow.size(); ++i)
            detail::read_blob(is, out.ema.shadow[i],
                              "ema " + out.model.params.items[i].first);
    }
    return out;
}

}  // namespace rdpm
