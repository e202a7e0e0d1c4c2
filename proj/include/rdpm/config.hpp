#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <json.hpp>

#include "rdpm/generator.hpp"
#include "rdpm/tokenizer.hpp"

namespace rdpm {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One experiment = one RunConfig. Plain key = value lines under [section]
// headers; unknown sections or keys are parse errors, every value is
// range-checked, and parse(serialize(c)) == c.
struct RunConfig {
    // [schedule]
    ScheduleKind schedule_kind = ScheduleKind::Pow;
    int T = 10;
    double phi = 0.75;
    // [tokenizer]
    int image_size = 32;
    int ratio = 4;
    int K = 512;
    int d_code = 8;
    int base_channels = 32;
    int res_blocks = 3;
    bool bias_conv = true;
    bool gamma_weight = true;
    double tok_lr = 1e-3;
    int tok_epochs = 20;
    // [generator]
    int depth = 6;
    double gen_lr = 3e-4;
    int gen_epochs = 100;
    // [optimizer]
    int warmup_steps = 100;
    double clip_norm = 1.0;
    double ema_decay = 0.999;
    int batch = 16;
    double cond_dropout = 0.1;
    // [sampler]
    double lambda_max = 1.5;
    CfgMode cfg_mode = CfgMode::Linear;
    double tau = 1.0;
    bool use_gumbel = true;
    // [data]
    int num_classes = 4;
    int images_per_class = 50;
    // [run]
    std::uint64_t seed = 0;

    bool operator==(const RunConfig&) const = default;

    TokenizerConfig tokenizer_config() const {
        TokenizerConfig c;
        c.image_size = image_size;
        c.ratio = ratio;
        c.K = K;
        c.d_code = d_code;
        c.base_channels = base_channels;
        c.res_blocks = res_blocks;
        c.use_bias_conv = bias_conv;
        c.use_gamma_weight = gamma_weight;
        c.schedule_kind = schedule_kind;
        c.T = T;
        c.phi = phi;
        return c;
    }

    GeneratorConfig generator_config() const {
        GeneratorConfig c;
        c.depth = depth;
        c.K = K;
        c.d_code = d_code;
        c.tokens = tokenizer_config().tokens();
        c.T = T;
        c.num_classes = num_classes;
        return c;
    }

    TokenizerTrainConfig tokenizer_train_config() const {
        TokenizerTrainConfig c;
        c.lr = tok_lr;
        c.epochs = tok_epochs;
        c.batch = batch;
        c.warmup_steps = warmup_steps;
        return c;
    }

    GeneratorTrainConfig generator_train_config() const {
        GeneratorTrainConfig c;
        c.lr = gen_lr;
        c.epochs = gen_epochs;
        c.batch = batch;
        c.warmup_steps = warmup_steps;
        c.clip_norm = clip_norm;
        c.ema_decay = ema_decay;
        c.cond_dropout = cond_dropout;
        return c;
    }

    SamplerConfig sampler_config() const {
        SamplerConfig c;
        c.T = T;
        c.lambda_max = lambda_max;
        c.cfg_mode = cfg_mode;
        c.tau = tau;
        c.use_gumbel = use_gumbel;
        c.seed = seed;
        return c;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

struct ConfigParser {
    std::map<std::string, std::map<std::string, std::string>> kv;

    template <typename T, typename Reader>
    void read(const std::string& sec, const std::string& key, T& out, Reader rd) {
        auto si = kv.find(sec);
        if (si == kv.end()) return;
        auto ki = si->second.find(key);
        if (ki == si->second.end()) return;
        try {
            out = rd(ki->second);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("config: bad value '" + ki->second + "' for " + sec +
                              "." + key);
        }
        si->second.erase(ki);
    }

    void read_int(const std::string& sec, const std::string& key, int& out) {
        read(sec, key, out, [](const std::string& v) {
            std::size_t pos = 0;
            int r = std::stoi(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return r;
        });
    }
    void read_u64(const std::string& sec, const std::string& key, std::uint64_t& out) {
        read(sec, key, out, [](const std::string& v) {
            std::size_t pos = 0;
            auto r = std::stoull(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return static_cast<std::uint64_t>(r);
        });
    }
    void read_real(const std::string& sec, const std::string& key, double& out) {
        read(sec, key, out, [](const std::string& v) {
            std::size_t pos = 0;
            double r = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return r;
        });
    }
    void read_bool(const std::string& sec, const std::string& key, bool& out) {
        read(sec, key, out, [](const std::string& v) {
            if (v == "true") return true;
            if (v == "false") return false;
            throw std::invalid_argument(v);
        });
    }
};

}  // namespace detail

inline RunConfig parse_config(const std::string& text) {
    detail::ConfigParser p;
    static const std::map<std::string, int> known_sections{
        {"schedule", 0}, {"tokenizer", 0}, {"generator", 0}, {"optimizer", 0},
        {"sampler", 0},  {"data", 0},      {"run", 0}};
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[' && t.back() == ']') {
            section = detail::trim(t.substr(1, t.size() - 2));
            if (!known_sections.count(section))
                throw ConfigError("config line " + std::to_string(lineno) +
                                  ": unknown section [" + section + "]");
            continue;
        }
        std::size_t eq = t.find('=');
        if (eq == std::string::npos || section.empty())
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected key = value inside a section");
        p.kv[section][detail::trim(t.substr(0, eq))] = detail::trim(t.substr(eq + 1));
    }

    RunConfig c;
    p.read("schedule", "kind", c.schedule_kind,
           [](const std::string& v) { return schedule_kind_from(v); });
    p.read_int("schedule", "T", c.T);
    p.read_real("schedule", "phi", c.phi);
    p.read_int("tokenizer", "size", c.image_size);
    p.read_int("tokenizer", "ratio", c.ratio);
    p.read_int("tokenizer", "K", c.K);
    p.read_int("tokenizer", "d_code", c.d_code);
    p.read_int("tokenizer", "base_channels", c.base_channels);
    p.read_int("tokenizer", "res_blocks", c.res_blocks);
    p.read_bool("tokenizer", "bias_conv", c.bias_conv);
    p.read_bool("tokenizer", "gamma_weight", c.gamma_weight);
    p.read_real("tokenizer", "lr", c.tok_lr);
    p.read_int("tokenizer", "epochs", c.tok_epochs);
    p.read_int("generator", "depth", c.depth);
    p.read_real("generator", "lr", c.gen_lr);
    p.read_int("generator", "epochs", c.gen_epochs);
    p.read_int("optimizer", "warmup_steps", c.warmup_steps);
    p.read_real("optimizer", "clip_norm", c.clip_norm);
    p.read_real("optimizer", "ema_decay", c.ema_decay);
    p.read_int("optimizer", "batch", c.batch);
    p.read_real("optimizer", "cond_dropout", c.cond_dropout);
    p.read_real("sampler", "lambda_max", c.lambda_max);
    p.read("sampler", "cfg_mode", c.cfg_mode,
           [](const std::string& v) { return cfg_mode_from(v); });
    p.read_real("sampler", "tau", c.tau);
    p.read_bool("sampler", "use_gumbel", c.use_gumbel);
    p.read_int("data", "classes", c.num_classes);
    p.read_int("data", "per_class", c.images_per_class);
    p.read_u64("run", "seed", c.seed);

    for (const auto& [sec, keys] : p.kv)
        for (const auto& [key, val] : keys)
            throw ConfigError("config: unknown key " + sec + "." + key);

    auto rng = [&](bool ok, const std::string& what) {
        if (!ok) throw ConfigError("config: " + what);
    };
    rng(c.T >= 1, "schedule.T must be >= 1");
    rng(c.schedule_kind != ScheduleKind::Pow || (c.phi > 0.0 && c.phi < 1.0),
        "schedule.phi must be in (0,1) for pow");
    rng(c.image_size >= 8, "tokenizer.size must be >= 8");
    rng(c.ratio >= 1 && (c.ratio & (c.ratio - 1)) == 0 && c.image_size % c.ratio == 0,
        "tokenizer.ratio must be a power of two dividing size");
    rng(c.K >= 2 && c.K <= 65535, "tokenizer.K must be in [2,65535]");
    rng(c.d_code >= 1, "tokenizer.d_code must be >= 1");
    rng(c.base_channels >= 1, "tokenizer.base_channels must be >= 1");
    rng(c.res_blocks >= 1, "tokenizer.res_blocks must be >= 1");
    rng(c.tok_lr > 0.0 && c.gen_lr > 0.0, "learning rates must be > 0");
    rng(c.tok_epochs >= 1 && c.gen_epochs >= 1, "epoch counts must be >= 1");
    rng(c.depth >= 1, "generator.depth must be >= 1");
    rng(c.warmup_steps >= 0, "optimizer.warmup_steps must be >= 0");
    rng(c.clip_norm >= 0.0, "optimizer.clip_norm must be >= 0");
    rng(c.ema_decay > 0.0 && c.ema_decay < 1.0, "optimizer.ema_decay must be in (0,1)");
    rng(c.batch >= 1, "optimizer.batch must be >= 1");
    rng(c.cond_dropout >= 0.0 && c.cond_dropout < 1.0,
        "optimizer.cond_dropout must be in [0,1)");
    rng(c.lambda_max >= 0.0, "sampler.lambda_max must be >= 0");
    rng(c.tau > 0.0, "sampler.tau must be > 0");
    rng(c.num_classes >= 2, "data.classes must be >= 2");
    rng(c.images_per_class >= 1, "data.per_class must be >= 1");
    return c;
}

namespace detail {

inline std::string real_str(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace detail

inline std::string serialize_config(const RunConfig& c) {
    std::ostringstream os;
    os << "[schedule]\n"
       << "kind = " << to_string(c.schedule_kind) << "\n"
       << "T = " << c.T << "\n"
       << "phi = " << detail::real_str(c.phi) << "\n\n"
       << "[tokenizer]\n"
       << "size = " << c.image_size << "\n"
       << "ratio = " << c.ratio << "\n"
       << "K = " << c.K << "\n"
       << "d_code = " << c.d_code << "\n"
       << "base_channels = " << c.base_channels << "\n"
       << "res_blocks = " << c.res_blocks << "\n"
       << "bias_conv = " << (c.bias_conv ? "true" : "false") << "\n"
       << "gamma_weight = " << (c.gamma_weight ? "true" : "false") << "\n"
       << "lr = " << detail::real_str(c.tok_lr) << "\n"
       << "epochs = " << c.tok_epochs << "\n\n"
       << "[generator]\n"
       << "depth = " << c.depth << "\n"
       << "lr = " << detail::real_str(c.gen_lr) << "\n"
       << "epochs = " << c.gen_epochs << "\n\n"
       << "[optimizer]\n"
       << "warmup_steps = " << c.warmup_steps << "\n"
       << "clip_norm = " << detail::real_str(c.clip_norm) << "\n"
       << "ema_decay = " << detail::real_str(c.ema_decay) << "\n"
       << "batch = " << c.batch << "\n"
       << "cond_dropout = " << detail::real_str(c.cond_dropout) << "\n\n"
       << "[sampler]\n"
       << "lambda_max = " << detail::real_str(c.lambda_max) << "\n"
       << "cfg_mode = " << to_string(c.cfg_mode) << "\n"
       << "tau = " << detail::real_str(c.tau) << "\n"
       << "use_gumbel = " << (c.use_gumbel ? "true" : "false") << "\n\n"
       << "[data]\n"
       << "classes = " << c.num_classes << "\n"
       << "per_class = " << c.images_per_class << "\n\n"
       << "[run]\n"
       << "seed = " << c.seed << "\n";
    return os.str();
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("load_config: cannot open " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_config(buf.str());
}

inline void save_config(const std::string& path, const RunConfig& c) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("save_config: cannot open " + path);
    os << serialize_config(c);
    if (!os) throw IoError("save_config: write failed for " + path);
}

// Append-only metrics log: one self-describing JSON object per line.
struct MetricsReport {
    std::string path;

    explicit MetricsReport(std::string p) : path(std::move(p)) {}

    void append(const nlohmann::json& record) const {
        std::ofstream os(path, std::ios::app);
        if (!os) throw IoError("MetricsReport: cannot open " + path);
        os << record.dump() << "\n";
        if (!os) throw IoError("MetricsReport: write failed for " + path);
    }
};

}  // namespace rdpm
