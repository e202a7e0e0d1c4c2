// Command-line driver: dataset generation, tokenizer/generator training,
// tokenization, sampling, and evaluation. One command per process; every run
// is reproducible from (config, seed).

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <cblas.h>

#include "rdpm/checkpoint.hpp"
#include "rdpm/config.hpp"
#include "rdpm/data.hpp"
#include "rdpm/generator.hpp"
#include "rdpm/tokenizer.hpp"

namespace fs = std::filesystem;
using namespace rdpm;

namespace {

constexpr int kExitInvalidConfig = 2;
constexpr int kExitMissingFile = 3;
constexpr int kExitGeometry = 4;

struct CommonArgs {
    std::string config_path;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

RunConfig load_run_config(const CommonArgs& args) {
    RunConfig cfg = args.config_path.empty() ? RunConfig{} : load_config(args.config_path);
    if (args.seed_set) cfg.seed = args.seed;
    return cfg;
}

std::string index_path(const std::string& dir) { return dir + "/index.tsv"; }

void write_dataset(const std::string& dir, const std::vector<LabeledImage>& images) {
    fs::create_directories(dir);
    std::ofstream idx(index_path(dir), std::ios::trunc);
    if (!idx) throw IoError("cannot open " + index_path(dir));
    for (std::size_t i = 0; i < images.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "img_%05zu.ppm", i);
        write_ppm(dir + "/" + name, images[i].pixels, images[i].height, images[i].width);
        idx << name << "\t" << images[i].label << "\n";
    }
    if (!idx) throw IoError("write failed for " + index_path(dir));
}

std::vector<LabeledImage> read_dataset(const std::string& dir) {
    std::ifstream idx(index_path(dir));
    if (!idx) throw IoError("cannot open " + index_path(dir));
    std::vector<LabeledImage> images;
    std::string line;
    while (std::getline(idx, line)) {
        if (line.empty()) continue;
        std::size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw IoError(index_path(dir) + ": malformed line '" + line + "'");
        LabeledImage img = read_ppm(dir + "/" + line.substr(0, tab));
        img.label = std::stoi(line.substr(tab + 1));
        images.push_back(std::move(img));
    }
    if (images.empty()) throw IoError(index_path(dir) + ": empty dataset");
    return images;
}

double recon_mse(const TokenizerModel& tok, const LabeledImage& img, std::uint64_t nseed) {
    TokenizationRecord rec = tok.tokenize(img, nseed);
    auto pix = tok.decode(Tensor::from_data(
        {static_cast<int>(rec.z_final.size()) / tok.cfg.d_code, tok.cfg.d_code},
        rec.z_final));
    // decoder emits CHW; compare in HWC pixel space
    double m = 0.0;
    int H = img.height, W = img.width;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double d = pix[(static_cast<std::size_t>(c) * H + y) * W + x] -
                           img.pixels[(static_cast<std::size_t>(y) * W + x) * 3 +
                                      static_cast<std::size_t>(c)];
                m += d * d;
            }
    return m / static_cast<double>(img.pixels.size());
}

RecordFileHeader make_record_header(const TokenizerConfig& cfg) {
    RecordFileHeader hdr;
    hdr.kind = cfg.schedule_kind;
    hdr.T = cfg.T;
    hdr.phi = cfg.phi;
    hdr.h = cfg.latent_side();
    hdr.w = cfg.latent_side();
    hdr.d_code = cfg.d_code;
    hdr.K = cfg.K;
    return hdr;
}

void write_contact_sheet(const std::string& path,
                         const std::vector<LabeledImage>& images) {
    int m = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(images.size()))));
    int s = images.front().height;
    int side = m * s;
    std::vector<double> sheet(static_cast<std::size_t>(side) * side * 3, 0.0);
    for (std::size_t i = 0; i < images.size(); ++i) {
        int gy = static_cast<int>(i) / m, gx = static_cast<int>(i) % m;
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x)
                for (int c = 0; c < 3; ++c)
                    sheet[((static_cast<std::size_t>(gy * s + y) * side) + gx * s + x) * 3 +
                          static_cast<std::size_t>(c)] =
                        images[i].pixels[(static_cast<std::size_t>(y) * s + x) * 3 +
                                         static_cast<std::size_t>(c)];
    }
    write_ppm(path, sheet, side, side);
}

int cmd_make_data(const CommonArgs& args) {
    RunConfig cfg = load_run_config(args);
    SyntheticSpec spec;
    spec.num_classes = cfg.num_classes;
    spec.images_per_class = cfg.images_per_class;
    spec.size = cfg.image_size;
    spec.seed = cfg.seed;
    write_dataset(args.out, generate_synthetic(spec));
    save_config(args.out + "/run.cfg", cfg);
    std::cout << "wrote " << spec.num_classes * spec.images_per_class << " images to "
              << args.out << "\n";
    return 0;
}

int cmd_train_tokenizer(const CommonArgs& args, const std::string& data_dir) {
    RunConfig cfg = load_run_config(args);
    auto images = read_dataset(data_dir);
    MetricsReport report(args.out + ".metrics.jsonl");
    std::remove(report.path.c_str());
    TokenizerModel model = train_tokenizer(
        images, cfg.tokenizer_config(), cfg.tokenizer_train_config(), cfg.seed,
        [&](const TokenizerEpochStats& s, TokenizerModel& m) {
            save_tokenizer(args.out, m);
            report.append({{"phase", "tokenizer"},
                           {"epoch", s.epoch},
                           {"recon", s.recon},
                           {"quant", s.quant},
                           {"total", s.total},
                           {"codebook_usage", s.codebook_usage}});
            std::cout << "epoch " << s.epoch << " recon " << s.recon << " quant "
                      << s.quant << " usage " << s.codebook_usage << "\n";
        });
    save_tokenizer(args.out, model);
    return 0;
}

int cmd_tokenize(const CommonArgs& args, const std::string& ckpt,
                 const std::string& data_dir) {
    RunConfig cfg = load_run_config(args);
    TokenizerModel model = load_tokenizer(ckpt);
    auto images = read_dataset(data_dir);
    Rng seed_rng(cfg.seed, /*stream=*/10);
    std::vector<TokenizationRecord> records;
    for (const auto& img : images)
        records.push_back(model.tokenize(img, seed_rng.next_u64()));
    save_records(args.out, make_record_header(model.cfg), records);
    std::cout << "wrote " << records.size() << " records to " << args.out << "\n";
    return 0;
}

int cmd_train_generator(const CommonArgs& args, const std::string& records_path,
                        const std::string& tok_ckpt) {
    RunConfig cfg = load_run_config(args);
    TokenizerModel tok = load_tokenizer(tok_ckpt);
    auto [hdr, records] = load_records(records_path);
    if (hdr.T != tok.cfg.T || hdr.K != tok.cfg.K || hdr.d_code != tok.cfg.d_code ||
        hdr.h != tok.cfg.latent_side())
        throw std::invalid_argument("record/tokenizer geometry mismatch: records (T=" +
                                    std::to_string(hdr.T) + ", K=" + std::to_string(hdr.K) +
                                    ") vs tokenizer (T=" + std::to_string(tok.cfg.T) +
                                    ", K=" + std::to_string(tok.cfg.K) + ")");
    GeneratorConfig gcfg = cfg.generator_config();
    gcfg.K = tok.cfg.K;
    gcfg.d_code = tok.cfg.d_code;
    gcfg.tokens = tok.cfg.tokens();
    gcfg.T = tok.cfg.T;
    MetricsReport report(args.out + ".metrics.jsonl");
    std::remove(report.path.c_str());
    Ema* ema_ptr = nullptr;
    Ema ema_snapshot;
    auto result = train_generator(
        records, tok, gcfg, cfg.generator_train_config(), cfg.seed,
        [&](const GeneratorEpochStats& s, GeneratorModel& m) {
            report.append({{"phase", "generator"},
                           {"epoch", s.epoch},
                           {"loss", s.loss},
                           {"grad_norm", s.grad_norm}});
            std::cout << "epoch " << s.epoch << " loss " << s.loss << "\n";
            (void)m;
        });
    ema_snapshot = result.ema;
    ema_ptr = &ema_snapshot;
    save_generator(args.out, result.model, ema_ptr);
    return 0;
}

int cmd_sample(const CommonArgs& args, const std::string& gen_ckpt,
               const std::string& tok_ckpt, int label, int n, bool use_ema) {
    RunConfig cfg = load_run_config(args);
    TokenizerModel tok = load_tokenizer(tok_ckpt);
    LoadedGenerator gen = load_generator(gen_ckpt);
    if (use_ema && gen.has_ema) gen.ema.copy_to(gen.model.params);
    fs::create_directories(args.out);
    SamplerConfig scfg = cfg.sampler_config();
    std::vector<LabeledImage> images;
    for (int i = 0; i < n; ++i) {
        SamplerConfig one = scfg;
        one.seed = Rng(cfg.seed, /*stream=*/20)
                       .derive(static_cast<std::uint64_t>(label) * 1000003u +
                               static_cast<std::uint64_t>(i))
                       .next_u64();
        GeneratedSample s = generate(gen.model, tok, label, one);
        char name[64];
        std::snprintf(name, sizeof(name), "sample_y%d_%03d.ppm", label, i);
        write_ppm(args.out + "/" + std::string(name), s.image.pixels, s.image.height,
                  s.image.width);
        images.push_back(std::move(s.image));
    }
    write_contact_sheet(args.out + "/sheet_y" + std::to_string(label) + ".ppm", images);
    std::cout << "wrote " << n << " samples for label " << label << " to " << args.out
              << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& tok_ckpt,
             const std::string& gen_ckpt, const std::string& records_path,
             const std::string& data_dir, int samples_per_class) {
    RunConfig cfg = load_run_config(args);
    TokenizerModel tok = load_tokenizer(tok_ckpt);
    auto images = read_dataset(data_dir);

    nlohmann::json out{{"phase", "eval"}};
    Rng seed_rng(cfg.seed, /*stream=*/30);
    double mse = 0.0;
    for (const auto& img : images) mse += recon_mse(tok, img, seed_rng.next_u64());
    out["recon_mse"] = mse / static_cast<double>(images.size());

    if (!records_path.empty()) {
        auto [hdr, records] = load_records(records_path);
        std::vector<long long> counts(static_cast<std::size_t>(hdr.K), 0);
        long long total = 0;
        for (const auto& r : records)
            for (const auto& step : r.codes)
                for (std::uint16_t c : step) {
                    ++counts[c];
                    ++total;
                }
        double entropy = 0.0;
        int used = 0;
        for (long long c : counts) {
            if (c == 0) continue;
            ++used;
            double p = static_cast<double>(c) / static_cast<double>(total);
            entropy -= p * std::log(p);
        }
        out["codebook_usage"] = static_cast<double>(used) / hdr.K;
        out["codebook_perplexity"] = std::exp(entropy);

        if (!gen_ckpt.empty()) {
            LoadedGenerator gen = load_generator(gen_ckpt);
            if (gen.has_ema) gen.ema.copy_to(gen.model.params);
            out["per_step_accuracy"] = per_step_accuracy(gen.model, tok, records);
        }
    }

    if (!gen_ckpt.empty() && samples_per_class > 0) {
        LoadedGenerator gen = load_generator(gen_ckpt);
        if (gen.has_ema) gen.ema.copy_to(gen.model.params);
        auto probe = CentroidProbe::fit(images, cfg.num_classes);
        int hits = 0, total = 0;
        SamplerConfig scfg = cfg.sampler_config();
        for (int y = 0; y < cfg.num_classes; ++y)
            for (int i = 0; i < samples_per_class; ++i) {
                SamplerConfig one = scfg;
                one.seed = Rng(cfg.seed, /*stream=*/31)
                               .derive(static_cast<std::uint64_t>(y) * 1000003u +
                                       static_cast<std::uint64_t>(i))
                               .next_u64();
                GeneratedSample s = generate(gen.model, tok, y, one);
                if (probe.classify(s.image.pixels) == y) ++hits;
                ++total;
            }
        out["class_consistency"] = static_cast<double>(hits) / total;
    }

    if (!args.out.empty()) {
        MetricsReport report(args.out);
        report.append(out);
    }
    std::cout << out.dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* threads = std::getenv("RDPM_THREADS"))
        openblas_set_num_threads(std::max(1, std::atoi(threads)));
    else
        openblas_set_num_threads(1);

    CLI::App app{"recurrent diffusion tokenizer and token generator"};
    app.require_subcommand(1);
    CommonArgs args;
    std::string data_dir, ckpt, tok_ckpt, gen_ckpt, records_path;
    int label = 0, n = 4, samples_per_class = 8;
    bool no_ema = false;

    auto add_common = [&](CLI::App* sub, bool out_required = true) {
        sub->add_option("--config", args.config_path, "run configuration file");
        auto* s = sub->add_option("--seed", args.seed, "override the config seed");
        s->each([&](const std::string&) { args.seed_set = true; });
        auto* o = sub->add_option("--out", args.out, "output path");
        if (out_required) o->required();
    };

    auto* mk = app.add_subcommand("make-data", "generate the synthetic dataset");
    add_common(mk);

    auto* tt = app.add_subcommand("train-tokenizer", "train the diffusion tokenizer");
    add_common(tt);
    tt->add_option("--data", data_dir, "dataset directory")->required();

    auto* tk = app.add_subcommand("tokenize", "run Algorithm 1 over a dataset");
    add_common(tk);
    tk->add_option("--ckpt", ckpt, "tokenizer checkpoint")->required();
    tk->add_option("--data", data_dir, "dataset directory")->required();

    auto* tg = app.add_subcommand("train-generator", "train the token generator");
    add_common(tg);
    tg->add_option("--records", records_path, "tokenization record file")->required();
    tg->add_option("--tokenizer", tok_ckpt, "tokenizer checkpoint")->required();

    auto* sm = app.add_subcommand("sample", "generate images for one label");
    add_common(sm);
    sm->add_option("--generator", gen_ckpt, "generator checkpoint")->required();
    sm->add_option("--tokenizer", tok_ckpt, "tokenizer checkpoint")->required();
    sm->add_option("--label", label, "condition label");
    sm->add_option("--n", n, "number of samples");
    sm->add_flag("--no-ema", no_ema, "sample with raw instead of EMA weights");

    auto* ev = app.add_subcommand("eval", "desk-scale metrics report");
    add_common(ev, /*out_required=*/false);
    ev->add_option("--tokenizer", tok_ckpt, "tokenizer checkpoint")->required();
    ev->add_option("--generator", gen_ckpt, "generator checkpoint");
    ev->add_option("--records", records_path, "tokenization record file");
    ev->add_option("--data", data_dir, "dataset directory")->required();
    ev->add_option("--samples-per-class", samples_per_class,
                   "samples per class for the consistency probe");

    CLI11_PARSE(app, argc, argv);

    try {
        if (mk->parsed()) return cmd_make_data(args);
        if (tt->parsed()) return cmd_train_tokenizer(args, data_dir);
        if (tk->parsed()) return cmd_tokenize(args, ckpt, data_dir);
        if (tg->parsed()) return cmd_train_generator(args, records_path, tok_ckpt);
        if (sm->parsed()) return cmd_sample(args, gen_ckpt, tok_ckpt, label, n, !no_ema);
        if (ev->parsed())
            return cmd_eval(args, tok_ckpt, gen_ckpt, records_path, data_dir,
                            samples_per_class);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInvalidConfig;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMissingFile;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return std::string(e.what()).find("mismatch") != std::string::npos
                   ? kExitGeometry
                   : kExitInvalidConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
