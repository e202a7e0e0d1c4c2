#pragma once

#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "rdpm/codebook.hpp"
#include "rdpm/data.hpp"
#include "rdpm/nn.hpp"
#include "rdpm/record.hpp"
#include "rdpm/schedule.hpp"

namespace rdpm {

struct TokenizerConfig {
    int image_size = 32;
    int ratio = 4;  // spatial downsampling, power of two
    int K = 512;
    int d_code = 8;
    int base_channels = 32;
    int res_blocks = 3;
    bool use_bias_conv = true;
    bool use_gamma_weight = true;
    ScheduleKind schedule_kind = ScheduleKind::Pow;
    int T = 10;
    double phi = 0.75;
    double delta = 0.25;       // L_quant weight in the total loss
    double commitment = 0.25;  // encoder-side share of the quantization split
    double eta = 0.75;         // adversarial term weight; the term itself is inactive

    int latent_side() const { return image_size / ratio; }
    int tokens() const { return latent_side() * latent_side(); }
    int levels() const {
        int l = 0, r = ratio;
        while (r > 1) {
            r /= 2;
            ++l;
        }
        return l;
    }
};

namespace detail {

struct ResBlock {
    Conv2dLayer c1, c2;
    ResBlock() = default;
    ResBlock(Params& ps, const std::string& name, int ch, Rng& rng) {
        c1 = Conv2dLayer(ps, name + ".c1", ch, ch, 3, 1, 1, rng);
        c2 = Conv2dLayer(ps, name + ".c2", ch, ch, 3, 1, 1, rng, /*zero_init=*/true);
    }
    Tensor forward(const Tensor& x) const {
        return add(x, c2.forward(silu(c1.forward(silu(x)))));
    }
};

}  // namespace detail

// Per-step tensors of one Algorithm-1 pass, kept as graph nodes so the
// tokenizer loss can backpropagate through the whole unrolled loop.
struct TokenizeSteps {
    std::vector<Tensor> noisy;      // v_t = alpha_t z_t + beta_t eps_t
    std::vector<Tensor> rows;       // codebook lookup of C_t (grad -> codebook)
    std::vector<Tensor> quantized;  // effective v'_t entering the accumulation
    std::vector<Tensor> residuals;  // z_1 .. z_{T+1}
    std::vector<std::vector<int>> codes;  // [T][n]
    Tensor accumulated;             // z'_T
};

class TokenizerModel {
public:
    TokenizerConfig cfg;
    NoiseSchedule schedule;
    Params params;
    Codebook codebook;

    TokenizerModel() = default;

    TokenizerModel(const TokenizerConfig& c, Rng& rng)
        : cfg(c), schedule(build_schedule(c.schedule_kind, c.T, c.phi)) {
        int levels = cfg.levels();
        int ch = cfg.base_channels;
        enc_in_ = Conv2dLayer(params, "enc.in", 3, ch, 3, 1, 1, rng);
        int cur = ch;
        for (int l = 0; l <= levels; ++l) {
            for (int b = 0; b < cfg.res_blocks; ++b)
                enc_res_.emplace_back(params, "enc.l" + std::to_string(l) + ".r" + std::to_string(b), cur, rng);
            if (l < levels) {
                int nxt = std::min(cur * 2, 2 * ch);
                enc_down_.emplace_back(params, "enc.down" + std::to_string(l), cur, nxt, 3, 2, 1, rng);
                cur = nxt;
            }
        }
        enc_out_ = Conv2dLayer(params, "enc.out", cur, cfg.d_code, 3, 1, 1, rng);

        dec_in_ = Conv2dLayer(params, "dec.in", cfg.d_code, cur, 3, 1, 1, rng);
        for (int l = levels; l >= 0; --l) {
            for (int b = 0; b < cfg.res_blocks; ++b)
                dec_res_.emplace_back(params, "dec.l" + std::to_string(l) + ".r" + std::to_string(b), cur, rng);
            if (l > 0) {
                int nxt = (l == 1) ? ch : cur;  // mirror of the encoder widths
                dec_up_.emplace_back(params, "dec.up" + std::to_string(l), cur, nxt, 3, 1, 1, rng);
                cur = nxt;
            }
        }
        dec_out_ = Conv2dLayer(params, "dec.out", cur, 3, 3, 1, 1, rng);

        codebook = Codebook(params, cfg.K, cfg.d_code, rng);
        bias_conv_ = Conv2dLayer(params, "bias_conv", cfg.d_code, cfg.d_code, 3, 1, 1,
                                 rng, /*zero_init=*/true);
    }

    // x [B,3,H,W] in [-1,1] -> layer-normalized latents [B*h*w, d_code]
    Tensor encode(const Tensor& x) const {
        detail::require(x.ndim() == 4 && x.dim(1) == 3,
                        "encode: expected [B,3,H,W], got " + shape_str(x.shape()));
        if (x.dim(2) % cfg.ratio != 0 || x.dim(3) % cfg.ratio != 0)
            throw ShapeError("encode: spatial dims " + shape_str(x.shape()) +
                             " not divisible by ratio " + std::to_string(cfg.ratio));
        Tensor h = enc_in_.forward(x);
        std::size_t ri = 0;
        for (int l = 0; l <= cfg.levels(); ++l) {
            for (int b = 0; b < cfg.res_blocks; ++b) h = enc_res_[ri++].forward(h);
            if (l < cfg.levels()) h = enc_down_[static_cast<std::size_t>(l)].forward(h);
        }
        h = enc_out_.forward(h);  // [B, d, h, w]
        h = permute(h, {0, 2, 3, 1});
        h = reshape(h, {-1, cfg.d_code});
        return layer_norm_last(h);
    }

    // z [B*h*w, d_code] -> raw decoder output [B,3,H,W] (unclamped)
    Tensor decode_raw(const Tensor& z) const {
        detail::require(z.ndim() == 2 && z.dim(1) == cfg.d_code,
                        "decode: expected [n," + std::to_string(cfg.d_code) +
                            "] latents, got " + shape_str(z.shape()));
        int hw = cfg.tokens();
        detail::require(z.dim(0) % hw == 0,
                        "decode: row count " + std::to_string(z.dim(0)) +
                            " not a multiple of " + std::to_string(hw) + " tokens");
        int B = z.dim(0) / hw;
        int side = cfg.latent_side();
        Tensor h = permute(reshape(z, {B, side, side, cfg.d_code}), {0, 3, 1, 2});
        h = dec_in_.forward(h);
        std::size_t ri = 0, ui = 0;
        for (int l = cfg.levels(); l >= 0; --l) {
            for (int b = 0; b < cfg.res_blocks; ++b) h = dec_res_[ri++].forward(h);
            if (l > 0) h = dec_up_[ui++].forward(upsample_nearest2(h));
        }
        return dec_out_.forward(h);
    }

    // Decoded image mapped to [0,1], clamped at the boundary.
    std::vector<double> decode(const Tensor& z) const {
        NoGradGuard ng;
        Tensor raw = decode_raw(z);
        std::vector<double> out(raw.numel());
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = std::min(1.0, std::max(0.0, 0.5 * (raw.at(i) + 1.0)));
        return out;
    }

    // Effective quantized vector: straight-through lookup plus the shared
    // bias convolution when enabled. rows_n = B*h*w.
    Tensor effective_quantized(const Tensor& vq_st, int batch) const {
        if (!cfg.use_bias_conv) return vq_st;
        int side = cfg.latent_side();
        Tensor g = permute(reshape(vq_st, {batch, side, side, cfg.d_code}), {0, 3, 1, 2});
        Tensor b = permute(bias_conv_.forward(g), {0, 2, 3, 1});
        return add(vq_st, reshape(b, {-1, cfg.d_code}));
    }

    // Algorithm-1 unrolled over T steps on latents v [n, d_code];
    // noise[t-1] supplies eps_t with the same shape as v.
    TokenizeSteps run_quantization(const Tensor& v,
                                   const std::vector<Tensor>& noise, int batch) const {
        detail::require(static_cast<int>(noise.size()) == schedule.T,
                        "run_quantization: need " + std::to_string(schedule.T) +
                            " noise tensors, got " + std::to_string(noise.size()));
        TokenizeSteps out;
        Tensor z = v;            // z_1 = v
        Tensor acc;              // z'_0 = 0
        out.residuals.push_back(z);
        for (int t = 1; t <= schedule.T; ++t) {
            Tensor vt = add(scale(z, schedule.alpha(t)),
                            scale(noise[static_cast<std::size_t>(t - 1)], schedule.beta(t)));
            QuantizeResult q = quantize(vt, codebook);
            Tensor vq = effective_quantized(q.straight_through, batch);
            out.noisy.push_back(vt);
            out.rows.push_back(q.rows);
            out.quantized.push_back(vq);
            out.codes.push_back(std::move(q.codes));
            acc = acc.defined() ? add(acc, vq) : vq;
            // z_{t+1} = z_t - v'_t, computed as v - z'_t so the telescoped
            // identity z_1 - z'_t - z_{t+1} = 0 holds bit-exactly
            z = sub(v, acc);
            out.residuals.push_back(z);
        }
        out.accumulated = acc;
        return out;
    }

    std::vector<Tensor> make_noise(std::uint64_t noise_seed, int rows) const {
        std::vector<Tensor> noise;
        Rng base(noise_seed);
        for (int t = 1; t <= schedule.T; ++t) {
            Rng stream = base.derive(static_cast<std::uint64_t>(t));
            noise.push_back(Tensor::from_data(
                {rows, cfg.d_code},
                stream.normal_vec(static_cast<std::size_t>(rows) * cfg.d_code)));
        }
        return noise;
    }

    // Full Algorithm 1 on one image (no gradients).
    TokenizationRecord tokenize(const LabeledImage& img, std::uint64_t noise_seed) const {
        NoGradGuard ng;
        Tensor x = image_to_tensor(img);
        Tensor v = encode(x);
        auto noise = make_noise(noise_seed, v.dim(0));
        TokenizeSteps steps = run_quantization(v, noise, 1);
        TokenizationRecord rec;
        rec.T = schedule.T;
        rec.h = cfg.latent_side();
        rec.w = cfg.latent_side();
        rec.noise_seed = noise_seed;
        rec.label = img.label;
        for (const auto& step : steps.codes) {
            std::vector<std::uint16_t> c(step.size());
            for (std::size_t i = 0; i < step.size(); ++i)
                c[i] = static_cast<std::uint16_t>(step[i]);
            rec.codes.push_back(std::move(c));
        }
        rec.z_final = steps.accumulated.data();
        return rec;
    }

    // Effective quantized vectors for a stored code grid (no gradients);
    // the reconstruction path used by the generator.
    std::vector<double> codes_to_vectors(const std::vector<std::uint16_t>& codes) const {
        NoGradGuard ng;
        std::vector<int> ids(codes.begin(), codes.end());
        Tensor rows = embedding(codebook.embeddings, ids);
        Tensor st = effective_quantized(rows, 1);
        return st.data();
    }

    // [-1,1] normalized image tensor [1,3,H,W] from [0,1] pixels (H,W,3)
    static Tensor image_to_tensor(const LabeledImage& img) {
        std::vector<double> chw(img.pixels.size());
        int H = img.height, W = img.width;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    chw[(static_cast<std::size_t>(c) * H + y) * W + x] =
                        2.0 * img.pixels[(static_cast<std::size_t>(y) * W + x) * 3 +
                                         static_cast<std::size_t>(c)] - 1.0;
        return Tensor::from_data({1, 3, H, W}, std::move(chw));
    }

    // batched variant of image_to_tensor
    static Tensor images_to_tensor(const std::vector<const LabeledImage*>& imgs) {
        int H = imgs.front()->height, W = imgs.front()->width;
        std::size_t per = static_cast<std::size_t>(H) * W * 3;
        std::vector<double> chw(per * imgs.size());
        for (std::size_t b = 0; b < imgs.size(); ++b)
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x)
                        chw[b * per + (static_cast<std::size_t>(c) * H + y) * W + x] =
                            2.0 * imgs[b]->pixels[(static_cast<std::size_t>(y) * W + x) * 3 +
                                                  static_cast<std::size_t>(c)] - 1.0;
        return Tensor::from_data({static_cast<int>(imgs.size()), 3, H, W}, std::move(chw));
    }

private:
    Conv2dLayer enc_in_, enc_out_, dec_in_, dec_out_;
    std::vector<detail::ResBlock> enc_res_, dec_res_;
    std::vector<Conv2dLayer> enc_down_, dec_up_;
    Conv2dLayer bias_conv_;
};

// ------------------------------------------------------------------- losses

struct TokenizerLoss {
    Tensor total;     // differentiable objective
    double recon = 0.0;
    double quant = 0.0;  // gamma-weighted mean squared quantization error
    double pept = 0.0;   // perceptual term, inactive
    double gan = 0.0;    // adversarial term, inactive
};

// L = L_recon + delta * L_quant, with the quantization term split into a
// codebook pull (stop-gradient on v_t) and a commitment pull (stop-gradient
// on the embedding), both gamma-weighted.
inline TokenizerLoss tokenizer_loss(const Tensor& x, const TokenizeSteps& steps,
                                    const Tensor& x_rec_raw,
                                    const TokenizerModel& model) {
    const auto& cfg = model.cfg;
    TokenizerLoss out;
    Tensor l_recon = mse(x_rec_raw, x);
    out.recon = l_recon.value();

    Tensor l_quant_grad;
    for (int t = 1; t <= model.schedule.T; ++t) {
        double g = cfg.use_gamma_weight ? model.schedule.gamma(t) : 1.0;
        const Tensor& vt = steps.noisy[static_cast<std::size_t>(t - 1)];
        const Tensor& rows = steps.rows[static_cast<std::size_t>(t - 1)];
        Tensor term = add(mse(detach(vt), rows),
                          scale(mse(vt, detach(rows)), cfg.commitment));
        term = scale(term, g);
        l_quant_grad = l_quant_grad.defined() ? add(l_quant_grad, term) : term;

        // reported value: gamma-weighted error against the effective v'_t
        const Tensor& vq = steps.quantized[static_cast<std::size_t>(t - 1)];
        double m = 0.0;
        for (std::size_t i = 0; i < vt.numel(); ++i) {
            double d = vt.at(i) - vq.at(i);
            m += d * d;
        }
        out.quant += g * m / static_cast<double>(vt.numel());
    }
    out.total = add(l_recon, scale(l_quant_grad, cfg.delta));
    return out;
}

// ----------------------------------------------------------------- training

struct TokenizerTrainConfig {
    double lr = 1e-3;
    double beta1 = 0.5;  // VAE-style Adam moments
    double beta2 = 0.9;
    double weight_decay = 0.0;
    int warmup_steps = 50;
    int epochs = 20;
    int batch = 8;
    bool revive_dead_codes = false;
    int revive_every = 200;  // steps
};

struct TokenizerEpochStats {
    int epoch = 0;
    double recon = 0.0;
    double quant = 0.0;
    double total = 0.0;
    double codebook_usage = 0.0;  // fraction of codes selected at least once
    int revived = 0;
};

using TokenizerEpochCallback = std::function<void(const TokenizerEpochStats&, TokenizerModel&)>;

inline int revive_dead_codes(TokenizerModel& model, const TokenizeSteps& steps,
                             const std::set<int>& used, Rng& rng);

inline TokenizerModel train_tokenizer(const std::vector<LabeledImage>& dataset,
                                      const TokenizerConfig& cfg,
                                      const TokenizerTrainConfig& train,
                                      std::uint64_t seed,
                                      const TokenizerEpochCallback& on_epoch = {}) {
    if (dataset.empty())
        throw std::invalid_argument("train_tokenizer: empty dataset");
    Rng init_rng(seed, /*stream=*/1);
    TokenizerModel model(cfg, init_rng);
    AdamW opt;
    opt.lr = train.lr;
    opt.beta1 = train.beta1;
    opt.beta2 = train.beta2;
    opt.weight_decay = train.weight_decay;
    opt.warmup_steps = train.warmup_steps;
    opt.init(model.params);

    Rng order_rng(seed, /*stream=*/2);
    Rng noise_rng(seed, /*stream=*/3);
    Rng revive_rng(seed, /*stream=*/4);
    int hw = cfg.tokens();
    long long step = 0;
    for (int epoch = 1; epoch <= train.epochs; ++epoch) {
        std::vector<std::size_t> idx(dataset.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        order_rng.shuffle(idx);
        TokenizerEpochStats stats;
        stats.epoch = epoch;
        std::set<int> used;
        int batches = 0;
        for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(train.batch)) {
            std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(train.batch));
            std::vector<const LabeledImage*> batch;
            for (std::size_t i = start; i < end; ++i) batch.push_back(&dataset[idx[i]]);
            int B = static_cast<int>(batch.size());

            Tensor x = TokenizerModel::images_to_tensor(batch);
            Tensor v = model.encode(x);
            // one noise stream per image in the batch
            std::vector<Tensor> noise;
            std::vector<std::uint64_t> seeds(batch.size());
            for (auto& s : seeds) s = noise_rng.next_u64();
            for (int t = 1; t <= cfg.T; ++t) {
                std::vector<double> buf;
                buf.reserve(static_cast<std::size_t>(B) * hw * cfg.d_code);
                for (int b = 0; b < B; ++b) {
                    Rng stream = Rng(seeds[static_cast<std::size_t>(b)]).derive(static_cast<std::uint64_t>(t));
                    auto part = stream.normal_vec(static_cast<std::size_t>(hw) * cfg.d_code);
                    buf.insert(buf.end(), part.begin(), part.end());
                }
                noise.push_back(Tensor::from_data({B * hw, cfg.d_code}, std::move(buf)));
            }
            TokenizeSteps steps = model.run_quantization(v, noise, B);
            Tensor x_rec = model.decode_raw(steps.accumulated);
            TokenizerLoss loss = tokenizer_loss(x, steps, x_rec, model);
            if (!std::isfinite(loss.total.value()))
                throw std::runtime_error("train_tokenizer: non-finite loss at step " +
                                         std::to_string(step) + " (epoch " +
                                         std::to_string(epoch) + ")");
            model.params.zero_grad();
            loss.total.backward();
            opt.step(model.params);
            ++step;

            stats.recon += loss.recon;
            stats.quant += loss.quant;
            stats.total += loss.total.value();
            ++batches;
            for (const auto& cs : steps.codes)
                for (int c : cs) used.insert(c);

            if (train.revive_dead_codes && step % train.revive_every == 0) {
                stats.revived += revive_dead_codes(model, steps, used, revive_rng);
            }
        }
        stats.recon /= batches;
        stats.quant /= batches;
        stats.total /= batches;
        stats.codebook_usage = static_cast<double>(used.size()) / cfg.K;
        if (on_epoch) on_epoch(stats, model);
    }
    return model;
}

// Reassigns codebook rows unseen in the current epoch to random noisy
// latents from the last batch. Off by default.
inline int revive_dead_codes(TokenizerModel& model, const TokenizeSteps& steps,
                             const std::set<int>& used, Rng& rng) {
    int revived = 0;
    auto& emb = model.codebook.embeddings.mutable_data();
    const Tensor& pool = steps.noisy.front();
    int rows = pool.dim(0);
    for (int k = 0; k < model.cfg.K; ++k) {
        if (used.count(k)) continue;
        int src = static_cast<int>(rng.next_index(static_cast<std::uint64_t>(rows)));
        for (int j = 0; j < model.cfg.d_code; ++j)
            emb[static_cast<std::size_t>(k) * model.cfg.d_code + j] =
                pool.at(static_cast<std::size_t>(src) * model.cfg.d_code + j);
        ++revived;
    }
    return revived;
}

}  // namespace rdpm
