#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rdpm/nn.hpp"
#include "rdpm/schedule.hpp"
#include "rdpm/tokenizer.hpp"

namespace rdpm {

// Transformer width and head count follow the paper's scaling rule, so only
// the depth is a free size knob.
struct GeneratorConfig {
    int depth = 6;
    int K = 512;
    int d_code = 8;
    int tokens = 64;  // h*w token grid, flattened
    int T = 10;
    int num_classes = 4;
    int mlp_ratio = 2;  // desk-scale width; DiT-style blocks commonly use 4

    int hidden() const { return depth * 64; }
    int heads() const { return depth; }
    int null_label() const { return num_classes; }
};

struct SamplerConfig {
    int T = 10;
    double lambda_max = 0.0;
    CfgMode cfg_mode = CfgMode::Linear;
    double tau = 1.0;
    bool use_gumbel = true;
    std::uint64_t seed = 0;
};

namespace detail {

// Pre-norm transformer block with AdaLN-Zero conditioning: the modulation
// head emits (shift, scale, gate) pairs for both sub-blocks and is zero
// initialized, so the whole block is the identity at init.
struct GenBlock {
    Linear qkv, proj, fc1, fc2, mod;

    GenBlock() = default;
    GenBlock(Params& ps, const std::string& name, int hidden, int mlp_ratio, Rng& rng) {
        qkv = Linear(ps, name + ".qkv", hidden, 3 * hidden, rng);
        proj = Linear(ps, name + ".proj", hidden, hidden, rng);
        fc1 = Linear(ps, name + ".fc1", hidden, mlp_ratio * hidden, rng);
        fc2 = Linear(ps, name + ".fc2", mlp_ratio * hidden, hidden, rng);
        mod = Linear(ps, name + ".mod", hidden, 6 * hidden, rng, /*zero_init=*/true);
    }

    Tensor attention(const Tensor& x, int heads) const {
        int H = x.dim(2);
        int dh = H / heads;
        Tensor qkv_out = qkv.forward(x);  // [B,N,3H]
        Tensor q = split_heads(slice_last(qkv_out, 0, H), heads);
        Tensor k = split_heads(slice_last(qkv_out, H, H), heads);
        Tensor v = split_heads(slice_last(qkv_out, 2 * H, H), heads);
        Tensor att = softmax_last(scale(bmm(q, k, /*trans_b=*/true),
                                        1.0 / std::sqrt(static_cast<double>(dh))));
        Tensor o = merge_heads(bmm(att, v), heads);
        return proj.forward(o);
    }

    // x [B,N,H], cond [B,H] (already activated)
    Tensor forward(const Tensor& x, const Tensor& cond, int heads) const {
        int H = x.dim(2);
        Tensor m = mod.forward(cond);  // [B,6H]
        Tensor sh1 = slice_last(m, 0, H), sc1 = slice_last(m, H, H),
               g1 = slice_last(m, 2 * H, H), sh2 = slice_last(m, 3 * H, H),
               sc2 = slice_last(m, 4 * H, H), g2 = slice_last(m, 5 * H, H);
        Tensor h = add(x, gate_tokens(
                              attention(affine_tokens(layer_norm_last(x), sc1, sh1), heads),
                              g1));
        Tensor mlp = fc2.forward(gelu(fc1.forward(affine_tokens(layer_norm_last(h), sc2, sh2))));
        return add(h, gate_tokens(mlp, g2));
    }
};

}  // namespace detail

// f(eps_t, y, t, z'_{t-1}): noise and accumulated quantized vectors are
// concatenated channel-wise, projected to the transformer width, and decoded
// to K-way logits per token. Conditioning on (t, y) enters through AdaLN-Zero,
// so at init the logits are exactly independent of both.
class GeneratorModel {
public:
    GeneratorConfig cfg;
    Params params;
    mutable long long forward_count = 0;

    GeneratorModel() = default;

    GeneratorModel(const GeneratorConfig& c, Rng& rng) : cfg(c) {
        if (cfg.depth < 1) throw std::invalid_argument("GeneratorModel: depth must be >= 1");
        if (cfg.T < 1) throw std::invalid_argument("GeneratorModel: T must be >= 1");
        if (cfg.K < 2) throw std::invalid_argument("GeneratorModel: K must be >= 2");
        int H = cfg.hidden();
        input_proj_ = Linear(params, "input_proj", 2 * cfg.d_code, H, rng);
        pos_emb_ = params.add("pos_emb", init::normal({cfg.tokens, H}, rng, 0.02));
        t_emb_ = params.add("t_emb", init::normal({cfg.T, H}, rng, 0.02));
        y_emb_ = params.add("y_emb", init::normal({cfg.num_classes + 1, H}, rng, 0.02));
        for (int l = 0; l < cfg.depth; ++l)
            blocks_.emplace_back(params, "block" + std::to_string(l), H, cfg.mlp_ratio, rng);
        final_mod_ = Linear(params, "final.mod", H, 2 * H, rng, /*zero_init=*/true);
        head_ = Linear(params, "head", H, cfg.K, rng, /*zero_init=*/true);
    }

    // eps, z_prev [B, tokens, d_code]; ys per-example labels (null_label() for
    // the unconditional branch); ts per-example timesteps in [1, T].
    Tensor forward(const Tensor& eps, const std::vector<int>& ys,
                   const std::vector<int>& ts, const Tensor& z_prev) const {
        detail::require(eps.ndim() == 3 && eps.dim(1) == cfg.tokens && eps.dim(2) == cfg.d_code,
                        "generator forward: eps must be [B," + std::to_string(cfg.tokens) +
                            "," + std::to_string(cfg.d_code) + "], got " + shape_str(eps.shape()));
        detail::require(z_prev.shape() == eps.shape(),
                        "generator forward: z_prev shape " + shape_str(z_prev.shape()) +
                            " differs from eps " + shape_str(eps.shape()));
        std::size_t B = static_cast<std::size_t>(eps.dim(0));
        detail::require(ys.size() == B && ts.size() == B,
                        "generator forward: need one label and timestep per example");
        std::vector<int> t_ids(B);
        for (std::size_t i = 0; i < B; ++i) {
            if (ts[i] < 1 || ts[i] > cfg.T)
                throw std::invalid_argument("generator forward: t = " + std::to_string(ts[i]) +
                                            " out of [1," + std::to_string(cfg.T) + "]");
            if (ys[i] < 0 || ys[i] > cfg.num_classes)
                throw std::invalid_argument("generator forward: label " + std::to_string(ys[i]) +
                                            " out of [0," + std::to_string(cfg.num_classes) + "]");
            t_ids[i] = ts[i] - 1;
        }
        ++forward_count;

        Tensor x = input_proj_.forward(concat_last(eps, z_prev));
        x = add(x, pos_emb_);
        Tensor cond = silu(add(embedding(t_emb_, t_ids), embedding(y_emb_, ys)));
        for (const auto& b : blocks_) x = b.forward(x, cond, cfg.heads());
        Tensor m = final_mod_.forward(cond);
        int H = cfg.hidden();
        x = affine_tokens(layer_norm_last(x), slice_last(m, H, H), slice_last(m, 0, H));
        return head_.forward(x);  // [B, tokens, K]
    }

private:
    Linear input_proj_, final_mod_, head_;
    Tensor pos_emb_, t_emb_, y_emb_;
    std::vector<detail::GenBlock> blocks_;
};

// Single-image step of Algorithm 2 (batch of one).
inline Tensor predict_step(const GeneratorModel& model, const Tensor& eps, int y,
                           int t, const Tensor& z_prev) {
    return model.forward(eps, {y}, {t}, z_prev);
}

// Mean over token positions of -log softmax probability of the target code.
inline Tensor generator_loss(const Tensor& logits, const std::vector<int>& codes) {
    detail::require(logits.numel() == codes.size() * static_cast<std::size_t>(logits.dim(logits.ndim() - 1)),
                    "generator_loss: " + std::to_string(codes.size()) +
                        " targets for logits " + shape_str(logits.shape()));
    return cross_entropy(reshape(logits, {-1, logits.dim(logits.ndim() - 1)}), codes);
}

// cond + lambda * (cond - uncond), in logit space.
inline Tensor cfg_combine(const Tensor& cond, const Tensor& uncond, double lambda) {
    detail::require(cond.shape() == uncond.shape(),
                    "cfg_combine: shapes " + shape_str(cond.shape()) + " and " +
                        shape_str(uncond.shape()) + " differ");
    return add(cond, scale(sub(cond, uncond), lambda));
}

// Gumbel-max draw per token position: argmax_k tau*logit_k - log(-log u).
// With use_gumbel off this is a plain argmax and consumes no randomness.
inline std::vector<int> sample_codes(const Tensor& logits, const SamplerConfig& cfg, Rng& rng) {
    if (!(cfg.tau > 0.0))
        throw std::invalid_argument("sample_codes: tau must be > 0, got " +
                                    std::to_string(cfg.tau));
    int K = logits.dim(logits.ndim() - 1);
    std::size_t n = logits.numel() / static_cast<std::size_t>(K);
    const auto& d = logits.data();
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = d.data() + i * static_cast<std::size_t>(K);
        int best = 0;
        double best_v = 0.0;
        for (int k = 0; k < K; ++k) {
            double v;
            if (cfg.use_gumbel) {
                double u = rng.uniform();
                u = std::min(1.0 - 1e-16, std::max(1e-300, u));  // keep (0,1) open
                v = cfg.tau * row[k] - std::log(-std::log(u));
            } else {
                v = row[k];
            }
            if (k == 0 || v > best_v) {
                best_v = v;
                best = k;
            }
        }
        out[i] = best;
    }
    return out;
}

// -------------------------------------------------------------- Algorithm 2

inline void check_geometry(const GeneratorModel& gen, const TokenizerModel& tok) {
    const auto& g = gen.cfg;
    const auto& t = tok.cfg;
    if (g.T != t.T || g.K != t.K || g.d_code != t.d_code || g.tokens != t.tokens())
        throw std::invalid_argument(
            "generator/tokenizer geometry mismatch: generator (T=" + std::to_string(g.T) +
            ", K=" + std::to_string(g.K) + ", d=" + std::to_string(g.d_code) +
            ", tokens=" + std::to_string(g.tokens) + ") vs tokenizer (T=" +
            std::to_string(t.T) + ", K=" + std::to_string(t.K) + ", d=" +
            std::to_string(t.d_code) + ", tokens=" + std::to_string(t.tokens()) + ")");
}

struct GeneratedSample {
    std::vector<std::vector<std::uint16_t>> codes;  // [T][tokens]
    std::vector<double> z_final;                    // tokens*d_code
    LabeledImage image;                             // decoded, [0,1] HWC
};

// T recurrent steps: predict logits, CFG-combine when lambda_max > 0, sample
// a code grid, accumulate its effective embedding, decode at the end. The
// noise eps_t is drawn once per step and shared by both CFG branches.
inline GeneratedSample generate(const GeneratorModel& model, const TokenizerModel& tokenizer,
                                int y, const SamplerConfig& cfg) {
    check_geometry(model, tokenizer);
    if (cfg.T != model.cfg.T)
        throw std::invalid_argument("generate: sampler T = " + std::to_string(cfg.T) +
                                    " differs from model T = " + std::to_string(model.cfg.T));
    if (cfg.lambda_max < 0.0)
        throw std::invalid_argument("generate: lambda_max must be >= 0");
    NoGradGuard ng;
    int N = model.cfg.tokens;
    int d = model.cfg.d_code;
    Rng noise_rng = Rng(cfg.seed).derive(1);
    Rng gumbel_rng = Rng(cfg.seed).derive(2);

    GeneratedSample out;
    std::vector<double> acc(static_cast<std::size_t>(N) * d, 0.0);
    for (int t = 1; t <= cfg.T; ++t) {
        Tensor eps = Tensor::from_data({1, N, d},
                                       noise_rng.normal_vec(static_cast<std::size_t>(N) * d));
        Tensor z_prev = Tensor::from_data({1, N, d}, acc);
        Tensor logits = predict_step(model, eps, y, t, z_prev);
        if (cfg.lambda_max > 0.0) {
            Tensor uncond = predict_step(model, eps, model.cfg.null_label(), t, z_prev);
            logits = cfg_combine(logits, uncond,
                                 cfg_lambda(t, cfg.T, cfg.lambda_max, cfg.cfg_mode));
        }
        std::vector<int> codes = sample_codes(logits, cfg, gumbel_rng);
        std::vector<std::uint16_t> grid(codes.size());
        for (std::size_t i = 0; i < codes.size(); ++i)
            grid[i] = static_cast<std::uint16_t>(codes[i]);
        std::vector<double> v = tokenizer.codes_to_vectors(grid);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
        out.codes.push_back(std::move(grid));
    }
    out.z_final = acc;

    std::vector<double> chw = tokenizer.decode(Tensor::from_data({N, d}, acc));
    int side = tokenizer.cfg.image_size;
    out.image.height = side;
    out.image.width = side;
    out.image.label = y;
    out.image.pixels.resize(chw.size());
    for (int c = 0; c < 3; ++c)
        for (int yy = 0; yy < side; ++yy)
            for (int xx = 0; xx < side; ++xx)
                out.image.pixels[(static_cast<std::size_t>(yy) * side + xx) * 3 + c] =
                    chw[(static_cast<std::size_t>(c) * side + yy) * side + xx];
    return out;
}

// ----------------------------------------------------------------- training

struct GeneratorTrainConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.03;
    double clip_norm = 1.0;
    double ema_decay = 0.999;
    double cond_dropout = 0.1;
    int warmup_steps = 100;
    int epochs = 100;
    int batch = 16;
    bool all_steps = false;  // loop every t per example instead of sampling one
};

struct GeneratorEpochStats {
    int epoch = 0;
    double loss = 0.0;
    double grad_norm = 0.0;      // mean pre-clip norm
    double null_fraction = 0.0;  // share of examples with the condition dropped
};

struct GeneratorTrainResult {
    GeneratorModel model;
    Ema ema;
};

using GeneratorEpochCallback =
    std::function<void(const GeneratorEpochStats&, GeneratorModel&)>;

// Teacher forcing throughout: z'_{t-1} comes from the stored code grids, the
// noise stream is regenerated from each record's seed, and targets are the
// recorded codes at step t. One timestep is drawn per example per batch
// unless all_steps is set.
inline GeneratorTrainResult train_generator(const std::vector<TokenizationRecord>& records,
                                            const TokenizerModel& tokenizer,
                                            const GeneratorConfig& cfg,
                                            const GeneratorTrainConfig& train,
                                            std::uint64_t seed,
                                            const GeneratorEpochCallback& on_epoch = {}) {
    if (records.empty())
        throw std::invalid_argument("train_generator: empty record set");
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (r.T != cfg.T || r.h * r.w != cfg.tokens)
            throw std::invalid_argument("train_generator: record " + std::to_string(i) +
                                        " schedule/geometry (T=" + std::to_string(r.T) +
                                        ", tokens=" + std::to_string(r.h * r.w) +
                                        ") does not match the configuration");
    }
    Rng init_rng(seed, /*stream=*/1);
    GeneratorModel model(cfg, init_rng);
    check_geometry(model, tokenizer);

    std::size_t nd = static_cast<std::size_t>(cfg.tokens) * cfg.d_code;
    // the tokenizer is frozen here, so per-record noise and teacher-forced
    // accumulations z'_0 .. z'_{T-1} can be precomputed once
    std::vector<std::vector<double>> eps_flat(records.size());
    std::vector<std::vector<double>> acc_flat(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        eps_flat[i].reserve(nd * static_cast<std::size_t>(cfg.T));
        Rng base(records[i].noise_seed);
        for (int t = 1; t <= cfg.T; ++t) {
            auto part = base.derive(static_cast<std::uint64_t>(t)).normal_vec(nd);
            eps_flat[i].insert(eps_flat[i].end(), part.begin(), part.end());
        }
        acc_flat[i].assign(nd * static_cast<std::size_t>(cfg.T), 0.0);
        std::vector<double> acc(nd, 0.0);
        for (int t = 1; t <= cfg.T; ++t) {
            std::copy(acc.begin(), acc.end(),
                      acc_flat[i].begin() + static_cast<std::size_t>(t - 1) * nd);
            if (t < cfg.T) {
                auto v = tokenizer.codes_to_vectors(records[i].codes[static_cast<std::size_t>(t - 1)]);
                for (std::size_t j = 0; j < nd; ++j) acc[j] += v[j];
            }
        }
    }

    AdamW opt;
    opt.lr = train.lr;
    opt.beta1 = train.beta1;
    opt.beta2 = train.beta2;
    opt.weight_decay = train.weight_decay;
    opt.warmup_steps = train.warmup_steps;
    opt.init(model.params);
    Ema ema;
    ema.decay = train.ema_decay;
    ema.init(model.params);

    Rng order_rng(seed, /*stream=*/2);
    Rng t_rng(seed, /*stream=*/3);
    Rng drop_rng(seed, /*stream=*/4);
    long long step = 0;
    GeneratorTrainResult result;
    for (int epoch = 1; epoch <= train.epochs; ++epoch) {
        std::vector<std::size_t> idx(records.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        order_rng.shuffle(idx);
        GeneratorEpochStats stats;
        stats.epoch = epoch;
        int batches = 0;
        for (std::size_t start = 0; start < idx.size();
             start += static_cast<std::size_t>(train.batch)) {
            std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(train.batch));
            std::vector<std::pair<std::size_t, int>> items;  // (record, t)
            for (std::size_t i = start; i < end; ++i) {
                if (train.all_steps) {
                    for (int t = 1; t <= cfg.T; ++t) items.emplace_back(idx[i], t);
                } else {
                    items.emplace_back(idx[i],
                                       1 + static_cast<int>(t_rng.next_index(
                                               static_cast<std::uint64_t>(cfg.T))));
                }
            }
            int B = static_cast<int>(items.size());
            std::vector<double> eps_buf, acc_buf;
            eps_buf.reserve(static_cast<std::size_t>(B) * nd);
            acc_buf.reserve(static_cast<std::size_t>(B) * nd);
            std::vector<int> ys(items.size()), ts(items.size());
            std::vector<int> targets;
            targets.reserve(static_cast<std::size_t>(B) * cfg.tokens);
            for (std::size_t b = 0; b < items.size(); ++b) {
                auto [ri, t] = items[b];
                ts[b] = t;
                bool drop = drop_rng.uniform() < train.cond_dropout;
                if (drop) stats.null_fraction += 1.0;
                ys[b] = drop ? cfg.null_label() : records[ri].label;
                const double* e = eps_flat[ri].data() + static_cast<std::size_t>(t - 1) * nd;
                const double* a = acc_flat[ri].data() + static_cast<std::size_t>(t - 1) * nd;
                eps_buf.insert(eps_buf.end(), e, e + nd);
                acc_buf.insert(acc_buf.end(), a, a + nd);
                for (std::uint16_t c : records[ri].codes[static_cast<std::size_t>(t - 1)])
                    targets.push_back(c);
            }
            Tensor eps = Tensor::from_data({B, cfg.tokens, cfg.d_code}, std::move(eps_buf));
            Tensor z_prev = Tensor::from_data({B, cfg.tokens, cfg.d_code}, std::move(acc_buf));
            Tensor logits = model.forward(eps, ys, ts, z_prev);
            Tensor loss = generator_loss(logits, targets);
            if (!std::isfinite(loss.value()))
                throw std::runtime_error("train_generator: non-finite loss at step " +
                                         std::to_string(step) + " (epoch " +
                                         std::to_string(epoch) + ")");
            model.params.zero_grad();
            loss.backward();
            stats.grad_norm += clip_grad_norm(model.params, train.clip_norm);
            opt.step(model.params);
            ema.update(model.params);
            ++step;
            stats.loss += loss.value();
            ++batches;
        }
        stats.loss /= batches;
        stats.grad_norm /= batches;
        double n_items = static_cast<double>(idx.size()) * (train.all_steps ? cfg.T : 1);
        stats.null_fraction /= n_items;
        if (on_epoch) on_epoch(stats, model);
    }
    result.model = std::move(model);
    result.ema = std::move(ema);
    return result;
}

// ---------------------------------------------------------------- evaluation

// Teacher-forced argmax accuracy per timestep over a record set; index t-1
// holds the fraction of positions whose top logit is the recorded code C_t.
inline std::vector<double> per_step_accuracy(const GeneratorModel& model,
                                             const TokenizerModel& tokenizer,
                                             const std::vector<TokenizationRecord>& records) {
    check_geometry(model, tokenizer);
    NoGradGuard ng;
    int T = model.cfg.T;
    std::size_t nd = static_cast<std::size_t>(model.cfg.tokens) * model.cfg.d_code;
    std::vector<double> hits(static_cast<std::size_t>(T), 0.0);
    std::size_t per_step = records.size() * static_cast<std::size_t>(model.cfg.tokens);
    for (const auto& r : records) {
        Rng base(r.noise_seed);
        std::vector<double> acc(nd, 0.0);
        for (int t = 1; t <= T; ++t) {
            Tensor eps = Tensor::from_data({1, model.cfg.tokens, model.cfg.d_code},
                                           base.derive(static_cast<std::uint64_t>(t)).normal_vec(nd));
            Tensor z_prev = Tensor::from_data({1, model.cfg.tokens, model.cfg.d_code}, acc);
            Tensor logits = model.forward(eps, {r.label}, {t}, z_prev);
            const auto& d = logits.data();
            const auto& codes = r.codes[static_cast<std::size_t>(t - 1)];
            for (int i = 0; i < model.cfg.tokens; ++i) {
                const double* row = d.data() + static_cast<std::size_t>(i) * model.cfg.K;
                int best = 0;
                for (int k = 1; k < model.cfg.K; ++k)
                    if (row[k] > row[best]) best = k;
                if (best == codes[static_cast<std::size_t>(i)]) hits[static_cast<std::size_t>(t - 1)] += 1.0;
            }
            auto v = tokenizer.codes_to_vectors(codes);
            for (std::size_t j = 0; j < nd; ++j) acc[j] += v[j];
        }
    }
    for (auto& h : hits) h /= static_cast<double>(per_step);
    return hits;
}

}  // namespace rdpm
