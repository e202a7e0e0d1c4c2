#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "rdpm/generator.hpp"
#include "rdpm/grad_check.hpp"

using namespace rdpm;

namespace {

GeneratorConfig tiny_gen_config() {
    GeneratorConfig cfg;
    cfg.depth = 1;
    cfg.K = 5;
    cfg.d_code = 4;
    cfg.tokens = 4;
    cfg.T = 3;
    cfg.num_classes = 4;
    return cfg;
}

TokenizerConfig tiny_tok_config() {
    TokenizerConfig cfg;
    cfg.image_size = 8;
    cfg.ratio = 2;
    cfg.K = 8;
    cfg.d_code = 4;
    cfg.base_channels = 4;
    cfg.res_blocks = 1;
    cfg.T = 2;
    cfg.schedule_kind = ScheduleKind::Linear;
    return cfg;
}

GeneratorConfig matching_gen_config(const TokenizerConfig& tok, int depth = 1) {
    GeneratorConfig cfg;
    cfg.depth = depth;
    cfg.K = tok.K;
    cfg.d_code = tok.d_code;
    cfg.tokens = tok.tokens();
    cfg.T = tok.T;
    cfg.num_classes = 4;
    return cfg;
}

// synthetic records with arbitrary but deterministic codes
std::vector<TokenizationRecord> random_records(const GeneratorConfig& cfg, int n,
                                               std::uint64_t seed) {
    Rng rng(seed);
    std::vector<TokenizationRecord> out;
    for (int i = 0; i < n; ++i) {
        TokenizationRecord r;
        r.T = cfg.T;
        r.h = 1;
        r.w = cfg.tokens;
        r.noise_seed = rng.next_u64();
        r.label = static_cast<int>(rng.next_index(static_cast<std::uint64_t>(cfg.num_classes)));
        for (int t = 0; t < cfg.T; ++t) {
            std::vector<std::uint16_t> grid(static_cast<std::size_t>(cfg.tokens));
            for (auto& c : grid)
                c = static_cast<std::uint16_t>(rng.next_index(static_cast<std::uint64_t>(cfg.K)));
            r.codes.push_back(std::move(grid));
        }
        out.push_back(std::move(r));
    }
    return out;
}

// chi-square upper critical values at alpha = 0.01
double chi2_crit_01(int df) {
    switch (df) {
        case 1: return 6.635;
        case 2: return 9.210;
        case 3: return 11.345;
        case 4: return 13.277;
        case 7: return 18.475;
    }
    FAIL("no tabulated critical value for df " + std::to_string(df));
    return 0.0;
}

}  // namespace

TEST_CASE("generator forward shape and size rule") {
    Rng rng(1);
    GeneratorConfig cfg = tiny_gen_config();
    cfg.depth = 2;
    CHECK(cfg.hidden() == 128);
    CHECK(cfg.heads() == 2);
    GeneratorModel model(cfg, rng);
    Tensor eps = Tensor::randn({3, cfg.tokens, cfg.d_code}, rng);
    Tensor z = Tensor::zeros({3, cfg.tokens, cfg.d_code});
    Tensor logits = model.forward(eps, {0, 1, cfg.null_label()}, {1, 2, 3}, z);
    REQUIRE(logits.shape() == Shape{3, cfg.tokens, cfg.K});
    for (std::size_t i = 0; i < logits.numel(); ++i) CHECK(std::isfinite(logits.at(i)));
}

TEST_CASE("zero-init identity: logits independent of y and t") {
    Rng rng(2);
    GeneratorModel model(tiny_gen_config(), rng);
    Tensor eps = Tensor::randn({1, 4, 4}, rng);
    Tensor z = Tensor::randn({1, 4, 4}, rng);
    Tensor a = predict_step(model, eps, 0, 1, z);
    Tensor b = predict_step(model, eps, 3, 1, z);
    Tensor c = predict_step(model, eps, 0, 3, z);
    double max_d = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        max_d = std::max(max_d, std::abs(a.at(i) - b.at(i)));
        max_d = std::max(max_d, std::abs(a.at(i) - c.at(i)));
    }
    CHECK(max_d == 0.0);
}

TEST_CASE("forward determinism and argument validation") {
    Rng rng(3);
    GeneratorModel model(tiny_gen_config(), rng);
    Tensor eps = Tensor::randn({1, 4, 4}, rng);
    Tensor z = Tensor::randn({1, 4, 4}, rng);
    Tensor a = predict_step(model, eps, 1, 2, z);
    Tensor b = predict_step(model, eps, 1, 2, z);
    for (std::size_t i = 0; i < a.numel(); ++i) REQUIRE(a.at(i) == b.at(i));

    CHECK_THROWS_AS(predict_step(model, eps, 1, 0, z), std::invalid_argument);
    CHECK_THROWS_AS(predict_step(model, eps, 1, 4, z), std::invalid_argument);
    CHECK_THROWS_AS(predict_step(model, eps, -1, 1, z), std::invalid_argument);
    CHECK_THROWS_AS(predict_step(model, eps, 5, 1, z), std::invalid_argument);
    Tensor bad = Tensor::randn({1, 3, 4}, rng);
    CHECK_THROWS_AS(model.forward(bad, {0}, {1}, bad), ShapeError);
}

TEST_CASE("generator loss values") {
    // uniform logits: loss is exactly ln K
    Tensor uniform = Tensor::zeros({1, 4, 5});
    Tensor l = generator_loss(uniform, {0, 1, 2, 3});
    CHECK_THAT(l.value(), Catch::Matchers::WithinAbs(std::log(5.0), 1e-12));

    // saturated margin on the target
    std::vector<double> big(2 * 3, 0.0);
    big[1] = 50.0;
    big[3 + 2] = 50.0;
    Tensor sat = Tensor::from_data({1, 2, 3}, big);
    CHECK(generator_loss(sat, {1, 2}).value() < 1e-15);

    // hand-computed 2-position K=3 instance
    std::vector<double> v{0.3, -1.1, 0.7, 2.0, 0.1, -0.4};
    Tensor t = Tensor::from_data({1, 2, 3}, v);
    auto nll = [&](int pos, int target) {
        double m = std::max({v[pos * 3], v[pos * 3 + 1], v[pos * 3 + 2]});
        double z = 0.0;
        for (int k = 0; k < 3; ++k) z += std::exp(v[pos * 3 + k] - m);
        return -(v[pos * 3 + target] - m - std::log(z));
    };
    double want = 0.5 * (nll(0, 2) + nll(1, 0));
    CHECK_THAT(generator_loss(t, {2, 0}).value(), Catch::Matchers::WithinAbs(want, 1e-12));
}

TEST_CASE("cfg_combine identities") {
    Tensor c = Tensor::from_data({2}, {2.0, 0.0});
    Tensor u = Tensor::from_data({2}, {1.0, 0.0});

    Tensor zero = cfg_combine(c, u, 0.0);
    CHECK(zero.at(0) == 2.0);
    CHECK(zero.at(1) == 0.0);

    Tensor same = cfg_combine(c, c, 7.5);
    CHECK(same.at(0) == 2.0);
    CHECK(same.at(1) == 0.0);

    Tensor one = cfg_combine(c, u, 1.0);
    CHECK(one.at(0) == 3.0);
    CHECK(one.at(1) == 0.0);

    Tensor wide = Tensor::zeros({3});
    CHECK_THROWS_AS(cfg_combine(c, wide, 1.0), ShapeError);
}

TEST_CASE("sample_codes argmax paths") {
    SamplerConfig cfg;
    cfg.use_gumbel = false;
    Rng rng(4);
    Tensor logits = Tensor::from_data({1, 1, 3}, {5.0, 1.0, 1.0});
    CHECK(sample_codes(logits, cfg, rng) == std::vector<int>{0});

    cfg.tau = 0.0;
    CHECK_THROWS_AS(sample_codes(logits, cfg, rng), std::invalid_argument);

    // huge temperature drowns the Gumbel noise on well-separated logits
    cfg.use_gumbel = true;
    cfg.tau = 1e6;
    for (int i = 0; i < 50; ++i)
        CHECK(sample_codes(logits, cfg, rng) == std::vector<int>{0});
}

TEST_CASE("cfg lambda=0 leaves the sampled codes unchanged") {
    Rng rng(5);
    Tensor c = Tensor::randn({1, 6, 4}, rng);
    Tensor u = Tensor::randn({1, 6, 4}, rng);
    SamplerConfig cfg;
    cfg.tau = 0.7;
    Rng s1(99), s2(99);
    CHECK(sample_codes(cfg_combine(c, u, 0.0), cfg, s1) == sample_codes(c, cfg, s2));
}

TEST_CASE("Gumbel-max draws follow softmax(tau * logits)") {
    struct Case {
        std::vector<double> logits;
        double tau;
    };
    std::vector<Case> cases{{{0.5, -0.3, 1.2}, 1.0},
                            {{2.0, 2.0, 2.0}, 0.5},
                            {{-1.0, 0.0, 1.0}, 2.0}};
    int draws = 100000;
    Rng rng(6);
    for (const auto& cs : cases) {
        int K = static_cast<int>(cs.logits.size());
        SamplerConfig cfg;
        cfg.tau = cs.tau;
        Tensor logits = Tensor::from_data({1, 1, K}, cs.logits);
        std::vector<int> counts(static_cast<std::size_t>(K), 0);
        for (int i = 0; i < draws; ++i)
            ++counts[static_cast<std::size_t>(sample_codes(logits, cfg, rng)[0])];

        std::vector<double> p(static_cast<std::size_t>(K));
        double z = 0.0;
        for (int k = 0; k < K; ++k) z += std::exp(cs.tau * cs.logits[static_cast<std::size_t>(k)]);
        for (int k = 0; k < K; ++k)
            p[static_cast<std::size_t>(k)] = std::exp(cs.tau * cs.logits[static_cast<std::size_t>(k)]) / z;

        double chi2 = 0.0;
        for (int k = 0; k < K; ++k) {
            double expect = p[static_cast<std::size_t>(k)] * draws;
            double d = counts[static_cast<std::size_t>(k)] - expect;
            chi2 += d * d / expect;
        }
        INFO("tau " << cs.tau << " chi2 " << chi2);
        CHECK(chi2 < chi2_crit_01(K - 1));
    }
}

TEST_CASE("teacher-forcing loss matches a scalar recomputation") {
    Rng rng(7);
    GeneratorConfig cfg = tiny_gen_config();
    GeneratorModel model(cfg, rng);
    // move off the zero init so the logits are nontrivial
    for (auto& [name, p] : model.params.items)
        for (auto& v : p.mutable_data()) v += 0.05 * rng.normal();

    Tensor eps = Tensor::randn({2, cfg.tokens, cfg.d_code}, rng);
    Tensor z = Tensor::randn({2, cfg.tokens, cfg.d_code}, rng);
    std::vector<int> targets{1, 0, 4, 2, 3, 3, 0, 1};
    Tensor logits = model.forward(eps, {0, 2}, {1, 3}, z);
    double loss = generator_loss(logits, targets).value();

    double manual = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        double m = logits.at(i * cfg.K);
        for (int k = 1; k < cfg.K; ++k) m = std::max(m, logits.at(i * cfg.K + static_cast<std::size_t>(k)));
        double zsum = 0.0;
        for (int k = 0; k < cfg.K; ++k) zsum += std::exp(logits.at(i * cfg.K + static_cast<std::size_t>(k)) - m);
        manual -= logits.at(i * cfg.K + static_cast<std::size_t>(targets[i])) - m - std::log(zsum);
    }
    manual /= static_cast<double>(targets.size());
    CHECK_THAT(loss, Catch::Matchers::WithinAbs(manual, 1e-10));
}

TEST_CASE("generator end-to-end gradient check") {
    Rng rng(8);
    GeneratorConfig cfg = tiny_gen_config();  // depth 1, hidden 64
    GeneratorModel model(cfg, rng);
    // zero-init gates block every upstream gradient; perturb all params so
    // the check exercises the full graph
    for (auto& [name, p] : model.params.items)
        for (auto& v : p.mutable_data()) v += 0.1 * rng.normal();

    Tensor eps = Tensor::randn({2, cfg.tokens, cfg.d_code}, rng);
    Tensor z = Tensor::randn({2, cfg.tokens, cfg.d_code}, rng);
    std::vector<int> ys{1, cfg.null_label()};
    std::vector<int> ts{1, 3};
    std::vector<int> targets{1, 0, 4, 2, 3, 3, 0, 1};
    auto run_loss = [&](Tensor&) {
        return generator_loss(model.forward(eps, ys, ts, z), targets);
    };
    for (const char* pname :
         {"input_proj.w", "pos_emb", "t_emb", "y_emb", "block0.qkv.w", "block0.proj.b",
          "block0.fc1.w", "block0.mod.w", "final.mod.w", "head.w"}) {
        const Tensor* p = model.params.find(pname);
        REQUIRE(p != nullptr);
        Tensor pt = *p;
        auto rep = grad_check(run_loss, pt, 1e-5, 1e-4, 12);
        INFO(pname << " max rel err " << rep.max_rel_err);
        CHECK(rep.pass);
    }
}

TEST_CASE("training drives the loss below the uniform baseline") {
    GeneratorConfig cfg;
    cfg.depth = 2;
    cfg.K = 8;
    cfg.d_code = 4;
    cfg.tokens = 16;
    cfg.T = 2;
    auto records = random_records(cfg, 16, 11);

    TokenizerConfig tok_cfg = tiny_tok_config();
    Rng trng(12);
    TokenizerModel tok(tok_cfg, trng);

    GeneratorTrainConfig train;
    train.epochs = 40;
    train.lr = 1e-3;
    train.warmup_steps = 5;
    train.all_steps = true;
    std::vector<double> losses;
    auto result = train_generator(records, tok, cfg, train, 13,
                                  [&](const GeneratorEpochStats& s, GeneratorModel&) {
                                      losses.push_back(s.loss);
                                  });
    REQUIRE(losses.size() == 40);
    CHECK(losses.front() <= std::log(8.0) + 1e-9);
    CHECK(losses.back() < std::log(8.0) - 0.1);
    CHECK(losses.back() < losses.front());
}

TEST_CASE("single-record memorization reaches high teacher-forced accuracy") {
    TokenizerConfig tok_cfg = tiny_tok_config();
    Rng trng(14);
    TokenizerModel tok(tok_cfg, trng);
    Rng irng(15);
    LabeledImage img;
    img.height = img.width = 8;
    img.label = 2;
    img.pixels.resize(8 * 8 * 3);
    for (auto& p : img.pixels) p = irng.uniform();
    std::vector<TokenizationRecord> records{tok.tokenize(img, 555)};

    GeneratorConfig cfg = matching_gen_config(tok_cfg, /*depth=*/2);
    GeneratorTrainConfig train;
    train.epochs = 60;
    train.lr = 2e-3;
    train.warmup_steps = 5;
    train.all_steps = true;
    train.cond_dropout = 0.0;
    auto result = train_generator(records, tok, cfg, train, 16);
    auto acc = per_step_accuracy(result.model, tok, records);
    REQUIRE(static_cast<int>(acc.size()) == cfg.T);
    for (double a : acc) CHECK(a >= 0.99);
}

TEST_CASE("condition dropout frequency is close to one tenth") {
    GeneratorConfig cfg;
    cfg.depth = 1;
    cfg.K = 4;
    cfg.d_code = 2;
    cfg.tokens = 4;
    cfg.T = 1;
    auto records = random_records(cfg, 100, 17);

    TokenizerConfig tok_cfg = tiny_tok_config();
    tok_cfg.d_code = 2;
    tok_cfg.K = 4;
    tok_cfg.ratio = 4;  // 8/4 = 2 -> 4 tokens
    tok_cfg.T = 1;
    Rng trng(18);
    TokenizerModel tok(tok_cfg, trng);

    GeneratorTrainConfig train;
    train.epochs = 100;  // 100 records x 100 epochs = 10k dropout draws
    train.lr = 1e-4;
    double dropped = 0.0;
    train_generator(records, tok, cfg, train, 19,
                    [&](const GeneratorEpochStats& s, GeneratorModel&) {
                        dropped += s.null_fraction;
                    });
    double freq = dropped / 100.0;
    INFO("dropout frequency " << freq);
    CHECK_THAT(freq, Catch::Matchers::WithinAbs(0.1, 0.01));
}

TEST_CASE("EMA converges to frozen raw weights") {
    Params ps;
    Rng rng(20);
    ps.add("p", Tensor::randn({8}, rng, 1.0, true));
    Ema ema;
    ema.decay = 0.9;
    ema.init(ps);
    for (auto& v : ps.items[0].second.mutable_data()) v = 3.0;
    for (int i = 0; i < 400; ++i) ema.update(ps);
    for (double s : ema.shadow[0]) CHECK_THAT(s, Catch::Matchers::WithinAbs(3.0, 1e-12));
}

TEST_CASE("generate runs 2T forwards with CFG and is deterministic") {
    TokenizerConfig tok_cfg = tiny_tok_config();
    Rng trng(21);
    TokenizerModel tok(tok_cfg, trng);
    Rng grng(22);
    GeneratorModel model(matching_gen_config(tok_cfg), grng);

    SamplerConfig cfg;
    cfg.T = tok_cfg.T;
    cfg.lambda_max = 2.0;
    cfg.seed = 77;
    long long before = model.forward_count;
    auto a = generate(model, tok, 1, cfg);
    CHECK(model.forward_count - before == 2 * cfg.T);

    before = model.forward_count;
    cfg.lambda_max = 0.0;
    auto b = generate(model, tok, 1, cfg);
    CHECK(model.forward_count - before == cfg.T);

    auto c = generate(model, tok, 1, cfg);
    REQUIRE(b.image.pixels.size() == c.image.pixels.size());
    for (std::size_t i = 0; i < b.image.pixels.size(); ++i)
        REQUIRE(b.image.pixels[i] == c.image.pixels[i]);
    CHECK(b.codes == c.codes);

    // geometry mismatch fails before any compute
    GeneratorConfig bad = matching_gen_config(tok_cfg);
    bad.K = tok_cfg.K + 1;
    Rng brng(23);
    GeneratorModel bad_model(bad, brng);
    CHECK_THROWS_AS(generate(bad_model, tok, 0, cfg), std::invalid_argument);
}
