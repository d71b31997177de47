#include "testing.hpp"

#include "detok/corruption.hpp"
#include "detok/rng.hpp"

using namespace detok;

TEST_CASE("interpolate_noise: tau=0 returns input bitwise") {
    RngStreams rng(1);
    auto x = torch::randn({4, 16, 8}, rng.model);
    CorruptionConfig cfg;
    auto out = interpolate_noise(x, torch::zeros({4}), cfg, rng.noise);
    CHECK(torch::equal(out, x));
}

TEST_CASE("interpolate_noise: tau=1 gamma=3 is pure noise with std 3") {
    RngStreams rng(2);
    auto x = torch::randn({64, 256, 64}, rng.model);  // >= 1e6 elements
    CorruptionConfig cfg;
    cfg.gamma = 3.0;
    auto out = interpolate_noise(x, torch::ones({64}), cfg, rng.noise);
    double std = out.std().item<double>();
    CHECK(std == doctest::Approx(3.0).epsilon(0.01));
    // statistically independent of the input
    auto corr = (out.flatten() * x.flatten()).mean() / (out.std() * x.std());
    CHECK(std::abs(corr.item<double>()) < 0.01);
}

TEST_CASE("interpolate_noise: variance law (1-tau)^2 var + tau^2 gamma^2") {
    RngStreams rng(3);
    auto x = torch::randn({64, 256, 64}, rng.model);
    CorruptionConfig cfg;
    cfg.gamma = 2.0;
    auto tau = 0.5 * torch::ones({64});
    auto out = interpolate_noise(x, tau, cfg, rng.noise);
    // analytic: 0.25 * 1 + 0.25 * 4 = 1.25
    CHECK(out.var().item<double>() == doctest::Approx(1.25).epsilon(0.01));

    SUBCASE("additive mode: var(x) + tau^2 gamma^2") {
        cfg.additive_mode = true;
        auto out_add = interpolate_noise(x, tau, cfg, rng.noise);
        CHECK(out_add.var().item<double>() == doctest::Approx(2.0).epsilon(0.01));
    }
}

TEST_CASE("interpolate_noise: rejects bad inputs") {
    RngStreams rng(4);
    auto x = torch::randn({2, 4, 4}, rng.model);
    CorruptionConfig cfg;
    CHECK_THROWS(interpolate_noise(x, torch::full({2}, 1.5), cfg, rng.noise));
    CHECK_THROWS(interpolate_noise(x, torch::full({2}, -0.1), cfg, rng.noise));
    auto bad = x.clone();
    bad[0][0][0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS(interpolate_noise(bad, torch::zeros({2}), cfg, rng.noise));
    CorruptionConfig bad_cfg;
    bad_cfg.gamma = -1.0;
    CHECK_THROWS(interpolate_noise(x, torch::zeros({2}), bad_cfg, rng.noise));
}

TEST_CASE("sample_noise_level: determinism and U(0,1) moments") {
    auto g1 = make_generator(77);
    auto g2 = make_generator(77);
    CHECK(torch::equal(sample_noise_level(16, g1), sample_noise_level(16, g2)));

    auto g = make_generator(5);
    auto draws = sample_noise_level(1000000, g);
    CHECK(draws.mean().item<double>() == doctest::Approx(0.5).epsilon(0.004));
    CHECK(draws.min().item<double>() >= 0.0);
    CHECK(draws.max().item<double>() <= 1.0);

    auto single = sample_noise_level(1, g);
    CHECK(single.numel() == 1);
    CHECK(single.item<double>() >= 0.0);
    CHECK(single.item<double>() <= 1.0);
}

TEST_CASE("sample_mask_ratio: M=0 always 0") {
    auto g = make_generator(6);
    CorruptionConfig cfg;
    cfg.max_mask_ratio = 0.0;
    for (int i = 0; i < 100; ++i) {
        CHECK(sample_mask_ratio(cfg, g) == 0.0);
    }
}

TEST_CASE("sample_mask_ratio: P(m=0) and E[m] at M=0.7 match the analytic oracle") {
    auto g = make_generator(7);
    CorruptionConfig cfg;
    cfg.max_mask_ratio = 0.7;
    const int64_t n = 1000000;
    int64_t zeros = 0;
    double sum = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double m = sample_mask_ratio(cfg, g);
        if (m == 0.0) ++zeros;
        sum += m;
    }
    // P(m=0) = 0.1 / 0.8, E[m] = M^2 / (2 (M - bias))
    CHECK(static_cast<double>(zeros) / n == doctest::Approx(0.125).epsilon(0.04));
    CHECK(std::abs(static_cast<double>(zeros) / n - 0.125) < 0.005);
    CHECK(std::abs(sum / n - 0.30625) < 0.003);
}

TEST_CASE("sample_mask_ratio: bounded in [0, M] for all M in {0, 0.1, ..., 1.0}") {
    auto g = make_generator(8);
    for (int k = 0; k <= 10; ++k) {
        CorruptionConfig cfg;
        cfg.max_mask_ratio = 0.1 * k;
        for (int i = 0; i < 2000; ++i) {
            double m = sample_mask_ratio(cfg, g);
            CHECK(m >= 0.0);
            CHECK(m <= cfg.max_mask_ratio + 1e-12);
        }
    }
}

TEST_CASE("sample_mask: ratio=0 keeps everything with identity restore") {
    auto g = make_generator(9);
    auto plan = sample_mask(3, 8, 0.0, g);
    CHECK(plan.n_visible() == 8);
    auto identity = torch::arange(8, torch::kInt64).unsqueeze(0).expand({3, 8});
    CHECK(torch::equal(plan.visible_indices, identity));
    CHECK(torch::equal(plan.restore_permutation, identity));
}

TEST_CASE("sample_mask: 256 tokens at ratio 0.75 leaves 64 visible") {
    auto g = make_generator(10);
    auto plan = sample_mask(2, 256, 0.75, g);
    CHECK(plan.n_visible() == 64);
}

TEST_CASE("sample_mask: restore permutation inverts the shuffle (brute force small n)") {
    auto g = make_generator(11);
    for (int64_t n = 1; n <= 8; ++n) {
        for (double ratio : {0.0, 0.25, 0.5, 0.8}) {
            auto plan = sample_mask(4, n, ratio, g);
            // rebuild shuffled order = [visible | masked] by brute force, then restore
            for (int64_t b = 0; b < 4; ++b) {
                std::vector<int64_t> shuffled;
                std::vector<bool> vis(n, false);
                for (int64_t j = 0; j < plan.n_visible(); ++j) {
                    int64_t id = plan.visible_indices[b][j].item<int64_t>();
                    shuffled.push_back(id);
                    vis[id] = true;
                }
                for (int64_t i = 0; i < n; ++i) {
                    if (!vis[i]) shuffled.push_back(i);
                }
                for (int64_t i = 0; i < n; ++i) {
                    int64_t r = plan.restore_permutation[b][i].item<int64_t>();
                    CHECK(shuffled[r] == i);
                }
            }
        }
    }
}

TEST_CASE("sample_mask: restore composed with shuffle is identity for n in [1, 64]") {
    auto g = make_generator(12);
    for (int64_t n = 1; n <= 64; ++n) {
        auto plan = sample_mask(1, n, 0.5, g);
        auto tokens = torch::arange(n, torch::kInt64);
        auto visible = tokens.index_select(0, plan.visible_indices[0]);
        auto mask = torch::ones({n}, torch::kBool);
        mask.scatter_(0, plan.visible_indices[0], false);
        auto masked = tokens.masked_select(mask);
        auto shuffled = torch::cat({visible, masked});
        auto restored = shuffled.index_select(0, plan.restore_permutation[0]);
        CHECK(torch::equal(restored, tokens));
    }
}

TEST_CASE("rng streams: disabling one corruption does not shift the others") {
    CorruptionConfig cfg;
    RngStreams a(42), b(42);
    // consume the noise stream only in run "a"
    auto x = torch::randn({2, 4, 4}, a.model);
    (void)interpolate_noise(x, torch::full({2}, 0.5), cfg, a.noise);
    auto ma = sample_mask_ratio(cfg, a.mask);
    auto mb = sample_mask_ratio(cfg, b.mask);
    CHECK(ma == mb);
    CHECK(torch::equal(sample_noise_level(8, a.tau), sample_noise_level(8, b.tau)));
}
