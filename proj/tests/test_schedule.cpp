#include <doctest.h>

#include <cmath>
#include <random>

#include "guidpaint/error.hpp"
#include "guidpaint/schedule.hpp"

using namespace guidpaint;

TEST_CASE("default T=250 schedule matches an independent product") {
    const auto s = NoiseSchedule::linear(250);
    const long double b0 = 1e-4L * 1000 / 250, b1 = 0.02L * 1000 / 250;
    long double ab = 1.0L;
    for (int t = 1; t <= 250; ++t) {
        const long double beta = b0 + (b1 - b0) * (t - 1) / 249.0L;
        ab *= 1.0L - beta;
        CHECK(s.beta(t) == doctest::Approx(static_cast<double>(beta)).epsilon(1e-14));
        CHECK(std::abs(s.alpha_bar(t) - static_cast<double>(ab)) <= 1e-12 * static_cast<double>(ab));
        if (t > 1) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
    CHECK(s.alpha_bar(250) < 0.01);
    CHECK(s.alpha_bar(0) == 1.0);
}

TEST_CASE("single-step schedule") {
    const auto s = NoiseSchedule::linear(1, 0.5, 0.5);
    CHECK(s.beta(1) == 0.5);
    CHECK(s.alpha_bar(1) == 0.5);
    CHECK(s.tilde_beta(1) == 0.5);
}

TEST_CASE("two-step hand computation") {
    const auto s = NoiseSchedule::linear(2, 0.1, 0.2);
    CHECK(s.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(s.alpha_bar(2) == doctest::Approx(0.72).epsilon(1e-15));
    CHECK(s.tilde_beta(1) == doctest::Approx(0.1));
    CHECK(s.tilde_beta(2) == doctest::Approx(0.1 / 0.28 * 0.2).epsilon(1e-14));
    CHECK(s.tilde_beta(2) == doctest::Approx(0.0714).epsilon(1e-3));
}

TEST_CASE("schedule invariants across lengths") {
    for (int T : {1, 2, 3, 10, 50, 250, 1000, 4000}) {
        CAPTURE(T);
        const auto s = NoiseSchedule::linear(T);
        double prev_beta = 0.0;
        double prod = 1.0;
        for (int t = 1; t <= T; ++t) {
            CHECK(s.beta(t) > 0.0);
            CHECK(s.beta(t) < 1.0);
            CHECK(s.beta(t) >= prev_beta);
            prev_beta = s.beta(t);
            prod *= s.alpha(t);
            CHECK(std::abs(s.alpha_bar(t) - prod) <= 1e-12 * prod);
            CHECK(s.tilde_beta(t) >= 0.0);
            CHECK(s.tilde_beta(t) <= s.beta(t));
            if (t >= 2) {
                const double expect = (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * s.beta(t);
                CHECK(s.tilde_beta(t) == doctest::Approx(expect).epsilon(1e-14));
            }
        }
        CHECK(s.tilde_beta(1) == s.beta(1));
    }
}

TEST_CASE("schedule rejects bad parameters") {
    CHECK_THROWS_AS(NoiseSchedule::linear(0), Error);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.0, 0.1), Error);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.1, 1.0), Error);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.2, 0.1), Error);
    const auto s = NoiseSchedule::linear(10);
    CHECK_THROWS_AS(s.beta(0), Error);
    CHECK_THROWS_AS(s.beta(11), Error);
    CHECK_THROWS_AS(s.alpha_bar(-1), Error);
}

TEST_CASE("short schedules keep beta below one") {
    const auto b = default_beta_bounds(5);
    CHECK(b.end < 1.0);
    CHECK(b.start > 0.0);
    CHECK(b.start <= b.end);
}

TEST_CASE("skip sequence examples") {
    SUBCASE("five-stage configuration at T=250") {
        const auto s = SkipSequence::build(250, {50, 50, 25, 25, 5});
        REQUIRE(s.size() == 155);
        CHECK(s.taus().back() == 250);
        const int expect[] = {50, 50, 25, 25, 5};
        for (int i = 0; i < 5; ++i) {
            const int lo = 50 * i, hi = 50 * (i + 1);
            const auto n = std::count_if(s.taus().begin(), s.taus().end(), [&](int t) { return t > lo && t <= hi; });
            CHECK(n == expect[i]);
            CHECK(s.block(static_cast<std::size_t>(i)) == std::pair<int, int>{lo, hi});
        }
    }
    SUBCASE("full") {
        const auto s = SkipSequence::build(10, {10});
        CHECK(s.taus() == std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
        CHECK(SkipSequence::full(10).taus() == s.taus());
    }
    SUBCASE("two stages") {
        // Blocks (0,5] and (5,10]; ceil(j*5/2) = 3,5 and ceil(j*5/3) = 2,4,5 offset by 5.
        CHECK(SkipSequence::build(10, {2, 3}).taus() == std::vector<int>{3, 5, 7, 9, 10});
    }
}

TEST_CASE("skip sequence rejects impossible stage counts") {
    CHECK_THROWS_AS(SkipSequence::build(10, {}), Error);
    CHECK_THROWS_AS(SkipSequence::build(10, {6, 1}), Error);
    CHECK_THROWS_AS(SkipSequence::build(10, {0, 1}), Error);
    CHECK_THROWS_AS(SkipSequence::build(3, {1, 1, 1, 1}), Error);
}

TEST_CASE("random skip sequences satisfy their invariants") {
    std::mt19937_64 rng(42);
    for (int c = 0; c < 300; ++c) {
        const int T = std::uniform_int_distribution<int>(1, 600)(rng);
        const int n = std::uniform_int_distribution<int>(1, std::min(T, 6))(rng);
        std::vector<int> steps(n);
        for (int i = 0; i < n; ++i) {
            const int len = (i + 1) * T / n - i * T / n;
            steps[i] = std::uniform_int_distribution<int>(1, len)(rng);
        }
        const auto s = SkipSequence::build(T, steps);
        CHECK(s.stage_steps() == steps);
        CHECK(s.taus().back() == T);
        CHECK(std::adjacent_find(s.taus().begin(), s.taus().end(), std::greater_equal<int>()) == s.taus().end());
        int sum = 0;
        for (int x : steps) sum += x;
        CHECK(static_cast<int>(s.size()) == sum);
    }
}

TEST_CASE("schedule spec round-trips through JSON") {
    ScheduleSpec spec;
    spec.T = 100;
    spec.stage_steps = {20, 10};
    const nlohmann::json j = spec;
    const auto back = j.get<ScheduleSpec>();
    CHECK(back.T == 100);
    CHECK(back.stage_steps == spec.stage_steps);
    const auto a = spec.build_schedule(), b = back.build_schedule();
    for (int t = 1; t <= 100; ++t) CHECK(a.beta(t) == b.beta(t));
    CHECK(back.build_skip().taus() == spec.build_skip().taus());
}
