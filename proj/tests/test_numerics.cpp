#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "culb/grad_check.hpp"
#include "culb/rng.hpp"
#include "culb/tensor.hpp"

using namespace culb;

TEST_CASE("rng determinism: identical (seed, stream) reproduce the sequence") {
    RngStream a = seeded_stream(42, 0);
    RngStream b = seeded_stream(42, 0);
    for (int i = 0; i < 100; ++i) REQUIRE(a.normal() == b.normal());
}

TEST_CASE("rng golden sequence pins the algorithm") {
    // Frozen values; any change to the draw path shows up here.
    RngStream r = seeded_stream(1, 2);
    const std::uint64_t want[4] = {357124205462475397ULL, 15296159945869838856ULL,
                                   6205193822626492940ULL, 3397353691662086975ULL};
    for (std::uint64_t w : want) REQUIRE(r.next_u64() == w);

    RngStream n = seeded_stream(42, 0);
    REQUIRE(n.normal() == Catch::Approx(-1.5542235778215319).margin(1e-15));
    REQUIRE(n.normal() == Catch::Approx(-1.0430604487403587).margin(1e-15));
    REQUIRE(n.normal() == Catch::Approx(-1.1374730099440185).margin(1e-15));

    RngStream u = seeded_stream(5, 5);
    REQUIRE(u.uniform() == Catch::Approx(0.62242411317376223).margin(1e-17));
}

TEST_CASE("rng distinct streams differ almost everywhere") {
    RngStream a = seeded_stream(42, 0);
    RngStream b = seeded_stream(42, 1);
    int same = 0;
    for (int i = 0; i < 1000; ++i) same += a.next_u64() == b.next_u64();
    REQUIRE(same <= 10);
}

TEST_CASE("rng normal draws have the right first moments") {
    RngStream r = seeded_stream(42, 0);
    const int n = 100000;
    double sum = 0.0, sum_sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        sum += z;
        sum_sq += z * z;
    }
    REQUIRE(std::abs(sum / n) < 0.02);
    REQUIRE(std::abs(sum_sq / n - 1.0) < 0.05);
}

TEST_CASE("rng uniform_index stays in range and covers values") {
    RngStream r = seeded_stream(9, 9);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 200; ++i) {
        const std::uint64_t v = r.uniform_index(7);
        REQUIRE(v < 7);
        seen.insert(v);
    }
    REQUIRE(seen.size() == 7);
}

TEST_CASE("global_l2_norm basics") {
    SECTION("zeros") {
        std::vector<Tensor> ps{Tensor::zeros({3, 3})};
        REQUIRE(global_l2_norm(ps) == 0.0);
    }
    SECTION("3-4-5") {
        std::vector<Tensor> ps{Tensor::vector({3.0}), Tensor::vector({4.0})};
        REQUIRE(global_l2_norm(ps) == Catch::Approx(5.0));
    }
    SECTION("brute-force recompute on random data") {
        RngStream r = seeded_stream(7, 0);
        Tensor t = Tensor::zeros({100});
        double ss = 0.0;
        for (std::size_t i = 0; i < 100; ++i) {
            t[i] = r.normal();
            ss += t[i] * t[i];
        }
        std::vector<Tensor> ps{t};
        REQUIRE(global_l2_norm(ps) ==
                Catch::Approx(std::sqrt(ss)).epsilon(1e-12));
    }
    SECTION("partition invariance") {
        RngStream r = seeded_stream(8, 0);
        std::vector<double> flat(60);
        for (double& v : flat) v = r.normal();
        std::vector<Tensor> one{Tensor::vector(flat)};
        std::vector<Tensor> split{
            Tensor({2, 3}, std::vector<double>(flat.begin(), flat.begin() + 6)),
            Tensor::vector(std::vector<double>(flat.begin() + 6, flat.begin() + 50)),
            Tensor::vector(std::vector<double>(flat.begin() + 50, flat.end()))};
        REQUIRE(global_l2_norm(one) == Catch::Approx(global_l2_norm(split)).epsilon(1e-14));
    }
    SECTION("errors") {
        std::vector<Tensor> empty;
        REQUIRE_THROWS_AS(global_l2_norm(empty), ValidationError);
        std::vector<Tensor> bad{Tensor::vector({1.0, std::nan("")})};
        REQUIRE_THROWS_AS(global_l2_norm(bad), RuntimeFailure);
    }
}

TEST_CASE("finite_diff_gradient: quadratic, constant, and h validation") {
    SECTION("half squared norm has gradient theta") {
        const std::vector<Tensor> theta{Tensor::vector({1.0, -2.0, 3.0})};
        auto loss = [](const std::vector<Tensor>& p) {
            double s = 0.0;
            for (double v : p[0].data) s += 0.5 * v * v;
            return s;
        };
        const std::vector<Tensor> g = finite_diff_gradient(loss, theta, 1e-5);
        REQUIRE(std::abs(g[0][0] - 1.0) < 1e-8);
        REQUIRE(std::abs(g[0][1] + 2.0) < 1e-8);
        REQUIRE(std::abs(g[0][2] - 3.0) < 1e-8);
    }
    SECTION("constant loss has zero gradient") {
        const std::vector<Tensor> theta{Tensor::vector({0.3, 0.7})};
        auto loss = [](const std::vector<Tensor>&) { return 4.25; };
        const std::vector<Tensor> g = finite_diff_gradient(loss, theta, 1e-5);
        for (double v : g[0].data) REQUIRE(std::abs(v) < 1e-10);
    }
    SECTION("h must be positive") {
        const std::vector<Tensor> theta{Tensor::vector({1.0})};
        auto loss = [](const std::vector<Tensor>&) { return 0.0; };
        REQUIRE_THROWS_AS(finite_diff_gradient(loss, theta, 0.0), ValidationError);
    }
    SECTION("non-finite loss is an error") {
        const std::vector<Tensor> theta{Tensor::vector({1.0})};
        auto loss = [](const std::vector<Tensor>& p) { return std::log(-p[0][0]); };
        REQUIRE_THROWS_AS(finite_diff_gradient(loss, theta, 1e-5), RuntimeFailure);
    }
}

TEST_CASE("tensor invariants") {
    REQUIRE_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), ValidationError);
    REQUIRE_THROWS_AS(Tensor::zeros({0}), ValidationError);
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    REQUIRE(t.at(1, 2) == 6.0);
    REQUIRE(t.numel() == 6);
}
