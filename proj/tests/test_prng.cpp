#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "evsel/prng.hpp"

using namespace evsel;

TEST_CASE("splitmix64 reference vectors") {
    std::uint64_t state = 0;
    CHECK(splitmix64(state) == 0xE220A8397B1DCDAFull);
    CHECK(splitmix64(state) == 0x6E789E6AA1B965F4ull);
    CHECK(splitmix64(state) == 0x06C45D188009454Full);
}

TEST_CASE("fnv1a64 reference vectors") {
    CHECK(fnv1a64("") == 0xCBF29CE484222325ull);
    CHECK(fnv1a64("a") == 0xAF63DC4C8601EC8Cull);
}

TEST_CASE("streams are deterministic and tag-separated") {
    Rng a = make_stream(42, stream_tag::bag, 7);
    Rng b = make_stream(42, stream_tag::bag, 7);
    Rng c = make_stream(42, stream_tag::bag, 8);
    for (int i = 0; i < 100; ++i) {
        const std::uint64_t x = a.next_u64();
        CHECK(x == b.next_u64());
        if (i == 0) CHECK(x != c.next_u64());
    }
}

TEST_CASE("uniform and below stay in range") {
    Rng rng(123);
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        const std::uint64_t k = rng.below(7);
        CHECK(k < 7);
    }
}

TEST_CASE("normal draws have sane moments") {
    Rng rng(99);
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        REQUIRE(std::isfinite(x));
        sum += x;
        sq += x * x;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("sample_indices returns k distinct ascending indices") {
    Rng rng(5);
    const auto idx = rng.sample_indices(50, 12);
    REQUIRE(idx.size() == 12);
    std::set<std::uint32_t> seen(idx.begin(), idx.end());
    CHECK(seen.size() == 12);
    for (std::size_t i = 1; i < idx.size(); ++i) CHECK(idx[i - 1] < idx[i]);
    for (auto v : idx) CHECK(v < 50);
}
