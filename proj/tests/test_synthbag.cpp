#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "evsel/dataset_io.hpp"
#include "evsel/linalg.hpp"
#include "evsel/synthbag.hpp"

using namespace evsel;
namespace fs = std::filesystem;

namespace {

GenConfig desk_config() { return GenConfig{}; }

GenConfig tiny_config() {
    GenConfig cfg;
    cfg.num_bags = 24;
    cfg.patches_min = 6;
    cfg.patches_max = 14;
    cfg.feature_dim = 16;
    cfg.num_classes = 2;
    cfg.num_concepts = 4;
    cfg.evidence_min = 2;
    cfg.evidence_max = 4;
    cfg.seed = 7;
    return cfg;
}

fs::path temp_dir(const char* name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    return dir;
}

}  // namespace

TEST_CASE("zero bags still yields a valid anchor bank") {
    GenConfig cfg = tiny_config();
    cfg.num_bags = 0;
    const Dataset ds = generate_dataset(cfg);
    CHECK(ds.bags.empty());
    REQUIRE(ds.bank.count() == cfg.num_concepts);
    for (std::uint32_t m = 0; m < ds.bank.count(); ++m) {
        CHECK(l2norm(ds.bank.anchors.row(m), ds.bank.dim()) == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("invalid ranges are configuration errors") {
    GenConfig cfg = tiny_config();
    cfg.patches_min = 10;
    cfg.patches_max = 5;
    CHECK_THROWS_AS(generate_dataset(cfg), ConfigError);
    cfg = tiny_config();
    cfg.noise_sigma = -0.1;
    CHECK_THROWS_AS(generate_dataset(cfg), ConfigError);
    cfg = tiny_config();
    cfg.feature_dim = 2;  // < num_concepts
    CHECK_THROWS_AS(generate_dataset(cfg), ConfigError);
}

TEST_CASE("anchors are pairwise orthonormal") {
    const Dataset ds = generate_dataset(tiny_config());
    for (std::uint32_t a = 0; a < ds.bank.count(); ++a) {
        for (std::uint32_t b = 0; b < ds.bank.count(); ++b) {
            const double d = dot(ds.bank.anchors.row(a), ds.bank.anchors.row(b), ds.bank.dim());
            CHECK(d == Catch::Approx(a == b ? 1.0 : 0.0).margin(1e-9));
        }
    }
}

TEST_CASE("noiseless construction plants exact prototypes") {
    GenConfig cfg = tiny_config();
    cfg.noise_sigma = 0.0;
    cfg.distractor_rate = 0.0;
    const Dataset ds = generate_dataset(cfg);

    // Every planted patch equals some prototype of the bag's class bitwise
    // (after the f32 cast applied at generation).
    for (const Bag& bag : ds.bags) {
        REQUIRE(!bag.planted.empty());
        for (const std::uint32_t p : bag.planted) {
            bool matched = false;
            for (std::uint32_t m = 0; m < ds.bank.count(); ++m) {
                if (ds.concept_class[m] != bag.label) continue;
                bool same = true;
                for (std::uint32_t f = 0; f < cfg.feature_dim && same; ++f) {
                    same = bag.features(p, f) == static_cast<float>(ds.bank.anchors(m, f));
                }
                if (same) matched = true;
            }
            CHECK(matched);
        }
    }

    // Nearest-centroid on mean evidence features separates classes perfectly.
    std::vector<std::vector<double>> centroids(cfg.num_classes,
                                               std::vector<double>(cfg.feature_dim, 0.0));
    std::vector<int> counts(cfg.num_classes, 0);
    for (const Bag& bag : ds.bags) {
        for (const std::uint32_t p : bag.planted)
            axpy_fd(1.0, bag.features.row(p), centroids[bag.label].data(), cfg.feature_dim);
        counts[bag.label] += static_cast<int>(bag.planted.size());
    }
    for (std::uint32_t c = 0; c < cfg.num_classes; ++c) {
        REQUIRE(counts[c] > 0);
        for (auto& v : centroids[c]) v /= counts[c];
    }
    for (const Bag& bag : ds.bags) {
        std::vector<double> mean(cfg.feature_dim, 0.0);
        for (const std::uint32_t p : bag.planted)
            axpy_fd(1.0, bag.features.row(p), mean.data(), cfg.feature_dim);
        for (auto& v : mean) v /= static_cast<double>(bag.planted.size());
        int best = -1;
        double best_d = 1e300;
        for (std::uint32_t c = 0; c < cfg.num_classes; ++c) {
            double dist = 0.0;
            for (std::uint32_t f = 0; f < cfg.feature_dim; ++f) {
                const double diff = mean[f] - centroids[c][f];
                dist += diff * diff;
            }
            if (dist < best_d) {
                best_d = dist;
                best = static_cast<int>(c);
            }
        }
        CHECK(best == bag.label);
    }
}

TEST_CASE("desk config: planted fraction bounds and replay oracle") {
    const GenConfig cfg = desk_config();
    const Dataset ds = generate_dataset(cfg);
    REQUIRE(ds.bags.size() == cfg.num_bags);

    for (const Bag& bag : ds.bags) {
        const double frac = static_cast<double>(bag.planted.size()) / bag.n();
        CHECK(frac >= 3.0 / 120.0);
        CHECK(frac <= 10.0 / 40.0);
        for (const std::uint32_t p : bag.planted) CHECK(p < bag.n());
    }

    // Replay oracle: regenerating from the seed reproduces every bag exactly.
    const Dataset replay = generate_dataset(cfg);
    REQUIRE(replay.bags.size() == ds.bags.size());
    for (std::size_t i = 0; i < ds.bags.size(); ++i) {
        CHECK(replay.bags[i].planted == ds.bags[i].planted);
        CHECK(replay.bags[i].label == ds.bags[i].label);
        REQUIRE(replay.bags[i].features.data.size() == ds.bags[i].features.data.size());
        CHECK(std::memcmp(replay.bags[i].features.data.data(), ds.bags[i].features.data.data(),
                          ds.bags[i].features.data.size() * sizeof(float)) == 0);
    }
}

TEST_CASE("splits are disjoint, cover all bags, and hash by id") {
    const Dataset ds = generate_dataset(desk_config());
    std::size_t n_train = 0, n_val = 0, n_test = 0;
    for (const Bag& bag : ds.bags) {
        switch (bag.split) {
            case Split::train: ++n_train; break;
            case Split::val: ++n_val; break;
            case Split::test: ++n_test; break;
        }
    }
    CHECK(n_train + n_val + n_test == ds.bags.size());
    CHECK(n_train > n_val);
    CHECK(n_val > 0);
    CHECK(n_test > 0);
}

TEST_CASE("nearest anchor of some planted patch belongs to the bag's class") {
    // Holds by construction for noise_sigma <= 0.5 (desk sigma is 0.3).
    const Dataset ds = generate_dataset(desk_config());
    for (const Bag& bag : ds.bags) {
        bool any = false;
        for (const std::uint32_t p : bag.planted) {
            double self = 0.0;
            for (std::uint32_t f = 0; f < ds.cfg.feature_dim; ++f)
                self += static_cast<double>(bag.features(p, f)) * bag.features(p, f);
            const double denom = std::sqrt(self);
            double best = -2.0;
            int best_anchor = -1;
            for (std::uint32_t m = 0; m < ds.bank.count(); ++m) {
                const double c =
                    dot_fd(bag.features.row(p), ds.bank.anchors.row(m), ds.cfg.feature_dim) /
                    denom;
                if (c > best) {
                    best = c;
                    best_anchor = static_cast<int>(m);
                }
            }
            if (best_anchor >= 0 && ds.concept_class[best_anchor] == bag.label) any = true;
        }
        CHECK(any);
    }
}

TEST_CASE("dataset round trip is bitwise on numeric fields") {
    const fs::path dir = temp_dir("evsel_roundtrip");
    const Dataset ds = generate_dataset(tiny_config());
    write_dataset(ds, dir);
    const Dataset back = read_dataset(dir);

    REQUIRE(back.bags.size() == ds.bags.size());
    for (std::size_t i = 0; i < ds.bags.size(); ++i) {
        const Bag& a = ds.bags[i];
        const Bag& b = back.bags[i];
        CHECK(a.id == b.id);
        CHECK(a.label == b.label);
        CHECK(a.split == b.split);
        CHECK(a.planted == b.planted);
        REQUIRE(a.features.data.size() == b.features.data.size());
        CHECK(std::memcmp(a.features.data.data(), b.features.data.data(),
                          a.features.data.size() * sizeof(float)) == 0);
        CHECK(std::memcmp(a.coords.data.data(), b.coords.data.data(),
                          a.coords.data.size() * sizeof(float)) == 0);
    }
    for (std::uint32_t m = 0; m < ds.bank.count(); ++m) {
        for (std::uint32_t f = 0; f < ds.bank.dim(); ++f) {
            CHECK(back.bank.anchors(m, f) == ds.bank.anchors(m, f));
        }
    }
    fs::remove_all(dir);
}

TEST_CASE("a record with N=0 is a parse error naming the bag") {
    const fs::path dir = temp_dir("evsel_badbag");
    Dataset ds = generate_dataset(tiny_config());
    write_dataset(ds, dir);

    // Rewrite bags.bin with a hand-crafted N=0 record using the documented
    // layout: u32 len | u16 id_len | id | u32 N | u32 d | i32 label | u8 split
    // | u32 n_planted | floats.
    std::string rec;
    auto put32 = [&](std::uint32_t v) { rec.append(reinterpret_cast<const char*>(&v), 4); };
    const std::string id = "bag-broken";
    std::uint16_t idl = static_cast<std::uint16_t>(id.size());
    rec.append(reinterpret_cast<const char*>(&idl), 2);
    rec.append(id);
    put32(0);  // N = 0
    put32(4);  // d
    put32(0);  // label
    rec.push_back('\0');  // split
    put32(0);  // n_planted
    std::string framed;
    const auto len = static_cast<std::uint32_t>(rec.size());
    framed.append(reinterpret_cast<const char*>(&len), 4);
    framed += rec;
    {
        std::ofstream bf(dir / "bags.bin", std::ios::binary | std::ios::trunc);
        bf.write(framed.data(), static_cast<std::streamsize>(framed.size()));
    }
    try {
        read_dataset(dir);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("bag-broken") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("bags without planted sets read back empty") {
    const fs::path dir = temp_dir("evsel_noplanted");
    Dataset ds = generate_dataset(tiny_config());
    for (Bag& bag : ds.bags) bag.planted.clear();
    write_dataset(ds, dir);
    const Dataset back = read_dataset(dir);
    for (const Bag& bag : back.bags) CHECK(bag.planted.empty());
    fs::remove_all(dir);
}

TEST_CASE("concept partition is even and deterministic") {
    const auto owner = assign_concepts_to_classes(8, 4);
    CHECK(owner == std::vector<int>{0, 0, 1, 1, 2, 2, 3, 3});
    const auto owner2 = assign_concepts_to_classes(7, 3);
    CHECK(owner2 == std::vector<int>{0, 0, 0, 1, 1, 2, 2});
}
