#pragma once
// Synthetic bag datasets with planted evidence.
//
// Generative model: M concept prototypes are orthonormalized Gaussian draws in
// feature space; the same vectors form the anchor bank. Classes partition the
// concepts into contiguous, as-even-as-possible blocks. Noise scales are
// relative to the unit prototype norm: sigma is the expected noise NORM, so
// sigma = 0.3 perturbs a prototype by about 30%. A bag of class y holds
//   evidence patches    = prototype of one of y's concepts + sigma * g/sqrt(d)
//   distractor patches  = prototype of a non-y concept + sigma * g/sqrt(d),
//                         drawn per patch with probability distractor_rate
//   background patches  = 0.25 * g / sqrt(d), g ~ N(0, I); expected norm 0.25,
//                         so concept-bearing patches are distinctive the way
//                         informative tissue is against background
// Patch order is shuffled per bag; planted indices track the evidence patches.
// Splits are assigned by hashing the bag id (70/15/15 train/val/test).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "evsel/errors.hpp"
#include "evsel/linalg.hpp"
#include "evsel/prng.hpp"

namespace evsel {

struct GenConfig {
    std::uint32_t num_bags = 600;
    std::uint32_t patches_min = 40;
    std::uint32_t patches_max = 120;
    std::uint32_t feature_dim = 64;
    std::uint32_t num_classes = 4;
    std::uint32_t num_concepts = 8;
    std::uint32_t evidence_min = 3;
    std::uint32_t evidence_max = 10;
    double noise_sigma = 0.3;
    double distractor_rate = 0.1;
    std::uint64_t seed = 42;

    void validate() const {
        if (patches_min < 1 || patches_min > patches_max)
            throw ConfigError("patch range invalid: [" + std::to_string(patches_min) + "," +
                              std::to_string(patches_max) + "]");
        if (evidence_min > evidence_max)
            throw ConfigError("evidence range invalid: [" + std::to_string(evidence_min) + "," +
                              std::to_string(evidence_max) + "]");
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (num_concepts < num_classes)
            throw ConfigError("num_concepts must be >= num_classes so each class owns a concept");
        if (feature_dim < num_concepts) throw ConfigError("feature_dim must be >= num_concepts");
        if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
        if (distractor_rate < 0.0 || distractor_rate > 1.0)
            throw ConfigError("distractor_rate must be in [0,1]");
    }
};

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

struct Bag {
    std::string id;
    MatF features;  // N x d
    MatF coords;    // N x 2, unit square
    int label = 0;
    std::vector<std::uint32_t> planted;  // ascending; may be empty
    Split split = Split::train;

    std::uint32_t n() const { return static_cast<std::uint32_t>(features.rows); }
};

struct AnchorBank {
    MatD anchors;  // M x bridge_dim, unit rows
    std::vector<std::string> names;

    std::uint32_t count() const { return static_cast<std::uint32_t>(anchors.rows); }
    std::uint32_t dim() const { return static_cast<std::uint32_t>(anchors.cols); }
};

struct Dataset {
    GenConfig cfg;
    std::vector<Bag> bags;
    AnchorBank bank;
    std::vector<int> concept_class;  // concept m -> owning class

    std::vector<const Bag*> split_bags(Split s) const {
        std::vector<const Bag*> out;
        for (const auto& b : bags)
            if (b.split == s) out.push_back(&b);
        return out;
    }
};

namespace detail {

// Hash-based split: 70% train, 15% val, 15% test.
inline Split split_of_id(const std::string& id) {
    std::uint64_t h = fnv1a64(id);
    const std::uint64_t bucket = splitmix64(h) % 100;
    if (bucket < 70) return Split::train;
    if (bucket < 85) return Split::val;
    return Split::test;
}

// Gram-Schmidt over seeded Gaussian draws; redraws on (near-)dependence.
inline MatD orthonormal_prototypes(std::uint32_t m, std::uint32_t d, Rng& rng) {
    MatD proto(m, d);
    std::vector<double> v(d);
    for (std::uint32_t i = 0; i < m; ++i) {
        for (;;) {
            for (std::uint32_t f = 0; f < d; ++f) v[f] = rng.normal();
            for (std::uint32_t j = 0; j < i; ++j) {
                const double proj = dot(v.data(), proto.row(j), d);
                axpy(-proj, proto.row(j), v.data(), d);
            }
            const double nrm = l2norm(v.data(), d);
            if (nrm > 1e-8) {
                for (std::uint32_t f = 0; f < d; ++f) proto(i, f) = v[f] / nrm;
                break;
            }
        }
    }
    return proto;
}

}  // namespace detail

// Classes partition concepts into contiguous blocks, larger blocks first.
inline std::vector<int> assign_concepts_to_classes(std::uint32_t num_concepts,
                                                   std::uint32_t num_classes) {
    std::vector<int> owner(num_concepts, 0);
    const std::uint32_t base = num_concepts / num_classes;
    const std::uint32_t rem = num_concepts % num_classes;
    std::uint32_t next = 0;
    for (std::uint32_t c = 0; c < num_classes; ++c) {
        const std::uint32_t take = base + (c < rem ? 1 : 0);
        for (std::uint32_t k = 0; k < take; ++k) owner[next++] = static_cast<int>(c);
    }
    return owner;
}

inline Dataset generate_dataset(const GenConfig& cfg) {
    cfg.validate();

    Dataset ds;
    ds.cfg = cfg;
    ds.concept_class = assign_concepts_to_classes(cfg.num_concepts, cfg.num_classes);

    Rng proto_rng = make_stream(cfg.seed, stream_tag::prototypes);
    const MatD prototypes =
        detail::orthonormal_prototypes(cfg.num_concepts, cfg.feature_dim, proto_rng);

    ds.bank.anchors = prototypes;
    ds.bank.names.reserve(cfg.num_concepts);
    for (std::uint32_t m = 0; m < cfg.num_concepts; ++m)
        ds.bank.names.push_back("concept-" + std::to_string(m));

    // Per-class concept lists for evidence/distractor draws.
    std::vector<std::vector<std::uint32_t>> class_concepts(cfg.num_classes);
    for (std::uint32_t m = 0; m < cfg.num_concepts; ++m)
        class_concepts[static_cast<std::uint32_t>(ds.concept_class[m])].push_back(m);

    ds.bags.reserve(cfg.num_bags);
    for (std::uint32_t bi = 0; bi < cfg.num_bags; ++bi) {
        Rng rng = make_stream(cfg.seed, stream_tag::bag, bi);

        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "bag-%06u", bi);

        Bag bag;
        bag.id = idbuf;
        bag.split = detail::split_of_id(bag.id);

        const auto n = static_cast<std::uint32_t>(
            rng.range(static_cast<std::int64_t>(cfg.patches_min),
                      static_cast<std::int64_t>(cfg.patches_max)));
        bag.label = static_cast<int>(rng.below(cfg.num_classes));
        auto n_evidence = static_cast<std::uint32_t>(
            rng.range(static_cast<std::int64_t>(cfg.evidence_min),
                      static_cast<std::int64_t>(cfg.evidence_max)));
        n_evidence = std::min(n_evidence, n);

        const auto& own = class_concepts[static_cast<std::uint32_t>(bag.label)];
        const std::uint32_t d = cfg.feature_dim;
        const double noise_scale = cfg.noise_sigma / std::sqrt(static_cast<double>(d));
        bag.features = MatF(n, d);

        // Patch roles before shuffling: [0, n_evidence) evidence, rest by draw.
        std::vector<std::uint8_t> is_evidence(n, 0);
        for (std::uint32_t i = 0; i < n; ++i) {
            float* row = bag.features.row(i);
            if (i < n_evidence) {
                is_evidence[i] = 1;
                const std::uint32_t concept_id = own[rng.below(own.size())];
                for (std::uint32_t f = 0; f < d; ++f)
                    row[f] = static_cast<float>(prototypes(concept_id, f) +
                                                noise_scale * rng.normal());
            } else if (rng.uniform() < cfg.distractor_rate && own.size() < cfg.num_concepts) {
                std::uint32_t concept_id;
                do {
                    concept_id = static_cast<std::uint32_t>(rng.below(cfg.num_concepts));
                } while (ds.concept_class[concept_id] == bag.label);
                for (std::uint32_t f = 0; f < d; ++f)
                    row[f] = static_cast<float>(prototypes(concept_id, f) +
                                                noise_scale * rng.normal());
            } else {
                const double bg_scale = 0.25 / std::sqrt(static_cast<double>(d));
                for (std::uint32_t f = 0; f < d; ++f)
                    row[f] = static_cast<float>(bg_scale * rng.normal());
            }
        }

        bag.coords = MatF(n, 2);
        for (std::uint32_t i = 0; i < n; ++i) {
            bag.coords(i, 0) = static_cast<float>(rng.uniform());
            bag.coords(i, 1) = static_cast<float>(rng.uniform());
        }

        // Shuffle patch order so planted indices are scattered.
        std::vector<std::uint32_t> perm(n);
        for (std::uint32_t i = 0; i < n; ++i) perm[i] = i;
        rng.shuffle(perm);

        MatF shuffled_feat(n, d);
        MatF shuffled_coords(n, 2);
        for (std::uint32_t dst = 0; dst < n; ++dst) {
            const std::uint32_t src = perm[dst];
            std::copy(bag.features.row(src), bag.features.row(src) + d, shuffled_feat.row(dst));
            shuffled_coords(dst, 0) = bag.coords(src, 0);
            shuffled_coords(dst, 1) = bag.coords(src, 1);
            if (is_evidence[src]) bag.planted.push_back(dst);
        }
        std::sort(bag.planted.begin(), bag.planted.end());
        bag.features = std::move(shuffled_feat);
        bag.coords = std::move(shuffled_coords);

        ds.bags.push_back(std::move(bag));
    }
    return ds;
}

}  // namespace evsel
