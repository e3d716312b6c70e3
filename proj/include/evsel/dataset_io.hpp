#pragma once
// Dataset directory layout:
//   meta.json  - config echo, anchor matrix, concept->class map (UTF-8 JSON)
//   bags.bin   - one length-prefixed little-endian record per bag
//   index.tsv  - "<bag id>\t<byte offset>\t<N>" per bag
//
// Record layout (all integers little-endian):
//   u32 payload_len            bytes after this field
//   u16 id_len, id bytes
//   u32 N, u32 d, i32 label, u8 split
//   u32 n_planted, u32 planted[n_planted]
//   f32 features[N*d], f32 coords[N*2]
//
// The float payload is stored bit-exactly, so read(write(ds)) reproduces every
// numeric field without rounding.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "evsel/errors.hpp"
#include "evsel/synthbag.hpp"

namespace evsel {

namespace ioetail {

static_assert(std::endian::native == std::endian::little,
              "big-endian hosts need byte swaps in dataset_io");

template <typename T>
void put(std::string& buf, T v) {
    char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    buf.append(tmp, sizeof(T));
}

template <typename T>
T get(const char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

}  // namespace ioetail

inline nlohmann::json gen_config_to_json(const GenConfig& cfg) {
    return {{"num_bags", cfg.num_bags},
            {"patches_min", cfg.patches_min},
            {"patches_max", cfg.patches_max},
            {"feature_dim", cfg.feature_dim},
            {"num_classes", cfg.num_classes},
            {"num_concepts", cfg.num_concepts},
            {"evidence_min", cfg.evidence_min},
            {"evidence_max", cfg.evidence_max},
            {"noise_sigma", cfg.noise_sigma},
            {"distractor_rate", cfg.distractor_rate},
            {"seed", cfg.seed}};
}

inline GenConfig gen_config_from_json(const nlohmann::json& j) {
    GenConfig cfg;
    cfg.num_bags = j.at("num_bags").get<std::uint32_t>();
    cfg.patches_min = j.at("patches_min").get<std::uint32_t>();
    cfg.patches_max = j.at("patches_max").get<std::uint32_t>();
    cfg.feature_dim = j.at("feature_dim").get<std::uint32_t>();
    cfg.num_classes = j.at("num_classes").get<std::uint32_t>();
    cfg.num_concepts = j.at("num_concepts").get<std::uint32_t>();
    cfg.evidence_min = j.at("evidence_min").get<std::uint32_t>();
    cfg.evidence_max = j.at("evidence_max").get<std::uint32_t>();
    cfg.noise_sigma = j.at("noise_sigma").get<double>();
    cfg.distractor_rate = j.at("distractor_rate").get<double>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);

    nlohmann::json meta;
    meta["schema_version"] = 1;
    meta["config"] = gen_config_to_json(ds.cfg);
    meta["concept_class"] = ds.concept_class;
    meta["anchor_names"] = ds.bank.names;
    nlohmann::json anchors = nlohmann::json::array();
    for (std::uint32_t m = 0; m < ds.bank.count(); ++m) {
        nlohmann::json row = nlohmann::json::array();
        for (std::uint32_t f = 0; f < ds.bank.dim(); ++f) row.push_back(ds.bank.anchors(m, f));
        anchors.push_back(std::move(row));
    }
    meta["anchors"] = std::move(anchors);
    meta["num_bags"] = ds.bags.size();
    {
        std::ofstream mf(dir / "meta.json", std::ios::binary);
        if (!mf) throw ParseError("cannot write " + (dir / "meta.json").string());
        mf << meta.dump(2) << "\n";
    }

    std::ofstream bf(dir / "bags.bin", std::ios::binary);
    std::ofstream xf(dir / "index.tsv", std::ios::binary);
    if (!bf || !xf) throw ParseError("cannot write dataset files in " + dir.string());

    std::uint64_t offset = 0;
    std::string rec;
    for (const Bag& bag : ds.bags) {
        rec.clear();
        ioetail::put<std::uint16_t>(rec, static_cast<std::uint16_t>(bag.id.size()));
        rec.append(bag.id);
        ioetail::put<std::uint32_t>(rec, bag.n());
        ioetail::put<std::uint32_t>(rec, static_cast<std::uint32_t>(bag.features.cols));
        ioetail::put<std::int32_t>(rec, bag.label);
        ioetail::put<std::uint8_t>(rec, static_cast<std::uint8_t>(bag.split));
        ioetail::put<std::uint32_t>(rec, static_cast<std::uint32_t>(bag.planted.size()));
        for (std::uint32_t p : bag.planted) ioetail::put<std::uint32_t>(rec, p);
        for (float v : bag.features.data) ioetail::put<float>(rec, v);
        for (float v : bag.coords.data) ioetail::put<float>(rec, v);

        std::string framed;
        ioetail::put<std::uint32_t>(framed, static_cast<std::uint32_t>(rec.size()));
        framed += rec;
        bf.write(framed.data(), static_cast<std::streamsize>(framed.size()));

        xf << bag.id << '\t' << offset << '\t' << bag.n() << '\n';
        offset += framed.size();
    }
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "meta.json", std::ios::binary);
    if (!mf) throw ParseError("missing " + (dir / "meta.json").string());
    nlohmann::json meta;
    try {
        mf >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("meta.json: " + std::string(e.what()));
    }

    Dataset ds;
    try {
        ds.cfg = gen_config_from_json(meta.at("config"));
        ds.concept_class = meta.at("concept_class").get<std::vector<int>>();
        ds.bank.names = meta.at("anchor_names").get<std::vector<std::string>>();
        const auto& anchors = meta.at("anchors");
        const std::size_t m = anchors.size();
        const std::size_t bd = m > 0 ? anchors.at(0).size() : ds.cfg.feature_dim;
        ds.bank.anchors = MatD(m, bd);
        for (std::size_t i = 0; i < m; ++i) {
            const auto& row = anchors.at(i);
            if (row.size() != bd) throw ParseError("meta.json: ragged anchor matrix");
            for (std::size_t f = 0; f < bd; ++f) ds.bank.anchors(i, f) = row.at(f).get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("meta.json: " + std::string(e.what()));
    }

    std::ifstream bf(dir / "bags.bin", std::ios::binary);
    if (!bf) throw ParseError("missing " + (dir / "bags.bin").string());
    std::ostringstream ss;
    ss << bf.rdbuf();
    const std::string blob = ss.str();

    const std::uint64_t expect = meta.value("num_bags", std::uint64_t{0});
    std::size_t pos = 0;
    while (pos < blob.size()) {
        if (pos + 4 > blob.size()) throw ParseError("bags.bin: truncated length prefix");
        const auto len = ioetail::get<std::uint32_t>(blob.data() + pos);
        pos += 4;
        if (pos + len > blob.size()) throw ParseError("bags.bin: truncated record");
        const char* p = blob.data() + pos;
        const char* end = p + len;

        auto need = [&](std::size_t k, const std::string& what) {
            if (p + k > end) throw ParseError("bags.bin: truncated " + what);
        };

        need(2, "id length");
        const auto id_len = ioetail::get<std::uint16_t>(p);
        p += 2;
        need(id_len, "id");
        std::string id(p, id_len);
        p += id_len;

        need(4 + 4 + 4 + 1 + 4, "header of " + id);
        const auto n = ioetail::get<std::uint32_t>(p);
        p += 4;
        const auto d = ioetail::get<std::uint32_t>(p);
        p += 4;
        const auto label = ioetail::get<std::int32_t>(p);
        p += 4;
        const auto split_raw = ioetail::get<std::uint8_t>(p);
        p += 1;
        const auto n_planted = ioetail::get<std::uint32_t>(p);
        p += 4;

        if (n == 0) throw ParseError(id + ": bag has N=0 patches");
        if (split_raw > 2) throw ParseError(id + ": invalid split code");

        Bag bag;
        bag.id = std::move(id);
        bag.label = label;
        bag.split = static_cast<Split>(split_raw);
        bag.planted.resize(n_planted);
        need(std::size_t{4} * n_planted, "planted set of " + bag.id);
        for (std::uint32_t i = 0; i < n_planted; ++i) {
            bag.planted[i] = ioetail::get<std::uint32_t>(p);
            p += 4;
            if (bag.planted[i] >= n) throw ParseError(bag.id + ": planted index out of range");
        }

        bag.features = MatF(n, d);
        need(std::size_t{4} * n * d, "features of " + bag.id);
        std::memcpy(bag.features.data.data(), p, std::size_t{4} * n * d);
        p += std::size_t{4} * n * d;
        bag.coords = MatF(n, 2);
        need(std::size_t{4} * n * 2, "coords of " + bag.id);
        std::memcpy(bag.coords.data.data(), p, std::size_t{4} * n * 2);
        p += std::size_t{4} * n * 2;

        for (float v : bag.features.data) {
            if (!std::isfinite(v)) throw ParseError(bag.id + ": non-finite feature value");
        }

        ds.bags.push_back(std::move(bag));
        pos += len;
    }

    if (expect != 0 && ds.bags.size() != expect)
        throw ParseError("bags.bin: expected " + std::to_string(expect) + " bags, found " +
                         std::to_string(ds.bags.size()));
    return ds;
}

}  // namespace evsel
