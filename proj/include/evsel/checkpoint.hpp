#pragma once
// Parameter checkpoint: textual shape header followed by a little-endian f32
// blob, tensors in header order.
//
//   EVSEL_CKPT 1
//   mode <injection mode>
//   gamma <..> / delta <..> / flags / t_inference
//   tensor <name> <dim0> [dim1]
//   ...
//   DATA\n
//   <f32 payload>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "evsel/errors.hpp"
#include "evsel/training.hpp"

namespace evsel {

namespace ckptdetail {

static_assert(std::endian::native == std::endian::little,
              "big-endian hosts need byte swaps in checkpoint io");

inline void append_tensor(std::ostringstream& header, std::string& blob, const std::string& name,
                          const double* data, std::size_t rows, std::size_t cols) {
    header << "tensor " << name << ' ' << rows;
    if (cols > 0) header << ' ' << cols;
    header << '\n';
    const std::size_t count = rows * std::max<std::size_t>(cols, 1);
    for (std::size_t i = 0; i < count; ++i) {
        const auto v = static_cast<float>(data[i]);
        char tmp[4];
        std::memcpy(tmp, &v, 4);
        blob.append(tmp, 4);
    }
}

struct TensorSpec {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;  // 0 for vectors
};

}  // namespace ckptdetail

inline void save_checkpoint(const ModelState& s, const std::filesystem::path& path) {
    std::ostringstream header;
    std::string blob;

    header << std::setprecision(17);
    header << "EVSEL_CKPT 1\n";
    header << "mode " << injection_mode_name(s.mode) << '\n';
    header << "gamma " << s.gcfg.gamma << '\n';
    header << "delta " << s.gcfg.delta << '\n';
    header << "rank " << s.gcfg.rank << '\n';
    header << "bridge_on_adapted " << (s.gcfg.bridge_on_adapted ? 1 : 0) << '\n';
    header << "constrained_bridge " << (s.gcfg.constrained_bridge ? 1 : 0) << '\n';
    header << "t_inference " << s.t_inference << '\n';
    header << "use_selector " << (s.use_selector ? 1 : 0) << '\n';

    using ckptdetail::append_tensor;
    append_tensor(header, blob, "host.W1", s.host.W1.data.data(), s.host.W1.rows, s.host.W1.cols);
    append_tensor(header, blob, "host.w2", s.host.w2.data(), s.host.w2.size(), 0);
    append_tensor(header, blob, "host.Wc", s.host.Wc.data.data(), s.host.Wc.rows, s.host.Wc.cols);
    append_tensor(header, blob, "host.b", s.host.b.data(), s.host.b.size(), 0);
    append_tensor(header, blob, "ground.U", s.ground.U.data.data(), s.ground.U.rows,
                  s.ground.U.cols);
    append_tensor(header, blob, "ground.V", s.ground.V.data.data(), s.ground.V.rows,
                  s.ground.V.cols);
    append_tensor(header, blob, "ground.B", s.ground.B.data.data(), s.ground.B.rows,
                  s.ground.B.cols);
    append_tensor(header, blob, "sel.W1", s.sel.W1.data.data(), s.sel.W1.rows, s.sel.W1.cols);
    append_tensor(header, blob, "sel.b1", s.sel.b1.data(), s.sel.b1.size(), 0);
    append_tensor(header, blob, "sel.w2", s.sel.w2.data(), s.sel.w2.size(), 0);
    append_tensor(header, blob, "sel.b2", &s.sel.b2, 1, 0);
    append_tensor(header, blob, "caw.raw", s.caw.raw.data.data(), s.caw.raw.rows, s.caw.raw.cols);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot write checkpoint " + path.string());
    f << header.str() << "DATA\n";
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

inline ModelState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("missing checkpoint " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string all = ss.str();

    const std::string sentinel = "DATA\n";
    const std::size_t data_pos = all.find(sentinel);
    if (data_pos == std::string::npos) throw ParseError(path.string() + ": no DATA sentinel");
    std::istringstream header(all.substr(0, data_pos));
    const char* payload = all.data() + data_pos + sentinel.size();
    const std::size_t payload_len = all.size() - data_pos - sentinel.size();

    std::string line;
    if (!std::getline(header, line) || line != "EVSEL_CKPT 1")
        throw ParseError(path.string() + ": bad magic");

    ModelState s;
    std::vector<ckptdetail::TensorSpec> specs;
    while (std::getline(header, line)) {
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "mode") {
            std::string v;
            ls >> v;
            s.mode = injection_mode_from_name(v);
        } else if (key == "gamma") {
            ls >> s.gcfg.gamma;
        } else if (key == "delta") {
            ls >> s.gcfg.delta;
        } else if (key == "rank") {
            ls >> s.gcfg.rank;
        } else if (key == "bridge_on_adapted") {
            int v = 0;
            ls >> v;
            s.gcfg.bridge_on_adapted = v != 0;
        } else if (key == "constrained_bridge") {
            int v = 0;
            ls >> v;
            s.gcfg.constrained_bridge = v != 0;
        } else if (key == "t_inference") {
            ls >> s.t_inference;
        } else if (key == "use_selector") {
            int v = 0;
            ls >> v;
            s.use_selector = v != 0;
        } else if (key == "tensor") {
            ckptdetail::TensorSpec spec;
            ls >> spec.name >> spec.rows;
            if (!(ls >> spec.cols)) spec.cols = 0;
            specs.push_back(spec);
        } else if (!key.empty()) {
            throw ParseError(path.string() + ": unknown header key '" + key + "'");
        }
    }

    std::size_t offset = 0;
    auto read_into = [&](const ckptdetail::TensorSpec& spec, double* dst, std::size_t expect) {
        const std::size_t count = spec.rows * std::max<std::size_t>(spec.cols, 1);
        if (count != expect)
            throw ParseError(path.string() + ": tensor " + spec.name + " has unexpected size");
        if (offset + 4 * count > payload_len)
            throw ParseError(path.string() + ": truncated payload at " + spec.name);
        for (std::size_t i = 0; i < count; ++i) {
            float v;
            std::memcpy(&v, payload + offset, 4);
            offset += 4;
            dst[i] = static_cast<double>(v);
        }
    };

    for (const auto& spec : specs) {
        if (spec.name == "host.W1") {
            s.host.W1 = MatD(spec.rows, spec.cols);
            read_into(spec, s.host.W1.data.data(), s.host.W1.size());
        } else if (spec.name == "host.w2") {
            s.host.w2.assign(spec.rows, 0.0);
            read_into(spec, s.host.w2.data(), s.host.w2.size());
        } else if (spec.name == "host.Wc") {
            s.host.Wc = MatD(spec.rows, spec.cols);
            read_into(spec, s.host.Wc.data.data(), s.host.Wc.size());
        } else if (spec.name == "host.b") {
            s.host.b.assign(spec.rows, 0.0);
            read_into(spec, s.host.b.data(), s.host.b.size());
        } else if (spec.name == "ground.U") {
            s.ground.U = MatD(spec.rows, spec.cols);
            read_into(spec, s.ground.U.data.data(), s.ground.U.size());
        } else if (spec.name == "ground.V") {
            s.ground.V = MatD(spec.rows, spec.cols);
            read_into(spec, s.ground.V.data.data(), s.ground.V.size());
        } else if (spec.name == "ground.B") {
            s.ground.B = MatD(spec.rows, spec.cols);
            read_into(spec, s.ground.B.data.data(), s.ground.B.size());
        } else if (spec.name == "sel.W1") {
            s.sel.W1 = MatD(spec.rows, spec.cols);
            read_into(spec, s.sel.W1.data.data(), s.sel.W1.size());
        } else if (spec.name == "sel.b1") {
            s.sel.b1.assign(spec.rows, 0.0);
            read_into(spec, s.sel.b1.data(), s.sel.b1.size());
        } else if (spec.name == "sel.w2") {
            s.sel.w2.assign(spec.rows, 0.0);
            read_into(spec, s.sel.w2.data(), s.sel.w2.size());
        } else if (spec.name == "sel.b2") {
            read_into(spec, &s.sel.b2, 1);
        } else if (spec.name == "caw.raw") {
            s.caw.raw = MatD(spec.rows, spec.cols);
            read_into(spec, s.caw.raw.data.data(), s.caw.raw.size());
        } else {
            throw ParseError(path.string() + ": unknown tensor '" + spec.name + "'");
        }
    }
    return s;
}

}  // namespace evsel
