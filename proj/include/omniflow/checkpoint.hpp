#pragma once

// Model checkpoints: an 8-byte magic, a little-endian u64 header length, a
// JSON header (hyperparams, router threshold, tensor directory, caller
// metadata), then the raw tensors as little-endian f64 in directory order.

#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "omniflow/dit.hpp"

namespace omniflow {

inline constexpr char kCheckpointMagic[9] = "OFLOWCK1";  // 8 bytes on disk

namespace detail {

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw std::runtime_error("checkpoint: truncated integer field");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void write_f64_le(std::ostream& os, double d) {
    write_u64_le(os, std::bit_cast<std::uint64_t>(d));
}

inline double read_f64_le(std::istream& is) { return std::bit_cast<double>(read_u64_le(is)); }

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ExpertRouter& router,
                            const nlohmann::json& extra = nlohmann::json::object()) {
    std::vector<std::pair<std::string, const Tensor*>> dir;
    router.low_noise.visit([&](const std::string& n, const Param& p) {
        dir.emplace_back("low_noise/" + n, &p.value);
    });
    router.high_noise.visit([&](const std::string& n, const Param& p) {
        dir.emplace_back("high_noise/" + n, &p.value);
    });

    nlohmann::json header;
    header["format"] = "omniflow-checkpoint-v1";
    header["hyper"] = router.low_noise.hyper.to_json();
    header["u_threshold"] = router.u_threshold;
    header["extra"] = extra;
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, t] : dir) tensors.push_back({{"name", name}, {"shape", t->shape}});
    header["tensors"] = std::move(tensors);

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os.write(kCheckpointMagic, 8);
    const std::string h = header.dump();
    detail::write_u64_le(os, h.size());
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [name, t] : dir)
        for (double v : t->data) detail::write_f64_le(os, v);
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

struct LoadedCheckpoint {
    ExpertRouter router;
    nlohmann::json extra;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != std::string(kCheckpointMagic, 8))
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    const std::uint64_t hlen = detail::read_u64_le(is);
    std::string htext(hlen, '\0');
    is.read(htext.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw std::runtime_error("load_checkpoint: truncated header");
    const nlohmann::json header = nlohmann::json::parse(htext);
    if (header.at("format") != "omniflow-checkpoint-v1")
        throw std::runtime_error("load_checkpoint: unsupported format");

    const DiTHyper hyper = DiTHyper::from_json(header.at("hyper"));
    LoadedCheckpoint out;
    out.router.u_threshold = header.at("u_threshold").get<double>();
    Rng scratch(0);  // structure only; every value is overwritten below
    out.router.low_noise = DiTParams::init(hyper, scratch);
    out.router.high_noise = DiTParams::init(hyper, scratch);
    out.extra = header.value("extra", nlohmann::json::object());

    std::vector<std::pair<std::string, Tensor*>> dir;
    out.router.low_noise.visit([&](const std::string& n, Param& p) {
        dir.emplace_back("low_noise/" + n, &p.value);
        p.zero_grad();
    });
    out.router.high_noise.visit([&](const std::string& n, Param& p) {
        dir.emplace_back("high_noise/" + n, &p.value);
        p.zero_grad();
    });

    const auto& tensors = header.at("tensors");
    if (tensors.size() != dir.size())
        throw std::runtime_error("load_checkpoint: tensor directory size mismatch");
    for (std::size_t i = 0; i < dir.size(); ++i) {
        const auto& entry = tensors.at(i);
        if (entry.at("name") != dir[i].first)
            throw std::runtime_error("load_checkpoint: tensor order mismatch at '" +
                                     dir[i].first + "'");
        const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
        if (shape != dir[i].second->shape)
            throw std::runtime_error("load_checkpoint: shape mismatch for '" + dir[i].first + "'");
        for (double& v : dir[i].second->data) v = detail::read_f64_le(is);
    }
    if (!is) throw std::runtime_error("load_checkpoint: truncated tensor payload");
    return out;
}

}  // namespace omniflow
