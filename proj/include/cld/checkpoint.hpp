#pragma once

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "cld/params.hpp"

namespace cld {

// Checkpoint file: one JSON header line (schema "cld-ckpt-v1", entry names
// and shapes, optional model metadata), then raw little-endian float64
// payloads concatenated in header order.
inline void save_checkpoint(const std::string& path, const ParameterStore& ps,
                            const nlohmann::json& meta = nlohmann::json::object()) {
    nlohmann::json header;
    header["schema"] = "cld-ckpt-v1";
    header["meta"] = meta;
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [name, e] : ps.entries()) {
        entries.push_back({{"name", name}, {"shape", e.value.shape}});
    }
    header["entries"] = entries;

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    std::string h = header.dump();
    f << h << "\n";
    for (const auto& [name, e] : ps.entries()) {
        e.value.check_finite(("checkpoint save: " + name).c_str());
        f.write(reinterpret_cast<const char*>(e.value.data.data()),
                static_cast<std::streamsize>(e.value.data.size() * sizeof(double)));
    }
    if (!f) throw IoError("write failed: " + path);
}

struct Checkpoint {
    ParameterStore params;
    nlohmann::json meta;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string line;
    if (!std::getline(f, line)) throw IoError("truncated checkpoint: " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("checkpoint header is not valid JSON: " + std::string(e.what()));
    }
    if (!header.contains("schema") || header["schema"] != "cld-ckpt-v1")
        throw SchemaError("checkpoint schema mismatch: expected cld-ckpt-v1 in " + path);

    Checkpoint out;
    out.meta = header.value("meta", nlohmann::json::object());
    for (const auto& ent : header.at("entries")) {
        std::string name = ent.at("name").get<std::string>();
        std::vector<int> shape = ent.at("shape").get<std::vector<int>>();
        Tensor t(shape);
        f.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        if (!f) throw IoError("truncated checkpoint payload: " + path + " at " + name);
        t.check_finite(("checkpoint load: " + name).c_str());
        out.params.add(name, std::move(t));
    }
    return out;
}

}  // namespace cld
