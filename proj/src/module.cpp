#include "spurgen/module.hpp"

#include "spurgen/error.hpp"
#include "spurgen/io.hpp"

#include <unordered_map>

namespace spurgen {

namespace {
constexpr io::Magic kCheckpointMagic{'S', 'P', 'G', 'C', 'K', 'P', 'T', '\0'};
}

std::size_t parameter_count(const std::vector<NamedParameter>& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.var.numel();
    return n;
}

void zero_grads(const std::vector<NamedParameter>& params) {
    for (auto p : params) p.var.zero_grad();
}

std::string parameter_hash(const std::vector<NamedParameter>& params) {
    std::string blob;
    for (const auto& p : params) {
        blob += p.name;
        blob += ag::shape_str(p.var.shape());
        const auto& d = p.var.value().data();
        blob.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
    }
    return io::sha256_hex(blob);
}

void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const nlohmann::json& metadata,
                     const std::vector<NamedParameter>& params) {
    nlohmann::json entries = nlohmann::json::array();
    std::vector<double> payload;
    payload.reserve(parameter_count(params));
    for (const auto& p : params) {
        entries.push_back({{"name", p.name}, {"shape", p.var.shape()}, {"offset", payload.size()}});
        const auto& d = p.var.value().data();
        payload.insert(payload.end(), d.begin(), d.end());
    }
    const nlohmann::json header{{"kind", kind}, {"metadata", metadata}, {"parameters", entries}};
    io::write_container(path, kCheckpointMagic, kCheckpointVersion, header, payload);
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
    const auto c = io::read_container(path, kCheckpointMagic);
    if (c.version != kCheckpointVersion) throw DataError("unsupported checkpoint version in " + path.string());
    return {c.header.at("kind").get<std::string>(), c.header.at("metadata")};
}

void load_checkpoint_into(const std::filesystem::path& path, const std::vector<NamedParameter>& params) {
    const auto c = io::read_container(path, kCheckpointMagic);
    if (c.version != kCheckpointVersion) throw DataError("unsupported checkpoint version in " + path.string());
    std::unordered_map<std::string, nlohmann::json> by_name;
    for (const auto& e : c.header.at("parameters")) by_name[e.at("name").get<std::string>()] = e;
    if (by_name.size() != params.size()) {
        throw DataError("checkpoint " + path.string() + " holds " + std::to_string(by_name.size()) +
                        " parameters, model expects " + std::to_string(params.size()));
    }
    for (auto p : params) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) throw DataError("checkpoint " + path.string() + " lacks parameter " + p.name);
        const auto shape = it->second.at("shape").get<ag::Shape>();
        if (shape != p.var.shape()) throw DataError("shape mismatch for " + p.name + " in " + path.string());
        const auto offset = it->second.at("offset").get<std::size_t>();
        auto& dst = p.var.mutable_value().data();
        if (offset + dst.size() > c.payload.size()) throw DataError("payload too short for " + p.name);
        std::copy_n(c.payload.begin() + static_cast<std::ptrdiff_t>(offset), dst.size(), dst.begin());
    }
}

std::vector<NamedParameter> with_prefix(const std::string& prefix, std::vector<NamedParameter> params) {
    for (auto& p : params) p.name = prefix + p.name;
    return params;
}

}  // namespace spurgen
