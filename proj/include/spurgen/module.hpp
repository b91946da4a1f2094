#pragma once

#include "spurgen/autograd.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace spurgen {

struct NamedParameter {
    std::string name;
    ag::Var var;
};

/// Anything with enumerable trainable parameters and a JSON description of
/// its architecture (enough to rebuild an empty instance before loading).
class Module {
public:
    virtual ~Module() = default;
    virtual std::vector<NamedParameter> named_parameters() const = 0;
    virtual nlohmann::json metadata() const = 0;
};

std::size_t parameter_count(const std::vector<NamedParameter>& params);
void zero_grads(const std::vector<NamedParameter>& params);
/// SHA-256 over names, shapes and values, in enumeration order.
std::string parameter_hash(const std::vector<NamedParameter>& params);

// Checkpoint container (magic "SPGCKPT\0", version 1). Header:
//   {"kind": str, "metadata": {...}, "parameters": [{"name", "shape", "offset"}]}
// where offset indexes the flat float64 payload.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const nlohmann::json& metadata,
                     const std::vector<NamedParameter>& params);

struct CheckpointHeader {
    std::string kind;
    nlohmann::json metadata;
};

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);
/// Overwrites `params` with the stored values; names and shapes must match.
void load_checkpoint_into(const std::filesystem::path& path, const std::vector<NamedParameter>& params);

std::vector<NamedParameter> with_prefix(const std::string& prefix, std::vector<NamedParameter> params);

}  // namespace spurgen
