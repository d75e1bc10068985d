#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "semdiff/data.hpp"
#include "semdiff/train.hpp"

namespace semdiff {

struct DataConfig {
    std::filesystem::path manifest;
    int64_t image_size = 0;  // 0 keeps the stored size
    int num_workers = 1;
    CtWindow window;
};

struct EvalConfig {
    std::string oracle = "toy";        // "toy" or "external"
    std::string oracle_command;        // for "external"
    std::string extractor = "random";  // "random" or a TorchScript file
    uint64_t extractor_seed = 0;
    bool volume_wise = false;
};

/// Everything a config file can set. Sections: [schedule] [model] [train]
/// [data] [eval]; a top-level `preset = "toy" | "paper"` picks defaults for
/// model and train before any other key is applied.
struct AppConfig {
    RunConfig run;
    DataConfig data;
    EvalConfig eval;

    static AppConfig defaults(const std::string& preset = "paper", Conditioning variant = Conditioning::MaskGuided);

    /// Resolved snapshot as TOML text. `command` (flat key/value pairs) is
    /// written as a [command] section recording the invocation; it is ignored
    /// when the snapshot is loaded again.
    std::string to_toml(const nlohmann::json& command = nullptr) const;
};

/// Parses TOML text. Unknown sections or keys are ConfigErrors.
AppConfig parse_config(const std::string& text, const std::string& source = "<string>");
AppConfig load_config(const std::filesystem::path& path);

/// Sets the variant on both the model and the train section.
void set_variant(AppConfig& config, Conditioning variant);

/// Applies the toy or paper preset to model and train, keeping the variant.
void apply_preset(AppConfig& config, const std::string& preset);

}  // namespace semdiff
