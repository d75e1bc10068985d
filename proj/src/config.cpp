#include "semdiff/config.hpp"

#include <fstream>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "semdiff/errors.hpp"

namespace semdiff {

namespace {

nlohmann::json data_to_json(const DataConfig& d) {
    return {{"manifest", d.manifest.string()},
            {"image_size", d.image_size},
            {"num_workers", d.num_workers},
            {"window_level", d.window.level},
            {"window_width", d.window.width}};
}

DataConfig data_from_json(const nlohmann::json& j) {
    DataConfig d;
    d.manifest = j.at("manifest").get<std::string>();
    d.image_size = j.at("image_size").get<int64_t>();
    d.num_workers = j.at("num_workers").get<int>();
    d.window.level = j.at("window_level").get<double>();
    d.window.width = j.at("window_width").get<double>();
    if (d.image_size < 0) throw ConfigError("data.image_size must be >= 0");
    if (d.num_workers < 1) throw ConfigError("data.num_workers must be positive");
    if (!(d.window.width > 0.0)) throw ConfigError("data.window_width must be positive");
    return d;
}

nlohmann::json eval_to_json(const EvalConfig& e) {
    return {{"oracle", e.oracle},
            {"oracle_command", e.oracle_command},
            {"extractor", e.extractor},
            {"extractor_seed", e.extractor_seed},
            {"volume_wise", e.volume_wise}};
}

EvalConfig eval_from_json(const nlohmann::json& j) {
    EvalConfig e;
    e.oracle = j.at("oracle").get<std::string>();
    e.oracle_command = j.at("oracle_command").get<std::string>();
    e.extractor = j.at("extractor").get<std::string>();
    e.extractor_seed = j.at("extractor_seed").get<uint64_t>();
    e.volume_wise = j.at("volume_wise").get<bool>();
    if (e.oracle != "toy" && e.oracle != "external") {
        throw ConfigError("eval.oracle must be \"toy\" or \"external\", got \"" + e.oracle + "\"");
    }
    return e;
}

nlohmann::json to_json(const AppConfig& c) {
    auto j = c.run.to_json();
    j["data"] = data_to_json(c.data);
    j["eval"] = eval_to_json(c.eval);
    return j;
}

nlohmann::json node_to_json(const toml::node& node, const std::string& where) {
    if (const auto* v = node.as_integer()) return v->get();
    if (const auto* v = node.as_floating_point()) return v->get();
    if (const auto* v = node.as_boolean()) return v->get();
    if (const auto* v = node.as_string()) return v->get();
    if (const auto* arr = node.as_array()) {
        auto out = nlohmann::json::array();
        for (const auto& el : *arr) out.push_back(node_to_json(el, where));
        return out;
    }
    throw ConfigError(where + ": unsupported value type");
}

void json_to_table(const nlohmann::json& j, toml::table& out) {
    for (const auto& [key, value] : j.items()) {
        if (value.is_null()) continue;
        if (value.is_object()) {
            toml::table sub;
            json_to_table(value, sub);
            out.insert(key, std::move(sub));
        } else if (value.is_array()) {
            toml::array arr;
            for (const auto& el : value) {
                if (el.is_number_integer()) {
                    arr.push_back(el.get<int64_t>());
                } else if (el.is_string()) {
                    arr.push_back(el.get<std::string>());
                } else {
                    arr.push_back(el.dump());
                }
            }
            out.insert(key, std::move(arr));
        } else if (value.is_boolean()) {
            out.insert(key, value.get<bool>());
        } else if (value.is_number_integer()) {
            out.insert(key, value.get<int64_t>());
        } else if (value.is_number_float()) {
            out.insert(key, value.get<double>());
        } else {
            out.insert(key, value.get<std::string>());
        }
    }
}

}  // namespace

AppConfig AppConfig::defaults(const std::string& preset, Conditioning variant) {
    AppConfig c;
    set_variant(c, variant);
    apply_preset(c, preset);
    return c;
}

void set_variant(AppConfig& config, Conditioning variant) {
    config.run.model.variant = variant;
    config.run.train.variant = variant;
}

void apply_preset(AppConfig& config, const std::string& preset) {
    const auto variant = config.run.model.variant;
    if (preset == "toy") {
        config.run.model = DenoiserConfig::toy(variant);
        config.run.train = TrainConfig::toy(variant);
        config.data.image_size = 32;
    } else if (preset == "paper") {
        config.run.model = DenoiserConfig::paper(variant);
        config.run.train = TrainConfig::paper(variant);
        config.data.image_size = 256;
    } else {
        throw ConfigError("unknown preset \"" + preset + "\" (expected toy or paper)");
    }
}

std::string AppConfig::to_toml(const nlohmann::json& command) const {
    toml::table table;
    auto j = to_json(*this);
    if (command.is_object()) j["command"] = command;
    json_to_table(j, table);
    std::ostringstream os;
    os << table << '\n';
    return os.str();
}

AppConfig parse_config(const std::string& text, const std::string& source) {
    toml::table table;
    try {
        table = toml::parse(text, source);
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << source << ':' << e.source().begin.line << ':' << e.source().begin.column << ": " << e.description();
        throw ConfigError(os.str());
    }

    std::string preset = "paper";
    if (const auto* p = table.get("preset")) {
        if (!p->is_string()) throw ConfigError(source + ": preset must be a string");
        preset = p->as_string()->get();
    }
    std::optional<Conditioning> variant;
    for (const char* section : {"model", "train"}) {
        if (const auto* v = table.at_path(std::string(section) + ".variant").as_string()) {
            const auto parsed = conditioning_from_string(v->get());
            if (variant && *variant != parsed) throw ConfigError(source + ": model.variant and train.variant differ");
            variant = parsed;
        }
    }

    const AppConfig base = AppConfig::defaults(preset, variant.value_or(Conditioning::MaskGuided));
    auto j = to_json(base);
    for (const auto& [key, node] : table) {
        const std::string section(key.str());
        if (section == "preset" || section == "command") continue;
        if (!j.contains(section) || !node.is_table()) {
            throw ConfigError(source + ": unknown section [" + section + "]");
        }
        for (const auto& [k, value] : *node.as_table()) {
            const std::string name(k.str());
            const std::string where = source + ": " + section + "." + name;
            if (!j[section].contains(name)) throw ConfigError(where + " is not a known key");
            j[section][name] = node_to_json(value, where);
        }
    }

    AppConfig out;
    try {
        out.run = RunConfig::from_json(j);
        out.data = data_from_json(j.at("data"));
        out.eval = eval_from_json(j.at("eval"));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(source + ": " + e.what());
    }
    out.run.model.validate();
    out.run.train.validate();
    out.run.schedule.build();
    return out;
}

AppConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str(), path.string());
}

}  // namespace semdiff
