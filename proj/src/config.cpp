#include "scops/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace scops {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Keys that do not change the trajectory of a run.
const std::set<std::string>& runtime_keys() {
    static const std::set<std::string> keys{"train.iterations", "train.checkpoint_every", "train.log_every",
                                            "features.weights_path", "saliency.policy"};
    return keys;
}

} // namespace

Config Config::defaults() {
    Config c;
    c.values_ = {
        {"model.parts", "8"},
        {"model.width", "16"},
        {"model.dilations", "1,2,4"},
        {"data.height", "128"},
        {"data.width", "128"},
        {"train.batch_size", "16"},
        {"train.iterations", "2000"},
        {"train.lr", "0.01"},
        {"train.basis_lr", "0.002"},
        {"train.momentum", "0.9"},
        {"train.clip_norm", "0"},
        {"train.checkpoint_every", "500"},
        {"train.log_every", "50"},
        {"train.seed", "0"},
        {"train.transformed_branch_losses", "false"},
        {"train.eqv_branches", "1"},
        {"loss.con", "0.1"},
        {"loss.eqv", "10"},
        {"loss.sc", "100"},
        {"loss.ot", "0.1"},
        {"loss.eqv_s", "10"},
        {"loss.eqv_c", "1"},
        {"loss.coordinates", "normalized"},
        {"eqv.rotation_deg", "60"},
        {"eqv.shift_frac", "0.2"},
        {"eqv.scale_min", "0.3"},
        {"eqv.scale_max", "2.0"},
        {"eqv.tps_grid", "5"},
        {"eqv.tps_shift_frac", "0.1"},
        {"jitter.brightness", "0.3"},
        {"jitter.contrast", "0.3"},
        {"jitter.saturation", "0.2"},
        {"jitter.hue", "0.2"},
        {"features.provider", "synthetic"},
        {"features.weights_path", ""},
        {"saliency.enabled", "true"},
        {"saliency.policy", "error"},
        {"eval.left_eye", "0"},
        {"eval.right_eye", "1"},
        {"eval.normalization", "inter_ocular"},
        {"eval.ridge", "1e-6"},
        {"eval.transforms", "20"},
        {"dff.iterations", "500"},
        {"dff.use_saliency", "true"},
    };
    return c;
}

void Config::merge_text(const std::string& text, const std::string& origin) {
    std::istringstream is(text);
    std::string line;
    int number = 0;
    while (std::getline(is, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(number) + ": expected key=value");
        }
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

void Config::merge_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    merge_text(ss.str(), path.string());
}

void Config::set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void Config::set(const std::string& key, const std::string& value) {
    if (!values_.empty() && !has(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
}

const std::string& Config::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
}

double Config::get_double(const std::string& key) const {
    try {
        std::size_t used = 0;
        const double v = std::stod(get(key), &used);
        if (used != get(key).size()) throw std::invalid_argument(key);
        return v;
    } catch (const std::logic_error&) {
        throw ConfigError("config key '" + key + "' is not a number: '" + get(key) + "'");
    }
}

int Config::get_int(const std::string& key) const {
    try {
        std::size_t used = 0;
        const int v = std::stoi(get(key), &used);
        if (used != get(key).size()) throw std::invalid_argument(key);
        return v;
    } catch (const std::logic_error&) {
        throw ConfigError("config key '" + key + "' is not an integer: '" + get(key) + "'");
    }
}

std::uint64_t Config::get_u64(const std::string& key) const {
    try {
        std::size_t used = 0;
        const auto v = std::stoull(get(key), &used);
        if (used != get(key).size()) throw std::invalid_argument(key);
        return v;
    } catch (const std::logic_error&) {
        throw ConfigError("config key '" + key + "' is not an unsigned integer: '" + get(key) + "'");
    }
}

bool Config::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config key '" + key + "' is not a boolean: '" + v + "'");
}

std::vector<int> Config::get_int_list(const std::string& key) const {
    std::vector<int> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        try {
            out.push_back(std::stoi(item));
        } catch (const std::logic_error&) {
            throw ConfigError("config key '" + key + "' has a non-integer entry '" + item + "'");
        }
    }
    return out;
}

std::string Config::to_text() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
}

Config Config::from_text(const std::string& text) {
    Config c = defaults();
    c.merge_text(text, "<checkpoint>");
    return c;
}

std::uint64_t Config::fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [k, v] : values_) {
        if (runtime_keys().count(k)) continue;
        for (char ch : k + "=" + v + "\n") {
            h ^= static_cast<unsigned char>(ch);
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

TrainConfig TrainConfig::from(const Config& c) {
    TrainConfig t;
    t.model.parts = c.get_int("model.parts");
    t.model.width = c.get_int("model.width");
    t.model.dilations = c.get_int_list("model.dilations");
    t.height = c.get_int("data.height");
    t.width = c.get_int("data.width");
    t.batch_size = c.get_int("train.batch_size");
    t.iterations = c.get_int("train.iterations");
    t.learning_rate = c.get_double("train.lr");
    t.basis_learning_rate = c.get_double("train.basis_lr");
    t.momentum = c.get_double("train.momentum");
    t.clip_norm = c.get_double("train.clip_norm");
    t.checkpoint_every = c.get_int("train.checkpoint_every");
    t.seed = c.get_u64("train.seed");
    t.model.init_seed = t.seed;
    t.transformed_branch_losses = c.get_bool("train.transformed_branch_losses");
    t.equivariance_branches = c.get_int("train.eqv_branches");

    t.weights.concentration = c.get_double("loss.con");
    t.weights.equivariance = c.get_double("loss.eqv");
    t.weights.semantic = c.get_double("loss.sc");
    t.weights.orthonormal = c.get_double("loss.ot");
    t.weights.eqv_segmentation = c.get_double("loss.eqv_s");
    t.weights.eqv_center = c.get_double("loss.eqv_c");
    const std::string& coords = c.get("loss.coordinates");
    if (coords == "normalized") t.coordinates = CoordinateMode::normalized;
    else if (coords == "pixel") t.coordinates = CoordinateMode::pixel;
    else throw ConfigError("loss.coordinates must be normalized or pixel");

    t.ranges.rotation_deg = c.get_double("eqv.rotation_deg");
    t.ranges.shift_frac = c.get_double("eqv.shift_frac");
    t.ranges.scale_min = c.get_double("eqv.scale_min");
    t.ranges.scale_max = c.get_double("eqv.scale_max");
    t.ranges.tps_grid = c.get_int("eqv.tps_grid");
    t.ranges.tps_shift_frac = c.get_double("eqv.tps_shift_frac");
    t.ranges.brightness = c.get_double("jitter.brightness");
    t.ranges.contrast = c.get_double("jitter.contrast");
    t.ranges.saturation = c.get_double("jitter.saturation");
    t.ranges.hue = c.get_double("jitter.hue");

    t.feature_provider = c.get("features.provider");
    t.weights_path = c.get("features.weights_path");
    t.use_saliency = c.get_bool("saliency.enabled");
    const std::string& policy = c.get("saliency.policy");
    if (policy == "error") t.saliency_policy = MissingSaliencyPolicy::error;
    else if (policy == "fallback") t.saliency_policy = MissingSaliencyPolicy::fallback_ones;
    else throw ConfigError("saliency.policy must be error or fallback");

    t.weights.validate();
    t.ranges.validate();
    if (t.height < kMinImageSize || t.width < kMinImageSize) throw ConfigError("data resolution must be at least 8x8");
    if (t.batch_size < 1) throw ConfigError("train.batch_size must be positive");
    if (t.iterations < 0) throw ConfigError("train.iterations must be non-negative");
    if (t.equivariance_branches < 1) throw ConfigError("train.eqv_branches must be at least 1");
    return t;
}

} // namespace scops
