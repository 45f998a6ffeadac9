#pragma once

#include <array>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "deepqc/csv.hpp"
#include "deepqc/error.hpp"
#include "deepqc/model.hpp"
#include "deepqc/model_io.hpp"
#include "deepqc/rules.hpp"
#include "deepqc/synth.hpp"
#include "deepqc/training.hpp"

namespace deepqc {

struct ModelConfig {
    std::size_t embed = 32;
    std::size_t hidden = 64;
    double threshold = 0.5;

    ModelDims dims() const { return ModelDims{kValueFeatures, kContextFeatures, embed, hidden}; }

    void validate() const {
        if (embed < 1 || hidden < 1) throw ConfigError("model: embed and hidden must be >= 1");
        if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("model.threshold must be in (0,1)");
    }
};

struct Config {
    RuleConfig rules;
    TrainConfig train;
    std::array<double, 3> split{0.8, 0.1, 0.1};  // train/val/test share of sites
    SynthConfig synth;
    ModelConfig model;

    void validate() const {
        rules.validate();
        train.validate();
        synth.validate();
        model.validate();
        const double total = split[0] + split[1] + split[2];
        if (std::abs(total - 1.0) > 1e-9 || split[0] <= 0.0 || split[1] < 0.0 || split[2] < 0.0) {
            throw ConfigError("train.split must be three non-negative shares summing to 1 with train > 0");
        }
    }

    /// Hash of everything that determines a trained model.
    std::string training_hash() const {
        std::ostringstream os;
        os << "epochs=" << train.epochs << ";lr=" << format_number(train.learning_rate)
           << ";beta1=" << format_number(train.beta1) << ";beta2=" << format_number(train.beta2)
           << ";epsilon=" << format_number(train.epsilon) << ";w=" << format_number(train.anomaly_day_weight)
           << ";batch=" << train.batch_size << ";seed=" << train.seed << ";patience=" << train.early_stop_patience
           << ";split=" << format_number(split[0]) << ',' << format_number(split[1]) << ',' << format_number(split[2])
           << ";embed=" << model.embed << ";hidden=" << model.hidden;
        return hex64(fnv1a(os.str()));
    }
};

namespace detail {

struct ConfigValue {
    std::string text;
    std::string where;  // file:line

    [[noreturn]] void bad(const std::string& what) const {
        throw ConfigError(where + ": " + what + " '" + text + "'");
    }
    double number() const {
        const auto v = parse_number(text);
        if (!v) bad("expected a number, got");
        return *v;
    }
    std::uint64_t integer() const {
        std::uint64_t v = 0;
        const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
        if (ec != std::errc{} || end != text.data() + text.size()) bad("expected a non-negative integer, got");
        return v;
    }
    std::vector<double> numbers(std::size_t count) const {
        std::vector<double> out;
        for (auto part : split_fields(text)) {
            const auto v = parse_number(trim(part));
            if (!v) bad("expected a comma-separated list of numbers, got");
            out.push_back(*v);
        }
        if (out.size() != count) bad("expected " + std::to_string(count) + " comma-separated numbers, got");
        return out;
    }
};

}  // namespace detail

/// Reads a `[section]` / `key = value` file over `base`. `#` and `;` start
/// comment lines. Unknown sections and keys are rejected with their location.
inline Config parse_config(std::istream& in, const std::string& source, Config base = {}) {
    using detail::ConfigValue;
    using Setter = std::function<void(const ConfigValue&)>;
    Config& c = base;
    auto size = [](std::size_t& dst) { return [&dst](const ConfigValue& v) { dst = static_cast<std::size_t>(v.integer()); }; };
    auto real = [](double& dst) { return [&dst](const ConfigValue& v) { dst = v.number(); }; };
    auto seed = [](std::uint64_t& dst) { return [&dst](const ConfigValue& v) { dst = v.integer(); }; };

    const std::map<std::string, std::map<std::string, Setter>> keys{
        {"rules",
         {{"lower_bound", real(c.rules.lower_bound)},
          {"upper_bound", real(c.rules.upper_bound)},
          {"freeze_temp", real(c.rules.freeze_temp)},
          {"rise_threshold", real(c.rules.rise_threshold)},
          {"precip_lookback", real(c.rules.precip_lookback)},
          {"constant_run_len", size(c.rules.constant_run_len)},
          {"sg_window", size(c.rules.sg_window)},
          {"sg_order", [&c](const ConfigValue& v) { c.rules.sg_order = static_cast<int>(v.integer()); }},
          {"spike_z", real(c.rules.spike_z)},
          {"break_z", real(c.rules.break_z)},
          {"sigma_floor", real(c.rules.sigma_floor)}}},
        {"train",
         {{"epochs", size(c.train.epochs)},
          {"learning_rate", real(c.train.learning_rate)},
          {"beta1", real(c.train.beta1)},
          {"beta2", real(c.train.beta2)},
          {"epsilon", real(c.train.epsilon)},
          {"anomaly_day_weight", real(c.train.anomaly_day_weight)},
          {"batch_size", size(c.train.batch_size)},
          {"seed", seed(c.train.seed)},
          {"early_stop_patience", size(c.train.early_stop_patience)},
          {"split", [&c](const ConfigValue& v) {
               const auto s = v.numbers(3);
               c.split = {s[0], s[1], s[2]};
           }}}},
        {"synth",
         {{"n_sites", size(c.synth.n_sites)},
          {"days_per_site", size(c.synth.days_per_site)},
          {"seed", seed(c.synth.seed)},
          {"base_moisture", [&c](const ConfigValue& v) {
               const auto s = v.numbers(2);
               c.synth.base_min = s[0];
               c.synth.base_max = s[1];
           }},
          {"event_rate", real(c.synth.event_rate)},
          {"decay_halflife", real(c.synth.decay_halflife)},
          {"noise_sd", real(c.synth.noise_sd)},
          {"anomaly_fraction", real(c.synth.anomaly_fraction)},
          {"anomaly_mix", [&c](const ConfigValue& v) {
               const auto s = v.numbers(4);
               c.synth.anomaly_mix = {s[0], s[1], s[2], s[3]};
           }},
          {"gap_fraction", real(c.synth.gap_fraction)},
          {"start", [&c](const ConfigValue& v) { c.synth.start = v.text; }},
          {"spike_magnitude", [&c](const ConfigValue& v) {
               const auto s = v.numbers(2);
               c.synth.spike_min = s[0];
               c.synth.spike_max = s[1];
           }},
          {"break_magnitude", [&c](const ConfigValue& v) {
               const auto s = v.numbers(2);
               c.synth.break_min = s[0];
               c.synth.break_max = s[1];
           }},
          {"break_length", [&c](const ConfigValue& v) {
               const auto s = v.numbers(2);
               if (s[0] < 1 || s[1] < s[0]) v.bad("expected min,max sample counts, got");
               c.synth.break_min_len = static_cast<std::size_t>(s[0]);
               c.synth.break_max_len = static_cast<std::size_t>(s[1]);
           }},
          {"break_mean_extra", real(c.synth.break_mean_extra)},
          {"constant_len", size(c.synth.constant_len)},
          {"air_temp", [&c](const ConfigValue& v) {
               const auto s = v.numbers(3);
               c.synth.air_temp_mean = s[0];
               c.synth.air_temp_seasonal = s[1];
               c.synth.air_temp_diurnal = s[2];
           }}}},
        {"model",
         {{"embed", size(c.model.embed)},
          {"hidden", size(c.model.hidden)},
          {"threshold", real(c.model.threshold)}}},
    };

    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string where = source + ":" + std::to_string(line_no);
        const auto text = detail::trim(line);
        if (text.empty() || text.front() == '#' || text.front() == ';') continue;
        if (text.front() == '[') {
            if (text.back() != ']') throw ConfigError(where + ": malformed section header");
            section = std::string(detail::trim(text.substr(1, text.size() - 2)));
            if (!keys.contains(section)) throw ConfigError(where + ": unknown section [" + section + "]");
            continue;
        }
        const auto eq = text.find('=');
        if (eq == std::string_view::npos) throw ConfigError(where + ": expected key = value");
        if (section.empty()) throw ConfigError(where + ": key outside of any section");
        const std::string key(detail::trim(text.substr(0, eq)));
        const auto& section_keys = keys.at(section);
        const auto it = section_keys.find(key);
        if (it == section_keys.end()) throw ConfigError(where + ": unknown key '" + key + "' in [" + section + "]");
        it->second(ConfigValue{std::string(detail::trim(text.substr(eq + 1))), where});
    }
    c.validate();
    return c;
}

inline Config load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string() + ": cannot open config file");
    return parse_config(in, path.string());
}

}  // namespace deepqc
