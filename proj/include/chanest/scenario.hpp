#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include <json.hpp>

#include "chanest/error.hpp"

namespace chanest {

enum class TdlProfile : std::uint8_t { A, B, C, D, E };

inline constexpr std::array<TdlProfile, 5> kAllProfiles{TdlProfile::A, TdlProfile::B, TdlProfile::C,
                                                        TdlProfile::D, TdlProfile::E};

inline std::string_view profile_name(TdlProfile p) {
    switch (p) {
        case TdlProfile::A: return "TDL_A";
        case TdlProfile::B: return "TDL_B";
        case TdlProfile::C: return "TDL_C";
        case TdlProfile::D: return "TDL_D";
        case TdlProfile::E: return "TDL_E";
    }
    return "?";
}

// Accepts "A", "TDL_A", "TDL-A" (case-insensitive on the letter).
inline TdlProfile parse_profile(std::string_view s) {
    if (s.size() > 4 && (s.substr(0, 4) == "TDL_" || s.substr(0, 4) == "TDL-")) s.remove_prefix(4);
    if (s.size() == 1) {
        switch (s[0]) {
            case 'A': case 'a': return TdlProfile::A;
            case 'B': case 'b': return TdlProfile::B;
            case 'C': case 'c': return TdlProfile::C;
            case 'D': case 'd': return TdlProfile::D;
            case 'E': case 'e': return TdlProfile::E;
            default: break;
        }
    }
    throw ConfigError("unknown TDL profile '" + std::string(s) + "'");
}

// Per-example channel parameters.
struct ChannelScenario {
    TdlProfile profile = TdlProfile::A;
    double delay_spread = 100e-9;  // seconds
    double max_doppler = 5.0;      // Hz
    double snr_db = 10.0;
    std::uint64_t seed = 0;

    friend bool operator==(const ChannelScenario&, const ChannelScenario&) = default;
};

inline void to_json(nlohmann::json& j, const ChannelScenario& s) {
    j = nlohmann::json{{"profile", std::string(profile_name(s.profile))},
                       {"delay_spread", s.delay_spread},
                       {"max_doppler", s.max_doppler},
                       {"snr_db", s.snr_db},
                       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, ChannelScenario& s) {
    s.profile = parse_profile(j.at("profile").get<std::string>());
    s.delay_spread = j.at("delay_spread").get<double>();
    s.max_doppler = j.at("max_doppler").get<double>();
    s.snr_db = j.at("snr_db").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
}

}  // namespace chanest
