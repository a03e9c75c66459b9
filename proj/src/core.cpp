#include "segens/core.hpp"

#include <algorithm>
#include <cctype>

#include "segens/log.hpp"

namespace segens {

namespace {
constexpr std::array<std::string_view, kOrganCount> kOrganNames = {
    "left_lung", "right_lung", "heart", "esophagus", "trachea", "spinal_cord"};
}

std::string_view organ_name(Organ organ) {
    return kOrganNames.at(static_cast<size_t>(organ_label(organ) - 1));
}

Organ organ_from_name(std::string_view name) {
    std::string lowered(name);
    std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    std::replace(lowered.begin(), lowered.end(), '-', '_');
    for (size_t i = 0; i < kOrganNames.size(); ++i) {
        if (kOrganNames[i] == lowered) return static_cast<Organ>(i + 1);
    }
    throw ArgumentError("unknown organ '" + std::string(name) + "'");
}

Organ organ_from_label(int label) {
    if (label < 1 || label > kOrganCount) {
        throw ArgumentError("organ label " + std::to_string(label) + " out of range 1.." +
                            std::to_string(kOrganCount));
    }
    return static_cast<Organ>(label);
}

WindowSpec default_window(Organ organ) {
    switch (organ) {
        case Organ::LeftLung:
        case Organ::RightLung: return {1500.0, -600.0};
        case Organ::Heart: return {350.0, 50.0};
        case Organ::Esophagus: return {300.0, 80.0};
        case Organ::Trachea: return {1200.0, -440.0};
        case Organ::SpinalCord: return {600.0, 0.0};
    }
    throw ArgumentError("default_window: invalid organ");
}

}  // namespace segens

namespace segens::log {

Level& threshold() {
    static Level level = Level::Info;
    return level;
}

}  // namespace segens::log
