// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "smerge/checkpoint.hpp"
#include "smerge/merge.hpp"

namespace smerge {

inline constexpr std::string_view kReportFormatVersion = "1";

namespace detail {

template <class T>
nlohmann::json optional_json(const std::optional<T>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

} // namespace detail

inline nlohmann::json to_json(const MergeReport& r) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : r.layers) {
        layers.push_back({{"layer_name", l.layer_name},
                          {"k_used", l.k_used},
                          {"energy_left", detail::optional_json(l.energy_left)},
                          {"energy_right", detail::optional_json(l.energy_right)},
                          {"projection_residuals", l.projection_residuals},
                          {"effective_rank_A", detail::optional_json(l.effective_rank_a)},
                          {"effective_rank_B", detail::optional_json(l.effective_rank_b)},
                          {"unstable_cut", l.unstable_cut}});
    }
    return {{"format_version", kReportFormatVersion},
            {"kind", "merge"},
            {"method", r.method},
            {"k", r.k_requested},
            {"lambda_resolved", r.lambda_resolved},
            {"n", r.n},
            {"emit_lora", r.emit_lora},
            {"warnings", r.warnings},
            {"layers", layers}};
}

inline nlohmann::json to_json(const SweepReport& r) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : r.entries) {
        entries.push_back({{"layer_name", e.layer_name},
                           {"k_requested", e.k_requested},
                           {"k_used", e.k_used},
                           {"energy_left", e.energy_left},
                           {"energy_right", e.energy_right},
                           {"projection_residuals", e.projection_residuals},
                           {"fidelity", e.fidelity},
                           {"unstable_cut", e.unstable_cut}});
    }
    return {{"format_version", kReportFormatVersion},
            {"kind", "sweep"},
            {"n", r.n},
            {"k_values", r.k_values},
            {"warnings", r.warnings},
            {"entries", entries}};
}

inline void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        detail::ensure_directory(path.parent_path());
    }
    detail::write_text(path, j.dump(2) + "\n");
}

} // namespace smerge
