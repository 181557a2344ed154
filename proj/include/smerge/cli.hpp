// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Subcommands: merge, inspect, sweep, synth-validate,
// convert. Exit codes: 0 success, 2 usage/validation, 3 I/O, 4 numerical.
// Errors go to stderr as one JSON object; reports are written only to the
// files named on the command line.

#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "smerge/checkpoint.hpp"
#include "smerge/merge.hpp"
#include "smerge/parallel.hpp"
#include "smerge/report.hpp"
#include "smerge/synth.hpp"

namespace smerge::cli {

inline constexpr const char* kThreadsEnv = "SUBSPACE_MERGE_THREADS";

struct CliConfig {
    std::string subcommand;
    std::string base_path;
    std::vector<std::string> specialist_paths;
    std::string rules_path;
    bool strict_rules = false;
    std::string method = "ssam";
    std::size_t k = kDefaultRank;
    std::string lambda = "auto";
    bool emit_lora = false;
    bool dense = false;
    bool no_adapter_scale = false;
    bool allow_single = false;
    std::string output_path;
    std::string report_path;
    std::size_t threads = 0; ///< 0: hardware concurrency
    std::vector<std::size_t> sweep = kDefaultSweepRanks;

    // inspect / convert
    std::string input_path;
    std::string convert_to = "native";

    // synth-validate
    std::size_t d_out = 64;
    std::size_t d_in = 48;
    std::size_t n = 3;
    std::size_t shared_rank = 8;
    double sigma = 0.01;
    double coeff_scale = 1.0;
    std::string seed = "0xC0FFEE";
    std::optional<std::size_t> synth_k;
    std::size_t layers = 1;
    double max_angle_deg = 5.0;
    std::string dump_path;
    std::string dtype = "f64";
    bool adapters = false;
};

namespace detail {

inline std::optional<double> parse_lambda(const std::string& s) {
    if (s == "auto" || s == "1/n" || s == "auto_1_over_n") {
        return std::nullopt;
    }
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != s.size() || !std::isfinite(v) || v <= 0.0) {
        throw Error(ErrorCode::InvalidConfig, "lambda must be 'auto', '1/n' or a positive number, got '" + s + "'");
    }
    return v;
}

inline std::uint64_t parse_seed(const std::string& s) {
    try {
        std::size_t used = 0;
        const auto v = std::stoull(s, &used, 0);
        if (used == s.size()) {
            return v;
        }
    } catch (const std::exception&) {
    }
    throw Error(ErrorCode::InvalidConfig, "seed must be an unsigned integer, got '" + s + "'");
}

inline std::vector<ClassRule> resolve_rules(const CliConfig& cfg) {
    if (!cfg.rules_path.empty()) {
        return load_rules(cfg.rules_path);
    }
    auto rules = default_rules();
    if (cfg.strict_rules) {
        rules.pop_back();
    }
    return rules;
}

inline std::size_t resolve_threads(std::size_t threads) { return threads == 0 ? default_thread_count() : threads; }

inline void check_specialist_paths(const CliConfig& cfg) {
    check_specialist_count(cfg.specialist_paths.size(), cfg.allow_single);
    std::set<std::filesystem::path> seen;
    for (const auto& p : cfg.specialist_paths) {
        if (!seen.insert(std::filesystem::path(p).lexically_normal()).second) {
            throw Error(ErrorCode::InvalidConfig, "specialist path '" + p + "' given twice");
        }
    }
}

inline MergeConfig merge_config(const CliConfig& cfg) {
    MergeConfig mc;
    mc.method = parse_merge_method(cfg.method);
    mc.k = cfg.k;
    if (mc.k == 0) {
        throw Error(ErrorCode::InvalidConfig, "--rank must be at least 1");
    }
    mc.lambda = parse_lambda(cfg.lambda);
    if (cfg.emit_lora) {
        mc.emit_lora = true;
    } else if (cfg.dense) {
        mc.emit_lora = false;
    }
    mc.apply_adapter_scale = !cfg.no_adapter_scale;
    mc.allow_single = cfg.allow_single;
    mc.threads = resolve_threads(cfg.threads);
    return mc;
}

inline std::vector<Checkpoint> load_specialists(const CliConfig& cfg) {
    std::vector<Checkpoint> out;
    for (const auto& p : cfg.specialist_paths) {
        out.push_back(load_checkpoint(p));
    }
    return out;
}

inline std::string fmt(double v, int precision = 6) {
    std::ostringstream os;
    os << std::setprecision(precision) << v;
    return os.str();
}

} // namespace detail

inline int cmd_merge(const CliConfig& cfg, std::ostream& out) {
    detail::check_specialist_paths(cfg);
    const MergeConfig mc = detail::merge_config(cfg);
    const auto rules = detail::resolve_rules(cfg);
    const Checkpoint base = load_checkpoint(cfg.base_path);
    const auto specialists = detail::load_specialists(cfg);
    const MergeResult result = merge_checkpoints(base, specialists, rules, mc);
    save_checkpoint(result.merged, cfg.output_path);
    if (!cfg.report_path.empty()) {
        write_json(to_json(result.report), cfg.report_path);
    }
    const MergeReport& r = result.report;
    out << "method " << r.method << "  n " << r.n << "  lambda " << detail::fmt(r.lambda_resolved, 17)
        << (r.emit_lora ? "  output adapters" : "  output dense") << "\n";
    out << std::left << std::setw(48) << "layer" << std::setw(6) << "k" << std::setw(12) << "energy_L"
        << std::setw(12) << "energy_R" << "max_residual\n";
    for (const auto& l : r.layers) {
        double worst = 0.0;
        for (double v : l.projection_residuals) {
            worst = std::max(worst, v);
        }
        out << std::left << std::setw(48) << l.layer_name << std::setw(6) << l.k_used << std::setw(12)
            << (l.energy_left ? detail::fmt(*l.energy_left) : "-") << std::setw(12)
            << (l.energy_right ? detail::fmt(*l.energy_right) : "-") << detail::fmt(worst) << "\n";
    }
    for (const auto& w : r.warnings) {
        out << "warning: " << w << "\n";
    }
    out << "wrote " << result.merged.records.size() << " tensors to " << cfg.output_path << "\n";
    return 0;
}

inline int cmd_inspect(const CliConfig& cfg, std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint(cfg.input_path);
    const auto rules = detail::resolve_rules(cfg);
    const Classification classes = classify_parameters(ckpt, rules);
    std::size_t bytes = 0;
    for (const auto& [name, rec] : ckpt.records) {
        bytes += rec.bytes.size();
    }
    out << "records " << ckpt.records.size() << "  bytes " << bytes << "\n";
    for (auto c : kAllParamClasses) {
        out << "  " << std::left << std::setw(20) << param_class_name(c) << classes.count(c) << "\n";
    }
    const auto adapters = adapter_layers(ckpt);
    if (!adapters.empty()) {
        const auto r = ckpt.meta.find(std::string(kMetaLoraRank));
        const auto a = ckpt.meta.find(std::string(kMetaLoraAlpha));
        out << "adapters " << adapters.size() << "  r " << (r != ckpt.meta.end() ? r->second : "-") << "  alpha "
            << (a != ckpt.meta.end() ? a->second : "-") << "\n";
    }
    for (const auto& [k, v] : ckpt.meta) {
        out << "meta " << k << " = " << v << "\n";
    }
    for (const auto& [name, rec] : ckpt.records) {
        std::string shape;
        for (auto d : rec.shape) {
            shape += (shape.empty() ? "" : "x") + std::to_string(d);
        }
        out << std::left << std::setw(56) << name << std::setw(5) << dtype_name(rec.dtype) << std::setw(14)
            << shape << param_class_name(classes.of(name)) << "\n";
    }
    return 0;
}

inline int cmd_sweep(const CliConfig& cfg, std::ostream& out) {
    detail::check_specialist_paths(cfg);
    MergeConfig mc = detail::merge_config(cfg);
    mc.method = MergeMethod::Ssam;
    const auto rules = detail::resolve_rules(cfg);
    const Checkpoint base = load_checkpoint(cfg.base_path);
    const auto specialists = detail::load_specialists(cfg);
    const SweepReport report = sweep_checkpoints(base, specialists, rules, cfg.sweep, mc);
    if (!cfg.report_path.empty()) {
        write_json(to_json(report), cfg.report_path);
    }
    if (!cfg.output_path.empty()) {
        for (auto k : cfg.sweep) {
            MergeConfig per_k = mc;
            per_k.k = k;
            const MergeResult merged = merge_checkpoints(base, specialists, rules, per_k);
            save_checkpoint(merged.merged, std::filesystem::path(cfg.output_path) / ("k" + std::to_string(k)));
        }
    }
    out << std::left << std::setw(48) << "layer" << std::setw(8) << "k" << std::setw(8) << "k_used" << std::setw(12)
        << "energy_L" << std::setw(12) << "energy_R" << "fidelity\n";
    for (const auto& e : report.entries) {
        out << std::left << std::setw(48) << e.layer_name << std::setw(8) << e.k_requested << std::setw(8) << e.k_used
            << std::setw(12) << detail::fmt(e.energy_left) << std::setw(12) << detail::fmt(e.energy_right)
            << detail::fmt(e.fidelity) << "\n";
    }
    for (const auto& w : report.warnings) {
        out << "warning: " << w << "\n";
    }
    return 0;
}

inline int cmd_synth_validate(const CliConfig& cfg, std::ostream& out) {
    SynthSpec spec;
    spec.d_out = cfg.d_out;
    spec.d_in = cfg.d_in;
    spec.n = cfg.n;
    spec.shared_rank = cfg.shared_rank;
    spec.noise_sigma = cfg.sigma;
    spec.coeff_scale = cfg.coeff_scale;
    spec.seed = detail::parse_seed(cfg.seed);
    spec.num_layers = cfg.layers;
    validate_synth_spec(spec);
    const std::size_t k = cfg.synth_k.value_or(spec.shared_rank);
    if (k < spec.shared_rank) {
        throw Error(ErrorCode::RankTooSmall, "--rank " + std::to_string(k) + " is below the planted rank " +
                                                 std::to_string(spec.shared_rank));
    }
    const double limit = spec.noise_sigma == 0.0 ? 1e-6 : cfg.max_angle_deg * std::numbers::pi / 180.0;

    bool pass = true;
    nlohmann::json layers = nlohmann::json::array();
    out << std::left << std::setw(40) << "layer" << std::setw(26) << "max_angle_left_rad" << "max_angle_right_rad\n";
    for (std::size_t l = 0; l < spec.num_layers; ++l) {
        const SynthLayer layer = generate_layer(spec, l);
        const Covariances cov = accumulate_covariances(layer.set);
        const ConsensusSubspace sub = consensus_bases(cov.a, cov.b, k);
        const auto [left, right] = recovery_error(sub, layer.truth);
        pass = pass && left <= limit && right <= limit;
        char line[128];
        std::snprintf(line, sizeof(line), "%-40s%-26.17g%.17g\n", layer.set.layer_name.c_str(), left, right);
        out << line;
        layers.push_back({{"layer_name", layer.set.layer_name}, {"max_angle_left", left}, {"max_angle_right", right}});
    }
    out << (pass ? "PASS" : "FAIL") << " (limit " << detail::fmt(limit, 17) << " rad)\n";

    if (!cfg.report_path.empty()) {
        write_json({{"format_version", kReportFormatVersion},
                    {"kind", "synth_validate"},
                    {"seed", spec.seed},
                    {"k", k},
                    {"limit_rad", limit},
                    {"pass", pass},
                    {"layers", layers}},
                   cfg.report_path);
    }
    if (!cfg.dump_path.empty()) {
        const Dtype dt = parse_dtype(cfg.dtype, "--dtype");
        const SynthCheckpoints ck = synth_checkpoints(spec, dt, cfg.adapters);
        const std::filesystem::path root(cfg.dump_path);
        save_checkpoint(ck.base, root / "base");
        for (std::size_t i = 0; i < ck.specialists.size(); ++i) {
            save_checkpoint(ck.specialists[i], root / ("specialist" + std::to_string(i + 1)));
        }
        out << "dumped base and " << ck.specialists.size() << " specialists to " << cfg.dump_path << "\n";
    }
    return pass ? 0 : 4;
}

inline int cmd_convert(const CliConfig& cfg, std::ostream& out) {
    const std::filesystem::path in(cfg.input_path);
    Checkpoint ckpt;
    if (std::filesystem::is_regular_file(in / kManifestFile)) {
        ckpt = load_checkpoint(in);
    } else if (std::filesystem::is_regular_file(in / kInterchangeIndex)) {
        ckpt = read_interchange(in);
    } else {
        throw Error(ErrorCode::MissingManifest, "'" + in.string() + "' holds neither manifest.json nor index.json");
    }
    if (cfg.convert_to == "native") {
        save_checkpoint(ckpt, cfg.output_path);
    } else if (cfg.convert_to == "interchange") {
        write_interchange(ckpt, cfg.output_path);
    } else {
        throw Error(ErrorCode::InvalidConfig, "--to must be 'native' or 'interchange'");
    }
    out << "converted " << ckpt.records.size() << " tensors to " << cfg.output_path << " (" << cfg.convert_to
        << ")\n";
    return 0;
}

inline void write_error(std::ostream& err, ErrorCode code, const std::string& message) {
    const nlohmann::json j = {
        {"error", {{"code", error_code_name(code)}, {"exit_code", exit_code_for(code)}, {"message", message}}}};
    err << j.dump() << "\n";
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CliConfig cfg;
    CLI::App app{"Training-free checkpoint merging in a shared low-rank consensus subspace", "smerge"};
    app.set_config("--config", "", "TOML config file; command-line flags take precedence");
    app.require_subcommand(1);

    auto add_threads = [&](CLI::App* sub) {
        sub->add_option("--threads", cfg.threads, "Layer-parallel worker count (0 = all cores)")->envname(kThreadsEnv);
    };
    auto add_merge_inputs = [&](CLI::App* sub) {
        sub->add_option("--base", cfg.base_path, "Base checkpoint directory")->required();
        sub->add_option("--specialists", cfg.specialist_paths, "Specialist checkpoint directories")->required();
        sub->add_option("--rules", cfg.rules_path, "Classification rules JSON");
        sub->add_option("--rank,-k", cfg.k, "Subspace rank k")->capture_default_str();
        sub->add_option("--lambda", cfg.lambda, "Scaling: 'auto' (1/n) or a positive number")->capture_default_str();
        sub->add_flag("--no-adapter-scale", cfg.no_adapter_scale, "Do not apply alpha/r to adapter products");
        sub->add_flag("--allow-single", cfg.allow_single, "Accept a single specialist");
        add_threads(sub);
    };

    CLI::App* merge = app.add_subcommand("merge", "Merge specialists into one checkpoint");
    add_merge_inputs(merge);
    merge->add_option("--method", cfg.method, "ssam | task_arithmetic | average")
        ->check(CLI::IsMember({"ssam", "task_arithmetic", "average"}))
        ->capture_default_str();
    auto* lora_flag = merge->add_flag("--emit-lora", cfg.emit_lora, "Write merged layers as adapter pairs");
    merge->add_flag("--dense", cfg.dense, "Write merged layers as dense weights")->excludes(lora_flag);
    merge->add_option("--out", cfg.output_path, "Output checkpoint directory")->required();
    merge->add_option("--report", cfg.report_path, "Merge report JSON path");

    CLI::App* inspect = app.add_subcommand("inspect", "Summarize a checkpoint");
    inspect->add_option("checkpoint", cfg.input_path, "Checkpoint directory")->required();
    inspect->add_option("--rules", cfg.rules_path, "Classification rules JSON");
    inspect->add_flag("--strict", cfg.strict_rules, "Default rules without the catch-all");

    CLI::App* sweep = app.add_subcommand("sweep", "Spectral energy and fidelity over several ranks");
    add_merge_inputs(sweep);
    sweep->add_option("--ks", cfg.sweep, "Ranks to evaluate")->capture_default_str();
    sweep->add_option("--out", cfg.output_path, "Also write one merged checkpoint per rank under this directory");
    sweep->add_option("--report", cfg.report_path, "Sweep report JSON path");

    CLI::App* synth = app.add_subcommand("synth-validate", "Planted-subspace recovery check");
    synth->add_option("--d-out", cfg.d_out)->capture_default_str();
    synth->add_option("--d-in", cfg.d_in)->capture_default_str();
    synth->add_option("--n", cfg.n, "Number of specialists")->capture_default_str();
    synth->add_option("--shared-rank", cfg.shared_rank)->capture_default_str();
    synth->add_option("--sigma", cfg.sigma, "Noise level")->capture_default_str();
    synth->add_option("--coeff-scale", cfg.coeff_scale)->capture_default_str();
    synth->add_option("--seed", cfg.seed)->capture_default_str();
    synth->add_option("--rank,-k", cfg.synth_k, "Subspace rank (default: shared rank)");
    synth->add_option("--layers", cfg.layers)->capture_default_str();
    synth->add_option("--max-angle-deg", cfg.max_angle_deg, "Acceptance envelope for sigma > 0")->capture_default_str();
    synth->add_option("--report", cfg.report_path, "Result JSON path");
    synth->add_option("--dump", cfg.dump_path, "Write base/ and specialist{i}/ checkpoints here");
    synth->add_option("--dtype", cfg.dtype, "Dump dtype: f32 | f64")->capture_default_str();
    synth->add_flag("--adapters", cfg.adapters, "Dump specialists as adapter pairs (sigma must be 0)");

    CLI::App* convert = app.add_subcommand("convert", "Convert interchange or native checkpoints");
    convert->add_option("--in", cfg.input_path, "Input directory")->required();
    convert->add_option("--out", cfg.output_path, "Output directory")->required();
    convert->add_option("--to", cfg.convert_to, "native | interchange")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        write_error(err, ErrorCode::Usage, e.what());
        return 2;
    }

    try {
        if (merge->parsed()) {
            cfg.subcommand = "merge";
            return cmd_merge(cfg, out);
        }
        if (inspect->parsed()) {
            cfg.subcommand = "inspect";
            return cmd_inspect(cfg, out);
        }
        if (sweep->parsed()) {
            cfg.subcommand = "sweep";
            return cmd_sweep(cfg, out);
        }
        if (synth->parsed()) {
            cfg.subcommand = "synth-validate";
            return cmd_synth_validate(cfg, out);
        }
        cfg.subcommand = "convert";
        return cmd_convert(cfg, out);
    } catch (const Error& e) {
        write_error(err, e.code(), e.detail());
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        write_error(err, ErrorCode::Io, e.what());
        return 3;
    }
}

} // namespace smerge::cli
