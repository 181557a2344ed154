// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint merging. LanguageLinear layers are merged from their language
// vectors (consensus-subspace projection, task arithmetic or plain average),
// bias/norm parameters are averaged, modality-specific parameters of each
// specialist are kept under a `specialist{i}.` prefix and everything else is
// taken from the base.

#pragma once

#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "smerge/checkpoint.hpp"
#include "smerge/consensus.hpp"
#include "smerge/deltas.hpp"
#include "smerge/parallel.hpp"

namespace smerge {

enum class MergeMethod { Ssam, TaskArithmetic, Average };

inline std::string_view merge_method_name(MergeMethod m) {
    switch (m) {
    case MergeMethod::Ssam: return "ssam";
    case MergeMethod::TaskArithmetic: return "task_arithmetic";
    case MergeMethod::Average: return "average";
    }
    return "ssam";
}

inline MergeMethod parse_merge_method(std::string_view s) {
    for (auto m : {MergeMethod::Ssam, MergeMethod::TaskArithmetic, MergeMethod::Average}) {
        if (merge_method_name(m) == s) {
            return m;
        }
    }
    throw Error(ErrorCode::InvalidConfig, "unknown merge method '" + std::string(s) + "'");
}

inline constexpr std::size_t kDefaultRank = 128;
inline const std::vector<std::size_t> kDefaultSweepRanks = {64, 128, 256, 384, 512};

struct MergeConfig {
    MergeMethod method = MergeMethod::Ssam;
    std::size_t k = kDefaultRank;
    /// Scaling of the summed deltas; empty means 1/n.
    std::optional<double> lambda;
    /// Emit adapter pairs instead of dense weights; empty means "if any
    /// specialist ships adapters".
    std::optional<bool> emit_lora;
    bool apply_adapter_scale = true;
    bool allow_single = false;
    std::vector<std::size_t> rank_sweep;
    std::size_t threads = 1;
};

inline double resolve_lambda(const std::optional<double>& lambda, std::size_t n) {
    if (!lambda) {
        return 1.0 / static_cast<double>(n);
    }
    if (!std::isfinite(*lambda) || *lambda <= 0.0) {
        throw Error(ErrorCode::InvalidConfig, "lambda must be finite and positive");
    }
    return *lambda;
}

inline void check_specialist_count(std::size_t n, bool allow_single) {
    if (n == 0 || (n == 1 && !allow_single)) {
        throw Error(ErrorCode::TooFewSpecialists,
                    "merging needs at least 2 specialists, got " + std::to_string(n) +
                        (n == 1 ? " (pass allow_single to override)" : ""));
    }
}

/// lambda * sum_i D_i, summed in source_id order.
inline LayerDelta task_arithmetic_merge(const DeltaSet& set, double lambda) {
    validate_delta_set(set);
    Matrix sum(set.rows(), set.cols());
    for (const LayerDelta* d : set.ordered()) {
        add_in_place(sum, d->matrix);
    }
    return {set.layer_name, scale(std::move(sum), lambda), 0};
}

/// (1/n) * sum_i D_i; bitwise equal to task_arithmetic_merge(set, 1/n).
inline LayerDelta average_merge(const DeltaSet& set) {
    return task_arithmetic_merge(set, 1.0 / static_cast<double>(set.size()));
}

struct SsamLayerResult {
    LayerDelta merged;
    ConsensusSubspace subspace;
    std::vector<double> residuals; ///< ||D_i - P_u D_i P_v||_F per specialist, source_id order
};

/// lambda * sum_i P_u D_i P_v with projectors from the layer's consensus subspace.
inline SsamLayerResult ssam_merge_layer(const DeltaSet& set, std::size_t k, double lambda,
                                        bool allow_single = false) {
    check_specialist_count(set.size(), allow_single);
    const Covariances cov = accumulate_covariances(set);
    SsamLayerResult out;
    out.subspace = consensus_bases(cov.a, cov.b, k);
    const ProjectionPair proj = projection_operators(out.subspace);
    Matrix sum(set.rows(), set.cols());
    for (const LayerDelta* d : set.ordered()) {
        const LayerDelta projected = project_delta(*d, proj);
        out.residuals.push_back(frobenius_norm(subtract(d->matrix, projected.matrix)));
        add_in_place(sum, projected.matrix);
    }
    out.merged = {set.layer_name, scale(std::move(sum), lambda), 0};
    return out;
}

struct LoraPair {
    Matrix a; ///< d_out x k, equal to U_c
    Matrix b; ///< k x d_in
};

/// A_m = U_c, B_m = U_c^T (lambda sum_i D_i) V_c V_c^T. The product equals
/// the projected merge because P_u is idempotent on range(U_c).
inline LoraPair refactor_lora(const ConsensusSubspace& s, const DeltaSet& set, double lambda) {
    const LayerDelta summed = task_arithmetic_merge(set, lambda);
    if (s.u_c.rows() != summed.matrix.rows() || s.v_c.rows() != summed.matrix.cols()) {
        throw Error(ErrorCode::ShapeMismatch, "subspace does not fit layer '" + set.layer_name + "'");
    }
    const Matrix ut_s = matmul(transpose(s.u_c), summed.matrix);
    return {s.u_c, matmul(matmul(ut_s, s.v_c), transpose(s.v_c))};
}

/// Averages one bias/norm record across specialists. The result keeps the
/// first record's dtype.
inline TensorRecord merge_bias_norm(std::span<const TensorRecord> records) {
    if (records.empty()) {
        throw Error(ErrorCode::TooFewSpecialists, "no records to average");
    }
    const TensorRecord& first = records.front();
    std::vector<double> acc(first.element_count(), 0.0);
    for (const auto& r : records) {
        if (r.name != first.name || r.shape != first.shape) {
            throw Error(ErrorCode::ShapeMismatch, "cannot average '" + r.name + "' with '" + first.name + "'");
        }
        const auto v = r.to_doubles();
        for (std::size_t i = 0; i < acc.size(); ++i) {
            acc[i] += v[i];
        }
    }
    const double inv_n = 1.0 / static_cast<double>(records.size());
    for (double& v : acc) {
        v *= inv_n;
    }
    return TensorRecord::from_values(first.name, first.dtype, first.shape, acc);
}

struct LayerReport {
    std::string layer_name;
    std::size_t k_used = 0; ///< 0 for methods without projection
    std::optional<double> energy_left;
    std::optional<double> energy_right;
    std::vector<double> projection_residuals;
    std::optional<std::size_t> effective_rank_a;
    std::optional<std::size_t> effective_rank_b;
    bool unstable_cut = false;
};

struct MergeReport {
    std::string method;
    std::size_t k_requested = 0;
    double lambda_resolved = 0.0;
    std::size_t n = 0;
    bool emit_lora = false;
    std::vector<std::string> warnings;
    std::vector<LayerReport> layers;
};

struct MergeResult {
    Checkpoint merged;
    MergeReport report;
};

/// Prefix under which specialist `source_id` keeps its modality-specific records.
inline std::string passthrough_prefix(std::size_t source_id) {
    return "specialist" + std::to_string(source_id) + ".";
}

inline std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

namespace detail {

struct LayerOutput {
    std::vector<TensorRecord> records;
    LayerReport report;
    std::vector<std::string> warnings;
    std::size_t lora_rank = 0;
};

inline LayerOutput merge_one_layer(const Checkpoint& base, std::span<const Checkpoint> specialists,
                                   const std::string& layer, const MergeConfig& cfg, double lambda, bool emit_lora) {
    const DeltaSet set = build_delta_set(base, specialists, layer, {cfg.apply_adapter_scale});
    const TensorRecord& base_rec = base.at(layer);
    const Matrix w0 = base_rec.to_matrix();
    LayerOutput out;
    out.report.layer_name = layer;

    if (cfg.method != MergeMethod::Ssam) {
        const LayerDelta merged =
            cfg.method == MergeMethod::Average ? average_merge(set) : task_arithmetic_merge(set, lambda);
        out.report.projection_residuals.assign(set.size(), 0.0);
        out.records.push_back(TensorRecord::from_matrix(layer, base_rec.dtype, add(w0, merged.matrix)));
        return out;
    }

    SsamLayerResult r = ssam_merge_layer(set, cfg.k, lambda, cfg.allow_single);
    const ConsensusSubspace& s = r.subspace;
    out.report.k_used = s.k;
    out.report.energy_left = spectral_energy(s.eig_a, s.k);
    out.report.energy_right = spectral_energy(s.eig_b, s.k);
    out.report.projection_residuals = std::move(r.residuals);
    out.report.effective_rank_a = s.effective_rank_a;
    out.report.effective_rank_b = s.effective_rank_b;
    out.report.unstable_cut = s.unstable_cut;
    for (const auto& w : s.warnings) {
        out.warnings.push_back(layer + ": " + w);
    }
    if (emit_lora) {
        const LoraPair pair = refactor_lora(s, set, lambda);
        out.lora_rank = s.k;
        out.records.push_back(base_rec);
        out.records.push_back(TensorRecord::from_matrix(layer + std::string(kLoraASuffix), base_rec.dtype, pair.a));
        out.records.push_back(TensorRecord::from_matrix(layer + std::string(kLoraBSuffix), base_rec.dtype, pair.b));
    } else {
        out.records.push_back(TensorRecord::from_matrix(layer, base_rec.dtype, add(w0, r.merged.matrix)));
    }
    return out;
}

inline bool any_adapters(std::span<const Checkpoint> specialists) {
    for (const auto& s : specialists) {
        if (!adapter_layers(s).empty()) {
            return true;
        }
    }
    return false;
}

inline Classification classify_with_context(const Checkpoint& c, std::span<const ClassRule> rules,
                                            const std::string& what) {
    try {
        return classify_parameters(c, rules);
    } catch (const Error& e) {
        throw Error(e.code(), what + ": " + e.detail());
    }
}

} // namespace detail

inline MergeResult merge_checkpoints(const Checkpoint& base, std::span<const Checkpoint> specialists,
                                     std::span<const ClassRule> rules, const MergeConfig& cfg) {
    const std::size_t n = specialists.size();
    check_specialist_count(n, cfg.allow_single);
    if (cfg.k == 0) {
        throw Error(ErrorCode::InvalidConfig, "subspace rank k must be at least 1");
    }
    const double lambda =
        cfg.method == MergeMethod::Average ? 1.0 / static_cast<double>(n) : resolve_lambda(cfg.lambda, n);
    const bool emit_lora =
        cfg.method == MergeMethod::Ssam && cfg.emit_lora.value_or(detail::any_adapters(specialists));

    const Classification base_classes = detail::classify_with_context(base, rules, "base");
    std::vector<Classification> spec_classes;
    for (std::size_t i = 0; i < n; ++i) {
        spec_classes.push_back(detail::classify_with_context(specialists[i], rules, "specialist " + std::to_string(i + 1)));
    }

    const std::vector<std::string> layers = language_layers(base, base_classes);
    if (layers.empty()) {
        throw Error(ErrorCode::EmptyLanguageSet, "base has no LanguageLinear layers under the given rules");
    }

    MergeResult result;
    MergeReport& report = result.report;
    report.method = std::string(merge_method_name(cfg.method));
    report.k_requested = cfg.method == MergeMethod::Ssam ? cfg.k : 0;
    report.lambda_resolved = lambda;
    report.n = n;
    report.emit_lora = emit_lora;

    std::vector<detail::LayerOutput> outputs(layers.size());
    parallel_for(layers.size(), cfg.threads, [&](std::size_t i) {
        outputs[i] = detail::merge_one_layer(base, specialists, layers[i], cfg, lambda, emit_lora);
    });

    Checkpoint& merged = result.merged;
    for (const auto& [key, value] : base.meta) {
        if (key.rfind(kMetaLoraRank, 0) != 0 && key.rfind(kMetaLoraAlpha, 0) != 0) {
            merged.meta[key] = value;
        }
    }
    merged.meta["merge.method"] = report.method;
    merged.meta["merge.lambda"] = format_real(lambda);
    merged.meta["merge.n"] = std::to_string(n);
    if (cfg.method == MergeMethod::Ssam) {
        merged.meta["merge.k"] = std::to_string(cfg.k);
    }
    if (emit_lora) {
        const std::string k = std::to_string(cfg.k);
        merged.meta[std::string(kMetaLoraRank)] = k;
        merged.meta[std::string(kMetaLoraAlpha)] = k;
    }

    std::set<std::string> language_names;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        auto& out = outputs[i];
        language_names.insert(layers[i]);
        for (auto& rec : out.records) {
            merged.add(std::move(rec));
        }
        if (emit_lora && out.lora_rank != cfg.k) {
            merged.meta[std::string(kMetaLoraRank) + ":" + layers[i]] = std::to_string(out.lora_rank);
            merged.meta[std::string(kMetaLoraAlpha) + ":" + layers[i]] = std::to_string(out.lora_rank);
        }
        report.warnings.insert(report.warnings.end(), out.warnings.begin(), out.warnings.end());
        report.layers.push_back(std::move(out.report));
    }

    // Bias/norm: average over specialists; a specialist without the record
    // contributes the base value.
    std::set<std::string> bias_norm;
    for (const auto& [name, cls] : base_classes.classes) {
        if (cls == ParamClass::BiasNorm) {
            bias_norm.insert(name);
        }
    }
    for (const auto& c : spec_classes) {
        for (const auto& [name, cls] : c.classes) {
            if (cls == ParamClass::BiasNorm) {
                bias_norm.insert(name);
            }
        }
    }
    for (const auto& name : bias_norm) {
        std::vector<TensorRecord> contributions;
        for (std::size_t i = 0; i < n; ++i) {
            if (specialists[i].contains(name)) {
                contributions.push_back(specialists[i].at(name));
            } else if (base.contains(name)) {
                contributions.push_back(base.at(name));
            } else {
                throw Error(ErrorCode::MissingLayer, "bias/norm '" + name + "' missing from specialist " +
                                                         std::to_string(i + 1) + " and from the base");
            }
        }
        TensorRecord avg = merge_bias_norm(contributions);
        if (base.contains(name)) {
            const TensorRecord& b = base.at(name);
            if (b.shape != avg.shape) {
                throw Error(ErrorCode::ArchMismatch, "bias/norm '" + name + "' shape differs from the base");
            }
            avg = TensorRecord::from_values(name, b.dtype, b.shape, avg.to_doubles());
        }
        merged.add(std::move(avg));
    }

    // Base records that are neither merged nor averaged are kept as-is.
    for (const auto& [name, rec] : base.records) {
        const ParamClass cls = base_classes.of(name);
        if (cls == ParamClass::BiasNorm || language_names.count(name) != 0) {
            continue;
        }
        if (cls == ParamClass::LanguageLinear) {
            continue; // base adapter records are superseded by the merge
        }
        merged.add(rec);
    }

    // Modality-specific records of every specialist, namespaced.
    for (std::size_t i = 0; i < n; ++i) {
        const std::string prefix = passthrough_prefix(i + 1);
        std::size_t kept = 0;
        for (const auto& [name, cls] : spec_classes[i].classes) {
            if (cls != ParamClass::ModalitySpecific) {
                continue;
            }
            TensorRecord rec = specialists[i].at(name);
            rec.name = prefix + name;
            merged.add(std::move(rec));
            ++kept;
        }
        auto id = specialists[i].meta.find("model_id");
        merged.meta["passthrough." + prefix.substr(0, prefix.size() - 1)] =
            id != specialists[i].meta.end() ? id->second : "specialist" + std::to_string(i + 1);
        merged.meta["passthrough." + prefix.substr(0, prefix.size() - 1) + ".records"] = std::to_string(kept);
    }

    validate_checkpoint(merged);
    return result;
}

// ---------------------------------------------------------------------------
// Rank sweep: spectral energy and projection fidelity of one layer for several
// subspace ranks, from a single pair of eigendecompositions.

struct SweepEntry {
    std::string layer_name;
    std::size_t k_requested = 0;
    std::size_t k_used = 0;
    double energy_left = 0.0;
    double energy_right = 0.0;
    std::vector<double> projection_residuals; ///< ||D_i - P_u D_i P_v||_F
    double fidelity = 1.0; ///< 1 - sum_i residual_i^2 / sum_i ||D_i||_F^2
    bool unstable_cut = false;
};

struct SweepReport {
    std::size_t n = 0;
    std::vector<std::size_t> k_values;
    std::vector<std::string> warnings;
    std::vector<SweepEntry> entries;
};

/// Residuals use ||D - P_u D P_v||_F^2 = ||D||_F^2 - ||U_k^T D V_k||_F^2 with
/// the leading k x k block of U^T D V grown in place, so both fidelity and
/// energy are monotone in k by construction of the sums.
inline std::vector<SweepEntry> sweep_layer(const DeltaSet& set, std::span<const std::size_t> ks,
                                           std::vector<std::string>* warnings = nullptr) {
    if (ks.empty()) {
        return {};
    }
    const Covariances cov = accumulate_covariances(set);
    const EigenDecomposition eig_a = sym_eigh(cov.a);
    const EigenDecomposition eig_b = sym_eigh(cov.b);
    const std::size_t k_cap = std::min(set.rows(), set.cols());

    std::vector<std::size_t> order(ks.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return ks[x] < ks[y]; });

    std::vector<SweepEntry> entries(ks.size());
    std::size_t k_big = 0;
    for (std::size_t idx = 0; idx < ks.size(); ++idx) {
        ConsensusSubspace s = consensus_from_eigen(eig_a, eig_b, ks[idx]);
        SweepEntry& e = entries[idx];
        e.layer_name = set.layer_name;
        e.k_requested = ks[idx];
        e.k_used = s.k;
        e.energy_left = spectral_energy(s.eig_a, s.k);
        e.energy_right = spectral_energy(s.eig_b, s.k);
        e.unstable_cut = s.unstable_cut;
        k_big = std::max(k_big, s.k);
        if (warnings != nullptr) {
            for (const auto& w : s.warnings) {
                warnings->push_back(set.layer_name + ": " + w);
            }
        }
    }

    // Same bases consensus_from_eigen would hand out (all-zero sets keep
    // coordinate axes, where every residual is zero anyway).
    const ConsensusSubspace widest = consensus_from_eigen(eig_a, eig_b, std::min(k_big, k_cap));
    const Matrix ut = transpose(widest.u_c);
    const auto members = set.ordered();
    std::vector<double> norms_sq;
    std::vector<Matrix> cores;
    for (const LayerDelta* d : members) {
        norms_sq.push_back(frobenius_norm_sq(d->matrix));
        cores.push_back(matmul(matmul(ut, d->matrix), widest.v_c));
    }
    double total_sq = 0.0;
    for (double v : norms_sq) {
        total_sq += v;
    }

    std::vector<double> captured(members.size(), 0.0);
    std::size_t done = 0;
    for (std::size_t idx : order) {
        const std::size_t k = entries[idx].k_used;
        for (std::size_t m = 0; m < members.size(); ++m) {
            const Matrix& c = cores[m];
            double acc = captured[m];
            // Grow the captured block from done x done to k x k.
            for (std::size_t a = 0; a < k; ++a) {
                for (std::size_t b = (a < done ? done : 0); b < k; ++b) {
                    acc += c(a, b) * c(a, b);
                }
            }
            captured[m] = acc;
        }
        done = std::max(done, k);
        SweepEntry& e = entries[idx];
        double residual_sq_total = 0.0;
        e.projection_residuals.clear();
        for (std::size_t m = 0; m < members.size(); ++m) {
            const double r2 = std::max(norms_sq[m] - captured[m], 0.0);
            residual_sq_total += r2;
            e.projection_residuals.push_back(std::sqrt(r2));
        }
        e.fidelity = total_sq > 0.0 ? std::clamp(1.0 - residual_sq_total / total_sq, 0.0, 1.0) : 1.0;
    }
    return entries;
}

/// Sweep over every LanguageLinear layer; entries are layer-major in layer
/// name order, then in the order of `ks`.
inline SweepReport sweep_checkpoints(const Checkpoint& base, std::span<const Checkpoint> specialists,
                                     std::span<const ClassRule> rules, std::span<const std::size_t> ks,
                                     const MergeConfig& cfg) {
    check_specialist_count(specialists.size(), cfg.allow_single);
    const Classification classes = detail::classify_with_context(base, rules, "base");
    const std::vector<std::string> layers = language_layers(base, classes);
    if (layers.empty()) {
        throw Error(ErrorCode::EmptyLanguageSet, "base has no LanguageLinear layers under the given rules");
    }
    for (auto k : ks) {
        if (k == 0) {
            throw Error(ErrorCode::InvalidConfig, "sweep ranks must be at least 1");
        }
    }
    std::vector<std::vector<SweepEntry>> per_layer(layers.size());
    std::vector<std::vector<std::string>> per_layer_warnings(layers.size());
    parallel_for(layers.size(), cfg.threads, [&](std::size_t i) {
        const DeltaSet set = build_delta_set(base, specialists, layers[i], {cfg.apply_adapter_scale});
        per_layer[i] = sweep_layer(set, ks, &per_layer_warnings[i]);
    });
    SweepReport report;
    report.n = specialists.size();
    report.k_values.assign(ks.begin(), ks.end());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        for (auto& e : per_layer[i]) {
            report.entries.push_back(std::move(e));
        }
        report.warnings.insert(report.warnings.end(), per_layer_warnings[i].begin(), per_layer_warnings[i].end());
    }
    return report;
}

} // namespace smerge
