// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "smerge/checkpoint.hpp"
#include "smerge/linalg.hpp"

namespace smerge {

/// Language vector of one specialist for one linear layer.
struct LayerDelta {
    std::string layer_name;
    Matrix matrix;
    std::size_t source_id = 1;
};

/// The deltas of all specialists for one layer, ordered by source_id.
struct DeltaSet {
    std::string layer_name;
    std::vector<LayerDelta> deltas;

    std::size_t size() const noexcept { return deltas.size(); }
    std::size_t rows() const { return deltas.empty() ? 0 : deltas.front().matrix.rows(); }
    std::size_t cols() const { return deltas.empty() ? 0 : deltas.front().matrix.cols(); }

    /// Members sorted by source_id; summations iterate in this order.
    std::vector<const LayerDelta*> ordered() const {
        std::vector<const LayerDelta*> out;
        out.reserve(deltas.size());
        for (const auto& d : deltas) {
            out.push_back(&d);
        }
        std::stable_sort(out.begin(), out.end(),
                         [](const LayerDelta* a, const LayerDelta* b) { return a->source_id < b->source_id; });
        return out;
    }
};

inline void validate_delta_set(const DeltaSet& set) {
    if (set.deltas.empty()) {
        throw Error(ErrorCode::TooFewSpecialists, "delta set for '" + set.layer_name + "' is empty");
    }
    const Matrix& first = set.deltas.front().matrix;
    for (const auto& d : set.deltas) {
        if (!d.matrix.same_shape(first)) {
            throw Error(ErrorCode::ArchMismatch, "delta set for '" + set.layer_name + "' mixes shapes " +
                                                     shape_string(first) + " and " + shape_string(d.matrix));
        }
    }
}

/// W_i - W_0
inline LayerDelta full_delta(const Matrix& specialist, const Matrix& base, std::string layer_name = {},
                             std::size_t source_id = 1) {
    if (!specialist.same_shape(base)) {
        throw Error(ErrorCode::ShapeMismatch, "layer '" + layer_name + "': specialist weight " +
                                                  shape_string(specialist) + " vs base " + shape_string(base));
    }
    return {std::move(layer_name), subtract(specialist, base), source_id};
}

/// (alpha / r) * A * B for an adapter pair A (d_out x r), B (r x d_in).
inline LayerDelta lora_delta(const Matrix& a, const Matrix& b, double alpha, std::size_t rank,
                             std::string layer_name = {}, std::size_t source_id = 1) {
    if (a.cols() != rank || b.rows() != rank) {
        throw Error(ErrorCode::InconsistentRank, "layer '" + layer_name + "': adapter shapes " + shape_string(a) +
                                                     " and " + shape_string(b) + " do not match rank " +
                                                     std::to_string(rank));
    }
    if (!(alpha > 0.0) || !std::isfinite(alpha)) {
        throw Error(ErrorCode::AdapterMeta, "layer '" + layer_name + "': adapter alpha must be positive");
    }
    return {std::move(layer_name), scale(matmul(a, b), alpha / static_cast<double>(rank)), source_id};
}

struct DeltaOptions {
    /// Multiply adapter products by alpha / r from the checkpoint meta.
    bool apply_adapter_scale = true;
};

/// Names of the base's LanguageLinear weights (adapter records excluded).
inline std::vector<std::string> language_layers(const Checkpoint& base, const Classification& classes) {
    std::vector<std::string> out;
    for (const auto& [name, rec] : base.records) {
        if (classes.of(name) == ParamClass::LanguageLinear && !detail::ends_with(name, kLoraASuffix) &&
            !detail::ends_with(name, kLoraBSuffix)) {
            out.push_back(name);
        }
    }
    return out;
}

/// Language vectors of one layer. A specialist contributes its adapter pair
/// when it has one, otherwise its full weight.
inline DeltaSet build_delta_set(const Checkpoint& base, std::span<const Checkpoint> specialists,
                                const std::string& layer, const DeltaOptions& options = {}) {
    const Matrix w0 = base.at(layer).to_matrix();
    DeltaSet set{layer, {}};
    set.deltas.reserve(specialists.size());
    for (std::size_t i = 0; i < specialists.size(); ++i) {
        const Checkpoint& spec = specialists[i];
        const std::size_t source_id = i + 1;
        const std::string a_name = layer + std::string(kLoraASuffix);
        LayerDelta delta;
        if (spec.contains(a_name)) {
            const AdapterParams p = adapter_params(spec, layer);
            const Matrix a = spec.at(a_name).to_matrix();
            const Matrix b = spec.at(layer + std::string(kLoraBSuffix)).to_matrix();
            const double alpha = options.apply_adapter_scale ? p.alpha : static_cast<double>(p.rank);
            delta = lora_delta(a, b, alpha, p.rank, layer, source_id);
        } else if (spec.contains(layer)) {
            const Matrix wi = spec.at(layer).to_matrix();
            if (!wi.same_shape(w0)) {
                throw Error(ErrorCode::ArchMismatch, "layer '" + layer + "' of specialist " +
                                                         std::to_string(source_id) + " is " + shape_string(wi) +
                                                         ", base is " + shape_string(w0));
            }
            delta = full_delta(wi, w0, layer, source_id);
        } else {
            throw Error(ErrorCode::MissingLayer,
                        "specialist " + std::to_string(source_id) + " lacks layer '" + layer + "'");
        }
        if (!delta.matrix.same_shape(w0)) {
            throw Error(ErrorCode::ArchMismatch, "adapter update for '" + layer + "' of specialist " +
                                                     std::to_string(source_id) + " is " +
                                                     shape_string(delta.matrix) + ", base is " + shape_string(w0));
        }
        set.deltas.push_back(std::move(delta));
    }
    return set;
}

/// One DeltaSet per LanguageLinear layer of the base.
inline std::map<std::string, DeltaSet> build_delta_sets(const Checkpoint& base,
                                                        std::span<const Checkpoint> specialists,
                                                        const Classification& classes,
                                                        const DeltaOptions& options = {}) {
    std::map<std::string, DeltaSet> out;
    for (const auto& layer : language_layers(base, classes)) {
        out.emplace(layer, build_delta_set(base, specialists, layer, options));
    }
    return out;
}

} // namespace smerge
