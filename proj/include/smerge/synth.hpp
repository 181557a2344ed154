// SPDX-License-Identifier: Apache-2.0
//
// Synthetic specialists with a planted shared subspace:
//
//   D_i = U* C_i V*^T + sigma / sqrt(d_out * d_in) * G_i
//
// Random stream (reproducible in any language):
//   * SplitMix64: state += 0x9E3779B97F4A7C15, then the usual xor-shift /
//     multiply finalizer with constants 0xBF58476D1CE4E5B9, 0x94D049BB133111EB.
//   * uniform in (0, 1]: ((x >> 11) + 1) * 2^-53.
//   * standard normals: Box-Muller on consecutive uniform pairs (u1, u2),
//     emitting sqrt(-2 ln u1) cos(2 pi u2) then sqrt(-2 ln u1) sin(2 pi u2).
//   * layer l draws from its own SplitMix64 seeded with the (l+1)-th output of
//     SplitMix64(seed).
//   * within a layer, in order: U* (d_out x s, row-major), V* (d_in x s),
//     C_1..C_n (s x s, times coeff_scale), then G_1..G_n (d_out x d_in,
//     skipped when sigma = 0). U* and V* are orthonormalized by two passes of
//     modified Gram-Schmidt over columns.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "smerge/checkpoint.hpp"
#include "smerge/consensus.hpp"
#include "smerge/deltas.hpp"

namespace smerge {

class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform on (0, 1].
    double uniform() { return static_cast<double>((next() >> 11) + 1) * 0x1p-53; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

struct SynthSpec {
    std::size_t d_out = 64;
    std::size_t d_in = 48;
    std::size_t n = 3;
    std::size_t shared_rank = 8;
    double noise_sigma = 0.0;
    double coeff_scale = 1.0;
    std::uint64_t seed = 0xC0FFEE;
    std::size_t num_layers = 1;
};

struct PlantedGroundTruth {
    Matrix u_star; ///< d_out x s
    Matrix v_star; ///< d_in x s
    std::vector<Matrix> coefficients; ///< C_i, s x s
};

struct SynthLayer {
    DeltaSet set;
    PlantedGroundTruth truth;
};

inline void validate_synth_spec(const SynthSpec& spec) {
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidConfig, "synthetic spec: " + msg); };
    if (spec.d_out == 0 || spec.d_in == 0) fail("dimensions must be positive");
    if (spec.n == 0) fail("need at least one specialist");
    if (spec.shared_rank == 0) fail("shared rank must be at least 1");
    if (spec.shared_rank > std::min(spec.d_out, spec.d_in)) fail("shared rank exceeds min(d_out, d_in)");
    if (!(spec.noise_sigma >= 0.0) || !std::isfinite(spec.noise_sigma)) fail("noise sigma must be >= 0");
    if (!(spec.coeff_scale > 0.0) || !std::isfinite(spec.coeff_scale)) fail("coeff scale must be > 0");
    if (spec.num_layers == 0) fail("need at least one layer");
}

inline std::string synth_layer_name(std::size_t layer) {
    return "decoder.layers." + std::to_string(layer) + ".proj.weight";
}

namespace detail {

inline Matrix normal_matrix(SplitMix64& rng, std::size_t rows, std::size_t cols, double factor = 1.0) {
    Matrix m(rows, cols);
    for (double& v : m.data()) {
        v = factor * rng.normal();
    }
    return m;
}

// Modified Gram-Schmidt over columns, run twice.
inline Matrix orthonormalize_columns(Matrix m) {
    const std::size_t rows = m.rows();
    const std::size_t cols = m.cols();
    for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t j = 0; j < cols; ++j) {
            for (std::size_t p = 0; p < j; ++p) {
                double dot = 0.0;
                for (std::size_t r = 0; r < rows; ++r) {
                    dot += m(r, p) * m(r, j);
                }
                for (std::size_t r = 0; r < rows; ++r) {
                    m(r, j) -= dot * m(r, p);
                }
            }
            double norm = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                norm += m(r, j) * m(r, j);
            }
            norm = std::sqrt(norm);
            if (norm == 0.0) {
                throw Error(ErrorCode::NoConvergence, "planted basis is rank deficient");
            }
            for (std::size_t r = 0; r < rows; ++r) {
                m(r, j) /= norm;
            }
        }
    }
    return m;
}

inline std::uint64_t layer_seed(std::uint64_t seed, std::size_t layer) {
    SplitMix64 master(seed);
    std::uint64_t s = 0;
    for (std::size_t i = 0; i <= layer; ++i) {
        s = master.next();
    }
    return s;
}

} // namespace detail

/// Deltas and ground truth for one layer; independent of the other layers.
inline SynthLayer generate_layer(const SynthSpec& spec, std::size_t layer) {
    validate_synth_spec(spec);
    SplitMix64 rng(detail::layer_seed(spec.seed, layer));
    const std::size_t s = spec.shared_rank;
    SynthLayer out;
    out.truth.u_star = detail::orthonormalize_columns(detail::normal_matrix(rng, spec.d_out, s));
    out.truth.v_star = detail::orthonormalize_columns(detail::normal_matrix(rng, spec.d_in, s));
    for (std::size_t i = 0; i < spec.n; ++i) {
        out.truth.coefficients.push_back(detail::normal_matrix(rng, s, s, spec.coeff_scale));
    }
    const Matrix vt = transpose(out.truth.v_star);
    out.set.layer_name = synth_layer_name(layer);
    for (std::size_t i = 0; i < spec.n; ++i) {
        Matrix d = matmul(matmul(out.truth.u_star, out.truth.coefficients[i]), vt);
        out.set.deltas.push_back({out.set.layer_name, std::move(d), i + 1});
    }
    if (spec.noise_sigma > 0.0) {
        const double factor = spec.noise_sigma / std::sqrt(static_cast<double>(spec.d_out * spec.d_in));
        for (std::size_t i = 0; i < spec.n; ++i) {
            add_in_place(out.set.deltas[i].matrix, detail::normal_matrix(rng, spec.d_out, spec.d_in, factor));
        }
    }
    return out;
}

struct SynthData {
    std::map<std::string, DeltaSet> sets;
    std::map<std::string, PlantedGroundTruth> truth;
};

inline SynthData generate_specialists(const SynthSpec& spec) {
    validate_synth_spec(spec);
    SynthData out;
    for (std::size_t l = 0; l < spec.num_layers; ++l) {
        SynthLayer layer = generate_layer(spec, l);
        out.truth.emplace(layer.set.layer_name, std::move(layer.truth));
        out.sets.emplace(layer.set.layer_name, std::move(layer.set));
    }
    return out;
}

/// Largest principal angle between the first s recovered directions and the
/// planted bases, left and right.
inline std::pair<double, double> recovery_error(const ConsensusSubspace& subspace, const PlantedGroundTruth& truth) {
    const std::size_t s = truth.u_star.cols();
    if (subspace.k < s) {
        throw Error(ErrorCode::RankTooSmall, "subspace rank " + std::to_string(subspace.k) +
                                                 " is below the planted rank " + std::to_string(s));
    }
    const auto left = principal_angles(leading_columns(subspace.u_c, s), truth.u_star);
    const auto right = principal_angles(leading_columns(subspace.v_c, s), truth.v_star);
    return {left.back(), right.back()};
}

struct SynthCheckpoints {
    Checkpoint base;
    std::vector<Checkpoint> specialists;
};

/// Full checkpoints around the synthetic deltas: a random base, specialists
/// W_0 + D_i, plus per-layer norm vectors, an encoder per specialist and a
/// frozen head so every parameter class appears. With `adapters` the
/// specialists carry (lora_A, lora_B) = (U* C_i / 2, V*^T) with
/// lora_r = s and lora_alpha = 2s instead of full weights; this needs sigma = 0.
inline SynthCheckpoints synth_checkpoints(const SynthSpec& spec, Dtype dtype = Dtype::F64, bool adapters = false) {
    validate_synth_spec(spec);
    if (adapters && spec.noise_sigma != 0.0) {
        throw Error(ErrorCode::InvalidConfig, "adapter-form synthetic specialists need sigma = 0");
    }
    SplitMix64 rng(spec.seed ^ 0xBA5EBA5EBA5EBA5EULL);
    SynthCheckpoints out;
    out.specialists.resize(spec.n);
    out.base.meta["model_id"] = "synthetic-base";
    for (std::size_t i = 0; i < spec.n; ++i) {
        out.specialists[i].meta["model_id"] = "synthetic-specialist-" + std::to_string(i + 1);
        if (adapters) {
            out.specialists[i].meta[std::string(kMetaLoraRank)] = std::to_string(spec.shared_rank);
            out.specialists[i].meta[std::string(kMetaLoraAlpha)] = std::to_string(2 * spec.shared_rank);
        }
    }
    const std::vector<std::uint64_t> vec_shape = {spec.d_out};
    for (std::size_t l = 0; l < spec.num_layers; ++l) {
        SynthLayer layer = generate_layer(spec, l);
        const std::string& name = layer.set.layer_name;
        const Matrix w0 = detail::normal_matrix(rng, spec.d_out, spec.d_in, 0.02);
        out.base.add(TensorRecord::from_matrix(name, dtype, w0));
        const std::string norm_name = "decoder.layers." + std::to_string(l) + ".norm.weight";
        std::vector<double> norm(spec.d_out, 1.0);
        out.base.add(TensorRecord::from_values(norm_name, dtype, vec_shape, norm));
        for (std::size_t i = 0; i < spec.n; ++i) {
            Checkpoint& sc = out.specialists[i];
            if (adapters) {
                const Matrix a = scale(matmul(layer.truth.u_star, layer.truth.coefficients[i]), 0.5);
                sc.add(TensorRecord::from_matrix(name + std::string(kLoraASuffix), dtype, a));
                sc.add(TensorRecord::from_matrix(name + std::string(kLoraBSuffix), dtype,
                                                 transpose(layer.truth.v_star)));
            } else {
                sc.add(TensorRecord::from_matrix(name, dtype, add(w0, layer.set.deltas[i].matrix)));
            }
            std::vector<double> spec_norm(spec.d_out);
            for (double& v : spec_norm) {
                v = 1.0 + 0.01 * rng.normal();
            }
            sc.add(TensorRecord::from_values(norm_name, dtype, vec_shape, spec_norm));
        }
    }
    const Matrix head = detail::normal_matrix(rng, 4, spec.d_out, 0.02);
    out.base.add(TensorRecord::from_matrix("lm_head.weight", dtype, head));
    for (std::size_t i = 0; i < spec.n; ++i) {
        const Matrix enc = detail::normal_matrix(rng, spec.d_in, 6, 0.1);
        out.specialists[i].add(TensorRecord::from_matrix("encoder.proj.weight", dtype, enc));
    }
    return out;
}

} // namespace smerge
