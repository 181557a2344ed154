// SPDX-License-Identifier: Apache-2.0
//
// Shared consensus subspace of a layer's language vectors: the top-k
// eigenvectors of A = sum_i D_i D_i^T and B = sum_i D_i^T D_i, the
// orthogonal projectors onto their spans, and spectral diagnostics.

#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "smerge/deltas.hpp"
#include "smerge/linalg.hpp"

namespace smerge {

struct Covariances {
    Matrix a; ///< d_out x d_out
    Matrix b; ///< d_in x d_in
};

/// Per-specialist Gram matrices summed in ascending source_id order. Cross
/// terms D_i D_j^T (i != j) are not included.
inline Covariances accumulate_covariances(const DeltaSet& set) {
    validate_delta_set(set);
    Covariances cov{Matrix(set.rows(), set.rows()), Matrix(set.cols(), set.cols())};
    for (const LayerDelta* d : set.ordered()) {
        add_in_place(cov.a, gram_left(d->matrix));
        add_in_place(cov.b, gram_right(d->matrix));
    }
    return cov;
}

struct ConsensusSubspace {
    Matrix u_c; ///< d_out x k
    Matrix v_c; ///< d_in x k
    std::vector<double> eig_a;
    std::vector<double> eig_b;
    std::size_t k = 0;
    std::size_t k_requested = 0;
    std::size_t effective_rank_a = 0;
    std::size_t effective_rank_b = 0;
    std::size_t clamped_a = 0; ///< eigenvalues zeroed by the 1e-12 relative floor
    std::size_t clamped_b = 0;
    bool unstable_cut = false;
    std::vector<std::string> warnings;
};

namespace detail {

inline std::size_t count_positive(std::span<const double> eig) {
    return static_cast<std::size_t>(std::count_if(eig.begin(), eig.end(), [](double v) { return v > 0.0; }));
}

// eig[k-1] and eig[k] equal within 1e-10 relative while carrying energy.
inline bool degenerate_cut(std::span<const double> eig, std::size_t k) {
    if (k == 0 || k >= eig.size()) {
        return false;
    }
    const double last = eig[k - 1];
    return last > 0.0 && last - eig[k] <= 1e-10 * last;
}

} // namespace detail

/// Builds the subspace from full eigendecompositions of A and B. `k` is
/// clamped to min(d_out, d_in).
inline ConsensusSubspace consensus_from_eigen(EigenDecomposition eig_a, EigenDecomposition eig_b, std::size_t k) {
    if (k == 0) {
        throw Error(ErrorCode::InvalidConfig, "subspace rank k must be at least 1");
    }
    const std::size_t d_out = eig_a.eigenvalues.size();
    const std::size_t d_in = eig_b.eigenvalues.size();
    ConsensusSubspace s;
    s.k_requested = k;
    s.k = std::min({k, d_out, d_in});
    if (s.k != k) {
        s.warnings.push_back("k clamped from " + std::to_string(k) + " to " + std::to_string(s.k));
    }
    s.clamped_a = clamp_small_eigenvalues(eig_a.eigenvalues);
    s.clamped_b = clamp_small_eigenvalues(eig_b.eigenvalues);
    s.effective_rank_a = detail::count_positive(eig_a.eigenvalues);
    s.effective_rank_b = detail::count_positive(eig_b.eigenvalues);

    if (s.effective_rank_a == 0 && s.effective_rank_b == 0) {
        // All deltas vanish: any basis works, use coordinate axes.
        s.u_c = leading_columns(Matrix::identity(d_out), s.k);
        s.v_c = leading_columns(Matrix::identity(d_in), s.k);
        std::fill(eig_a.eigenvalues.begin(), eig_a.eigenvalues.end(), 0.0);
        std::fill(eig_b.eigenvalues.begin(), eig_b.eigenvalues.end(), 0.0);
        s.warnings.push_back("all deltas are zero; using coordinate bases");
    } else {
        s.u_c = leading_columns(eig_a.eigenvectors, s.k);
        s.v_c = leading_columns(eig_b.eigenvectors, s.k);
        if (detail::degenerate_cut(eig_a.eigenvalues, s.k) || detail::degenerate_cut(eig_b.eigenvalues, s.k)) {
            s.unstable_cut = true;
            s.warnings.push_back("eigenvalues tie at the rank-" + std::to_string(s.k) + " cut; basis is unstable");
        }
    }
    s.eig_a = std::move(eig_a.eigenvalues);
    s.eig_b = std::move(eig_b.eigenvalues);
    return s;
}

inline ConsensusSubspace consensus_bases(const Matrix& a, const Matrix& b, std::size_t k) {
    return consensus_from_eigen(sym_eigh(a), sym_eigh(b), k);
}

struct ProjectionPair {
    Matrix p_u; ///< U_c U_c^T
    Matrix p_v; ///< V_c V_c^T
};

inline ProjectionPair projection_operators(const ConsensusSubspace& s) {
    return {gram_left(s.u_c), gram_left(s.v_c)};
}

/// P_u * D * P_v
inline LayerDelta project_delta(const LayerDelta& d, const ProjectionPair& p) {
    if (p.p_u.rows() != d.matrix.rows() || p.p_v.rows() != d.matrix.cols()) {
        throw Error(ErrorCode::ShapeMismatch, "cannot project " + shape_string(d.matrix) + " with projectors " +
                                                  shape_string(p.p_u) + " and " + shape_string(p.p_v));
    }
    return {d.layer_name, matmul(matmul(p.p_u, d.matrix), p.p_v), d.source_id};
}

/// Fraction of the spectrum held by the top k values; 1 for an all-zero spectrum.
inline double spectral_energy(std::span<const double> eig, std::size_t k) {
    double head = 0.0;
    for (std::size_t j = 0; j < std::min(k, eig.size()); ++j) {
        head += eig[j];
    }
    double total = head;
    for (std::size_t j = std::min(k, eig.size()); j < eig.size(); ++j) {
        total += eig[j];
    }
    if (total <= 0.0) {
        return 1.0;
    }
    return std::clamp(head / total, 0.0, 1.0);
}

inline constexpr double kOrthonormalTolerance = 1e-6;

/// Principal angles (ascending, radians) between span(U1) and span(U2).
/// Cosines are the singular values of U1^T U2; angles under pi/4 are taken
/// from the sines, the singular values of U2 - U1 U1^T U2, which resolves
/// small angles to full precision.
inline std::vector<double> principal_angles(const Matrix& u1, const Matrix& u2) {
    if (!u1.same_shape(u2)) {
        throw Error(ErrorCode::ShapeMismatch,
                    "principal angles need equal shapes, got " + shape_string(u1) + " and " + shape_string(u2));
    }
    if (u1.cols() > u1.rows()) {
        throw Error(ErrorCode::ShapeMismatch, "basis " + shape_string(u1) + " has more columns than rows");
    }
    for (const Matrix* u : {&u1, &u2}) {
        const double defect = orthonormal_defect(*u);
        if (defect > kOrthonormalTolerance) {
            throw Error(ErrorCode::NotOrthonormal,
                        "principal angles need orthonormal bases, defect " + std::to_string(defect));
        }
    }
    const Matrix m = matmul(transpose(u1), u2);
    const Matrix r = subtract(u2, matmul(u1, m));
    std::vector<double> cosines = sym_eigh(gram_right(m)).eigenvalues;     // descending
    std::vector<double> sines = sym_eigh(gram_right(r)).eigenvalues;       // descending
    std::reverse(sines.begin(), sines.end());                              // ascending
    const std::size_t k = cosines.size();
    std::vector<double> angles(k);
    for (std::size_t j = 0; j < k; ++j) {
        const double c = std::clamp(std::sqrt(std::max(cosines[j], 0.0)), 0.0, 1.0);
        const double from_cos = std::acos(c);
        if (from_cos < std::numbers::pi / 4) {
            const double s = std::clamp(std::sqrt(std::max(sines[j], 0.0)), 0.0, 1.0);
            angles[j] = std::asin(s);
        } else {
            angles[j] = from_cos;
        }
    }
    std::sort(angles.begin(), angles.end());
    return angles;
}

} // namespace smerge
