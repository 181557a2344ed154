// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>

#include "oracles.hpp"
#include "smerge/merge.hpp"
#include "smerge/synth.hpp"
#include "test_support.hpp"

using namespace smerge;
using testing_support::expect_error;

namespace {

DeltaSet make_set(const std::vector<Matrix>& ms) {
    DeltaSet set{"layer", {}};
    for (std::size_t i = 0; i < ms.size(); ++i) {
        set.deltas.push_back({"layer", ms[i], i + 1});
    }
    return set;
}

DeltaSet random_set(std::mt19937_64& rng, std::size_t n, std::size_t rows, std::size_t cols) {
    std::vector<Matrix> ms;
    for (std::size_t i = 0; i < n; ++i) {
        ms.push_back(oracle::random_matrix(rng, rows, cols));
    }
    return make_set(ms);
}

Matrix low_rank(std::mt19937_64& rng, std::size_t rows, std::size_t cols, std::size_t rank) {
    return oracle::naive_matmul(oracle::random_matrix(rng, rows, rank), oracle::random_matrix(rng, rank, cols));
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
    return a.same_shape(b) && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

double relative_diff(const Matrix& a, const Matrix& b) {
    return oracle::fro_diff(a, b) / std::max(oracle::fro(b), 1e-300);
}

SynthSpec small_spec(std::size_t layers, std::size_t n, std::size_t d_out, std::size_t d_in, std::size_t s,
                     double sigma, std::uint64_t seed = 7) {
    SynthSpec spec;
    spec.num_layers = layers;
    spec.n = n;
    spec.d_out = d_out;
    spec.d_in = d_in;
    spec.shared_rank = s;
    spec.noise_sigma = sigma;
    spec.seed = seed;
    return spec;
}

MergeConfig ssam(std::size_t k, std::optional<double> lambda = std::nullopt) {
    MergeConfig cfg;
    cfg.k = k;
    cfg.lambda = lambda;
    return cfg;
}

} // namespace

TEST(SsamMergeLayer, IdenticalLowRankDeltasAreFixedPoint) {
    std::mt19937_64 rng(60);
    const Matrix d = low_rank(rng, 12, 10, 3);
    const auto r = ssam_merge_layer(make_set({d, d, d}), 4, 1.0 / 3.0);
    EXPECT_LE(oracle::fro_diff(r.merged.matrix, d), 1e-9 * oracle::fro(d));
}

TEST(SsamMergeLayer, ZeroDeltas) {
    const auto r = ssam_merge_layer(make_set({Matrix(5, 4), Matrix(5, 4)}), 2, 0.5);
    EXPECT_EQ(r.merged.matrix, Matrix(5, 4));
    EXPECT_EQ(r.residuals, (std::vector<double>{0.0, 0.0}));
}

TEST(SsamMergeLayer, FullRankEqualsTaskArithmetic) {
    std::mt19937_64 rng(61);
    for (std::size_t d : {1u, 4u, 9u}) {
        const DeltaSet set = random_set(rng, 3, d, d);
        const auto r = ssam_merge_layer(set, d, 0.4);
        EXPECT_LE(relative_diff(r.merged.matrix, task_arithmetic_merge(set, 0.4).matrix), 1e-8);
    }
    // A single rectangular delta: both projectors cover its row and column spaces.
    const DeltaSet single = random_set(rng, 1, 11, 6);
    const auto r = ssam_merge_layer(single, 6, 1.0, true);
    EXPECT_LE(relative_diff(r.merged.matrix, task_arithmetic_merge(single, 1.0).matrix), 1e-8);
}

TEST(SsamMergeLayer, RankBoundedByK) {
    std::mt19937_64 rng(62);
    const auto r = ssam_merge_layer(random_set(rng, 4, 10, 8), 3, 0.25);
    const auto sv = oracle::jacobi_singular_values(r.merged.matrix);
    for (std::size_t j = 3; j < sv.size(); ++j) {
        EXPECT_LE(sv[j], 1e-10 * sv[0]);
    }
}

TEST(SsamMergeLayer, SingleRequiresOverride) {
    std::mt19937_64 rng(63);
    const DeltaSet single = random_set(rng, 1, 4, 4);
    expect_error(ErrorCode::TooFewSpecialists, [&] { ssam_merge_layer(single, 2, 1.0); });
    EXPECT_NO_THROW(ssam_merge_layer(single, 2, 1.0, true));
}

TEST(RefactorLora, Examples) {
    const DeltaSet zero = make_set({Matrix(5, 4), Matrix(5, 4)});
    const auto rz = ssam_merge_layer(zero, 2, 0.5);
    const LoraPair pz = refactor_lora(rz.subspace, zero, 0.5);
    EXPECT_EQ(pz.b, Matrix(2, 4));
    EXPECT_EQ(matmul(pz.a, pz.b), Matrix(5, 4));

    std::mt19937_64 rng(64);
    const Matrix d = low_rank(rng, 9, 7, 2);
    const DeltaSet one = make_set({d});
    const auto r1 = ssam_merge_layer(one, 3, 1.0, true);
    const LoraPair p1 = refactor_lora(r1.subspace, one, 1.0);
    EXPECT_LE(oracle::fro_diff(oracle::naive_matmul(p1.a, p1.b), d), 1e-8 * oracle::fro(d));

    const DeltaSet three = random_set(rng, 3, 10, 8);
    const auto r3 = ssam_merge_layer(three, 4, 1.0 / 3.0);
    const LoraPair p3 = refactor_lora(r3.subspace, three, 1.0 / 3.0);
    EXPECT_EQ(p3.a, r3.subspace.u_c);
    EXPECT_EQ(p3.b.rows(), 4u);
    EXPECT_LE(relative_diff(oracle::naive_matmul(p3.a, p3.b), r3.merged.matrix), 1e-8);
}

TEST(RefactorLora, ExactnessProperty) {
    std::mt19937_64 rng(65);
    std::uniform_int_distribution<std::size_t> dim(1, 14), count(2, 5);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t rows = dim(rng), cols = dim(rng);
        const std::size_t k = 1 + rng() % std::min(rows, cols);
        const DeltaSet set = random_set(rng, count(rng), rows, cols);
        const auto r = ssam_merge_layer(set, k, 0.3);
        const LoraPair p = refactor_lora(r.subspace, set, 0.3);
        EXPECT_LE(oracle::fro_diff(oracle::naive_matmul(p.a, p.b), r.merged.matrix),
                  1e-8 * std::max(oracle::fro(r.merged.matrix), 1e-12));
    }
}

TEST(TaskArithmetic, Examples) {
    std::mt19937_64 rng(66);
    const Matrix d = oracle::random_matrix(rng, 4, 3);
    EXPECT_EQ(task_arithmetic_merge(make_set({d, smerge::scale(d, -1.0)}), 1.0).matrix, Matrix(4, 3));
    EXPECT_EQ(task_arithmetic_merge(make_set({d, d}), 0.5).matrix, d);
    const DeltaSet set = random_set(rng, 4, 6, 5);
    const Matrix via_average = smerge::scale(average_merge(set).matrix, 0.7 * 4);
    EXPECT_LE(max_abs_diff(task_arithmetic_merge(set, 0.7).matrix, via_average), 1e-12);
}

TEST(AverageMerge, BitwiseEqualToTaskArithmetic) {
    std::mt19937_64 rng(67);
    for (std::size_t n = 1; n <= 7; ++n) {
        const DeltaSet set = random_set(rng, n, 5, 6);
        EXPECT_TRUE(bitwise_equal(average_merge(set).matrix,
                                  task_arithmetic_merge(set, 1.0 / static_cast<double>(n)).matrix));
    }
    const Matrix d = oracle::random_matrix(rng, 3, 3);
    EXPECT_EQ(average_merge(make_set({d})).matrix, d);
    EXPECT_EQ(average_merge(make_set({Matrix(2, 2), Matrix(2, 2)})).matrix, Matrix(2, 2));
}

TEST(MergeBiasNorm, Examples) {
    const auto r = TensorRecord::from_values("n", Dtype::F64, {3}, std::vector<double>{1.5, -2, 3});
    const std::vector<TensorRecord> same = {r, r, r};
    EXPECT_EQ(merge_bias_norm(same), r);
    const std::vector<TensorRecord> pair = {TensorRecord::from_values("n", Dtype::F64, {1}, std::vector<double>{0}),
                                            TensorRecord::from_values("n", Dtype::F64, {1}, std::vector<double>{2})};
    EXPECT_EQ(merge_bias_norm(pair).to_doubles(), (std::vector<double>{1.0}));

    std::mt19937_64 rng(68);
    std::normal_distribution<double> normal;
    std::vector<TensorRecord> three;
    std::vector<std::vector<double>> raw;
    for (int i = 0; i < 3; ++i) {
        std::vector<double> v(17);
        for (double& x : v) x = normal(rng);
        raw.push_back(v);
        three.push_back(TensorRecord::from_values("n", Dtype::F64, {17}, v));
    }
    const auto mean = merge_bias_norm(three).to_doubles();
    for (std::size_t j = 0; j < 17; ++j) {
        double s = 0.0;
        for (int i = 0; i < 3; ++i) s += raw[i][j];
        EXPECT_NEAR(mean[j], s / 3.0, 1e-12);
    }
    const std::vector<TensorRecord> mismatched = {TensorRecord::from_values("n", Dtype::F64, {1}, std::vector<double>{0}),
                                                  TensorRecord::from_values("n", Dtype::F64, {2}, std::vector<double>{0, 0})};
    expect_error(ErrorCode::ShapeMismatch, [&] { merge_bias_norm(mismatched); });
}

TEST(MergeCheckpoints, IdenticalSpecialistsAreFixedPoint) {
    const auto sc = synth_checkpoints(small_spec(2, 1, 10, 8, 3, 0.0));
    const std::vector<Checkpoint> specs = {sc.specialists[0], sc.specialists[0]};
    const auto rules = default_rules();
    const auto res = merge_checkpoints(sc.base, specs, rules, ssam(4, 0.5));
    for (std::size_t l = 0; l < 2; ++l) {
        const std::string name = synth_layer_name(l);
        const Matrix expected = specs[0].at(name).to_matrix();
        EXPECT_LE(oracle::fro_diff(res.merged.at(name).to_matrix(), expected), 1e-8 * oracle::fro(expected));
        const std::string norm = "decoder.layers." + std::to_string(l) + ".norm.weight";
        EXPECT_EQ(res.merged.at(norm), specs[0].at(norm));
    }
}

TEST(MergeCheckpoints, AverageMatchesTaskArithmetic) {
    const auto sc = synth_checkpoints(small_spec(3, 4, 9, 7, 2, 0.1));
    const auto rules = default_rules();
    MergeConfig avg;
    avg.method = MergeMethod::Average;
    MergeConfig ta;
    ta.method = MergeMethod::TaskArithmetic;
    ta.lambda = 0.25;
    const auto a = merge_checkpoints(sc.base, sc.specialists, rules, avg);
    const auto t = merge_checkpoints(sc.base, sc.specialists, rules, ta);
    ASSERT_EQ(a.merged.records.size(), t.merged.records.size());
    for (const auto& [name, rec] : a.merged.records) {
        EXPECT_EQ(rec, t.merged.at(name)) << name;
    }
}

TEST(MergeCheckpoints, ReportStructure) {
    const auto sc = synth_checkpoints(small_spec(4, 3, 16, 12, 4, 0.05));
    const auto rules = default_rules();
    const auto res = merge_checkpoints(sc.base, sc.specialists, rules, ssam(8));
    const MergeReport& r = res.report;
    EXPECT_EQ(r.method, "ssam");
    EXPECT_EQ(r.n, 3u);
    EXPECT_DOUBLE_EQ(r.lambda_resolved, 1.0 / 3.0);
    EXPECT_FALSE(r.emit_lora);
    ASSERT_EQ(r.layers.size(), 4u);
    for (std::size_t l = 0; l < 4; ++l) {
        const LayerReport& e = r.layers[l];
        EXPECT_EQ(e.layer_name, synth_layer_name(l));
        EXPECT_EQ(e.k_used, 8u);
        ASSERT_TRUE(e.energy_left.has_value());
        EXPECT_GE(*e.energy_left, 0.0);
        EXPECT_LE(*e.energy_left, 1.0);
        EXPECT_GE(*e.energy_right, 0.0);
        EXPECT_LE(*e.energy_right, 1.0);
        ASSERT_EQ(e.projection_residuals.size(), 3u);
        for (double v : e.projection_residuals) EXPECT_GE(v, 0.0);
    }
}

TEST(MergeCheckpoints, PassthroughAndFrozen) {
    const auto sc = synth_checkpoints(small_spec(1, 2, 6, 5, 2, 0.0));
    const auto rules = default_rules();
    const auto res = merge_checkpoints(sc.base, sc.specialists, rules, ssam(2));
    EXPECT_EQ(res.merged.at("specialist1.encoder.proj.weight"), [&] {
        TensorRecord r = sc.specialists[0].at("encoder.proj.weight");
        r.name = "specialist1.encoder.proj.weight";
        return r;
    }());
    EXPECT_TRUE(res.merged.contains("specialist2.encoder.proj.weight"));
    EXPECT_FALSE(res.merged.contains("encoder.proj.weight"));
    EXPECT_EQ(res.merged.at("lm_head.weight"), sc.base.at("lm_head.weight"));
    EXPECT_EQ(res.merged.meta.at("passthrough.specialist1"), "synthetic-specialist-1");
    EXPECT_EQ(res.merged.meta.at("passthrough.specialist2.records"), "1");
    EXPECT_EQ(res.merged.meta.at("merge.method"), "ssam");
    EXPECT_EQ(res.merged.meta.at("model_id"), "synthetic-base");
}

TEST(MergeCheckpoints, Errors) {
    const auto sc = synth_checkpoints(small_spec(1, 2, 6, 5, 2, 0.0));
    const auto rules = default_rules();
    const std::vector<Checkpoint> one = {sc.specialists[0]};
    expect_error(ErrorCode::TooFewSpecialists, [&] { merge_checkpoints(sc.base, one, rules, ssam(2)); });
    MergeConfig single = ssam(2);
    single.allow_single = true;
    EXPECT_NO_THROW(merge_checkpoints(sc.base, one, rules, single));

    const std::vector<ClassRule> frozen_only = {{"*", ParamClass::Frozen}};
    expect_error(ErrorCode::EmptyLanguageSet, [&] { merge_checkpoints(sc.base, sc.specialists, frozen_only, ssam(2)); });

    std::vector<Checkpoint> bad = sc.specialists;
    bad[1].records.erase(synth_layer_name(0));
    expect_error(ErrorCode::MissingLayer, [&] { merge_checkpoints(sc.base, bad, rules, ssam(2)); });

    bad = sc.specialists;
    bad[1].records.erase(synth_layer_name(0));
    bad[1].add(TensorRecord::from_matrix(synth_layer_name(0), Dtype::F64, Matrix(5, 6)));
    expect_error(ErrorCode::ArchMismatch, [&] { merge_checkpoints(sc.base, bad, rules, ssam(2)); });

    expect_error(ErrorCode::InvalidConfig, [&] { merge_checkpoints(sc.base, sc.specialists, rules, ssam(2, -1.0)); });
    expect_error(ErrorCode::InvalidConfig, [&] { merge_checkpoints(sc.base, sc.specialists, rules, ssam(0)); });
}

TEST(MergeCheckpoints, FullRankEquivalenceProperty) {
    const auto rules = default_rules();
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const std::size_t d = 4 + seed * 3;
        const auto sc = synth_checkpoints(small_spec(2, 3, d, d, 2, 0.5, seed));
        MergeConfig ta;
        ta.method = MergeMethod::TaskArithmetic;
        ta.lambda = 0.6;
        const auto dense = merge_checkpoints(sc.base, sc.specialists, rules, ssam(d, 0.6));
        const auto plain = merge_checkpoints(sc.base, sc.specialists, rules, ta);
        for (const auto& [name, rec] : plain.merged.records) {
            const auto a = dense.merged.at(name).to_doubles();
            const auto b = rec.to_doubles();
            double diff = 0.0, norm = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i) {
                diff += (a[i] - b[i]) * (a[i] - b[i]);
                norm += b[i] * b[i];
            }
            EXPECT_LE(std::sqrt(diff), 1e-8 * std::max(std::sqrt(norm), 1e-300)) << name;
        }
    }
}

TEST(MergeCheckpoints, EmitLoraMatchesDense) {
    const auto rules = default_rules();
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
        const auto sc = synth_checkpoints(small_spec(3, 3, 12, 9, 3, 0.3, seed));
        MergeConfig lora = ssam(4);
        lora.emit_lora = true;
        const auto dense = merge_checkpoints(sc.base, sc.specialists, rules, ssam(4));
        const auto factored = merge_checkpoints(sc.base, sc.specialists, rules, lora);
        EXPECT_TRUE(factored.report.emit_lora);
        EXPECT_EQ(factored.merged.meta.at("lora_r"), "4");
        for (std::size_t l = 0; l < 3; ++l) {
            const std::string name = synth_layer_name(l);
            const Matrix w0 = sc.base.at(name).to_matrix();
            const Matrix delta = subtract(dense.merged.at(name).to_matrix(), w0);
            EXPECT_EQ(factored.merged.at(name), sc.base.at(name));
            const Matrix product = oracle::naive_matmul(factored.merged.at(name + ".lora_A").to_matrix(),
                                                        factored.merged.at(name + ".lora_B").to_matrix());
            EXPECT_LE(oracle::fro_diff(product, delta), 1e-8 * std::max(oracle::fro(delta), 1e-12));
        }
    }
}

TEST(MergeCheckpoints, AdapterSpecialistsDefaultToLoraOutput) {
    const auto sc = synth_checkpoints(small_spec(2, 3, 12, 10, 3, 0.0), Dtype::F64, true);
    const auto rules = default_rules();
    const auto res = merge_checkpoints(sc.base, sc.specialists, rules, ssam(20));
    EXPECT_TRUE(res.report.emit_lora);
    // k is clamped to 10 on every layer and recorded per layer.
    EXPECT_EQ(res.merged.meta.at("lora_r"), "20");
    EXPECT_EQ(res.merged.meta.at("lora_r:" + synth_layer_name(0)), "10");
    EXPECT_EQ(res.report.layers[0].k_used, 10u);
    EXPECT_EQ(res.merged.at(synth_layer_name(0) + ".lora_A").shape, (std::vector<std::uint64_t>{12, 10}));
    EXPECT_NO_THROW(validate_checkpoint(res.merged));
    // The effective update equals lambda * sum of 2 * A_i B_i (alpha / r = 2).
    for (std::size_t l = 0; l < 2; ++l) {
        const std::string name = synth_layer_name(l);
        Matrix expected(12, 10);
        for (const auto& s : sc.specialists) {
            expected = add(expected, smerge::scale(oracle::naive_matmul(s.at(name + ".lora_A").to_matrix(),
                                                                        s.at(name + ".lora_B").to_matrix()),
                                                   2.0 / 3.0));
        }
        const Matrix product = oracle::naive_matmul(res.merged.at(name + ".lora_A").to_matrix(),
                                                    res.merged.at(name + ".lora_B").to_matrix());
        EXPECT_LE(oracle::fro_diff(product, expected), 1e-8 * oracle::fro(expected));
    }
}

TEST(MergeCheckpoints, SpecialistPermutationInvariance) {
    const auto sc = synth_checkpoints(small_spec(2, 4, 10, 8, 3, 0.2));
    const auto rules = default_rules();
    const auto ref = merge_checkpoints(sc.base, sc.specialists, rules, ssam(3));
    const std::vector<std::size_t> perm = {3, 1, 0, 2};
    std::vector<Checkpoint> shuffled;
    for (auto p : perm) shuffled.push_back(sc.specialists[p]);
    const auto res = merge_checkpoints(sc.base, shuffled, rules, ssam(3));
    const Classification cls = classify_parameters(sc.base, rules);
    for (const auto& [name, c] : cls.classes) {
        if (c != ParamClass::LanguageLinear && c != ParamClass::BiasNorm) continue;
        const auto a = ref.merged.at(name).to_doubles();
        const auto b = res.merged.at(name).to_doubles();
        for (std::size_t i = 0; i < a.size(); ++i) {
            EXPECT_NEAR(a[i], b[i], 1e-12) << name;
        }
    }
    for (std::size_t i = 0; i < perm.size(); ++i) {
        EXPECT_EQ(res.merged.meta.at("passthrough.specialist" + std::to_string(i + 1)),
                  "synthetic-specialist-" + std::to_string(perm[i] + 1));
    }
}

TEST(SsamMergeLayer, MergedDeltaLiesInSubspace) {
    std::mt19937_64 rng(69);
    for (int trial = 0; trial < 10; ++trial) {
        const DeltaSet set = random_set(rng, 3, 11, 9);
        const auto r = ssam_merge_layer(set, 1 + trial % 8, 1.0 / 3.0);
        const ProjectionPair p = projection_operators(r.subspace);
        const Matrix again = project_delta(r.merged, p).matrix;
        EXPECT_LE(oracle::fro_diff(again, r.merged.matrix), 1e-9 * std::max(oracle::fro(r.merged.matrix), 1e-300));
    }
}

TEST(SsamMergeLayer, LambdaLinearityExact) {
    std::mt19937_64 rng(70);
    for (int trial = 0; trial < 10; ++trial) {
        const DeltaSet set = random_set(rng, 3, 8, 6);
        const double lambda = 0.1 + 0.2 * trial;
        const auto once = ssam_merge_layer(set, 3, lambda);
        const auto twice = ssam_merge_layer(set, 3, 2 * lambda);
        EXPECT_TRUE(bitwise_equal(twice.merged.matrix, smerge::scale(once.merged.matrix, 2.0)));
        EXPECT_TRUE(bitwise_equal(task_arithmetic_merge(set, 2 * lambda).matrix,
                                  smerge::scale(task_arithmetic_merge(set, lambda).matrix, 2.0)));
    }
}

TEST(MergeCheckpoints, ThreadCountDoesNotChangeBits) {
    const auto sc = synth_checkpoints(small_spec(6, 3, 20, 14, 4, 0.3));
    const auto rules = default_rules();
    MergeConfig one = ssam(5);
    MergeConfig many = ssam(5);
    many.threads = 8;
    const auto a = merge_checkpoints(sc.base, sc.specialists, rules, one);
    const auto b = merge_checkpoints(sc.base, sc.specialists, rules, many);
    EXPECT_EQ(a.merged, b.merged);
    EXPECT_EQ(a.report.layers.size(), b.report.layers.size());
    for (std::size_t i = 0; i < a.report.layers.size(); ++i) {
        EXPECT_EQ(a.report.layers[i].projection_residuals, b.report.layers[i].projection_residuals);
        EXPECT_EQ(a.report.layers[i].energy_left, b.report.layers[i].energy_left);
    }
}

TEST(Sweep, EntriesMonotoneAndMatchDenseResiduals) {
    const auto sc = synth_checkpoints(small_spec(3, 3, 14, 11, 3, 0.4));
    const auto rules = default_rules();
    const std::vector<std::size_t> ks = {8, 2, 5, 11, 20};
    std::vector<std::string> dummy;
    const SweepReport rep = sweep_checkpoints(sc.base, sc.specialists, rules, ks, MergeConfig{});
    ASSERT_EQ(rep.entries.size(), 3u * ks.size());
    bool clamped_warning = false;
    for (const auto& w : rep.warnings) clamped_warning |= w.find("clamped from 20 to 11") != std::string::npos;
    EXPECT_TRUE(clamped_warning);
    for (std::size_t l = 0; l < 3; ++l) {
        const std::string name = synth_layer_name(l);
        const DeltaSet set = build_delta_set(sc.base, sc.specialists, name);
        double norm = 0.0;
        for (const auto& d : set.deltas) norm = std::max(norm, frobenius_norm(d.matrix));
        for (std::size_t j = 0; j < ks.size(); ++j) {
            const SweepEntry& e = rep.entries[l * ks.size() + j];
            EXPECT_EQ(e.layer_name, name);
            EXPECT_EQ(e.k_requested, ks[j]);
            EXPECT_EQ(e.k_used, std::min<std::size_t>(ks[j], 11));
            const auto dense = ssam_merge_layer(set, ks[j], 1.0 / 3.0);
            ASSERT_EQ(e.projection_residuals.size(), 3u);
            for (std::size_t i = 0; i < 3; ++i) {
                EXPECT_NEAR(e.projection_residuals[i], dense.residuals[i], 1e-6 * norm);
            }
            EXPECT_NEAR(e.energy_left, spectral_energy(dense.subspace.eig_a, dense.subspace.k), 1e-15);
        }
        // Sorted by k, energy and fidelity never decrease.
        std::vector<const SweepEntry*> sorted;
        for (std::size_t j = 0; j < ks.size(); ++j) sorted.push_back(&rep.entries[l * ks.size() + j]);
        std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->k_used < b->k_used; });
        for (std::size_t j = 1; j < sorted.size(); ++j) {
            EXPECT_GE(sorted[j]->energy_left, sorted[j - 1]->energy_left);
            EXPECT_GE(sorted[j]->energy_right, sorted[j - 1]->energy_right);
            EXPECT_GE(sorted[j]->fidelity, sorted[j - 1]->fidelity);
        }
    }
}

TEST(Sweep, ThreadCountDoesNotChangeBits) {
    const auto sc = synth_checkpoints(small_spec(5, 2, 12, 12, 3, 0.4));
    const auto rules = default_rules();
    const std::vector<std::size_t> ks = {2, 4, 8};
    MergeConfig many;
    many.threads = 4;
    const SweepReport a = sweep_checkpoints(sc.base, sc.specialists, rules, ks, MergeConfig{});
    const SweepReport b = sweep_checkpoints(sc.base, sc.specialists, rules, ks, many);
    ASSERT_EQ(a.entries.size(), b.entries.size());
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        EXPECT_EQ(a.entries[i].projection_residuals, b.entries[i].projection_residuals);
        EXPECT_EQ(a.entries[i].fidelity, b.entries[i].fidelity);
    }
}
