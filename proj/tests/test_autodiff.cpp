#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "moelab/autodiff.hpp"

using namespace moelab;
using namespace moelab::ad;

namespace {

Matrix random_matrix(std::mt19937_64& rng, Index r, Index c, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) {
        m.data()[i] = n(rng);
    }
    return m;
}

Matrix positive_matrix(std::mt19937_64& rng, Index r, Index c) {
    std::uniform_real_distribution<double> u(0.2, 2.0);
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) {
        m.data()[i] = u(rng);
    }
    return m;
}

// Reduces an op output to a scalar with fixed random weights so every output
// entry gets a distinct upstream gradient.
Tensor weighted_sum(const Tensor& out, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Graph& g = *out.graph();
    return sum(mul(out, g.constant(random_matrix(rng, out.rows(), out.cols()))));
}

using OpFn = std::function<Tensor(Graph&, std::vector<Tensor>&)>;

struct OpCase {
    std::string name;
    std::function<std::vector<Parameter>(std::mt19937_64&)> make_inputs;
    OpFn op;
};

std::vector<Parameter> two_same(std::mt19937_64& rng, Index r, Index c) {
    return {Parameter("a", random_matrix(rng, r, c)), Parameter("b", random_matrix(rng, r, c))};
}

double max_error(const OpCase& c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<Parameter> params = c.make_inputs(rng);
    std::vector<Parameter*> ptrs;
    for (auto& p : params) {
        ptrs.push_back(&p);
    }
    const ScalarFn f = [&](Graph& g) {
        std::vector<Tensor> xs;
        for (auto& p : params) {
            xs.push_back(g.parameter(p));
        }
        return weighted_sum(c.op(g, xs), seed * 31 + 7);
    };
    const auto r = grad_check(f, ptrs, 1e-5);
    EXPECT_TRUE(r.finite) << c.name << ": " << r.failure;
    return r.max_rel_error;
}

std::vector<OpCase> primitive_cases() {
    std::vector<OpCase> cases;
    cases.push_back({"add", [](auto& rng) { return two_same(rng, 3, 4); }, [](Graph&, auto& x) { return add(x[0], x[1]); }});
    cases.push_back({"sub", [](auto& rng) { return two_same(rng, 3, 4); }, [](Graph&, auto& x) { return sub(x[0], x[1]); }});
    cases.push_back({"mul", [](auto& rng) { return two_same(rng, 3, 4); }, [](Graph&, auto& x) { return mul(x[0], x[1]); }});
    cases.push_back({"scale", [](auto& rng) { return std::vector<Parameter>{Parameter("a", random_matrix(rng, 2, 5))}; },
                     [](Graph&, auto& x) { return scale(x[0], -1.7); }});
    cases.push_back({"scale_by",
                     [](auto& rng) {
                         return std::vector<Parameter>{Parameter("a", random_matrix(rng, 3, 3)), Parameter("s", random_matrix(rng, 1, 1))};
                     },
                     [](Graph&, auto& x) { return scale_by(x[0], x[1]); }});
    cases.push_back({"mul_rows",
                     [](auto& rng) {
                         return std::vector<Parameter>{Parameter("a", random_matrix(rng, 4, 3)), Parameter("c", random_matrix(rng, 4, 1))};
                     },
                     [](Graph&, auto& x) { return mul_rows(x[0], x[1]); }});
    cases.push_back({"square", [](auto& rng) { return std::vector<Parameter>{Parameter("a", random_matrix(rng, 3, 2))}; },
                     [](Graph&, auto& x) { return square(x[0]); }});
    cases.push_back({"silu", [](auto& rng) { return std::vector<Parameter>{Parameter("a", random_matrix(rng, 3, 4, 2.0))}; },
                     [](Graph&, auto& x) { return silu(x[0]); }});
    cases.push_back({"log_clamped", [](auto& rng) { return std::vector<Parameter>{Parameter("a", positive_matrix(rng, 3, 4))}; },
                     [](Graph&, auto& x) { return log_clamped(x[0], 1e-12); }});
    cases.push_back({"matmul",
                     [](auto& rng) {
                         return std::vector<Parameter>{Parameter("a", random_matrix(rng, 3, 5)), Parameter("b", random_matrix(rng, 5, 2))};
                     },
                     [](Graph&, auto& x) { return matmul(x[0], x[1]); }});
    cases.push_back({"matmul_nt",
                     [](auto& rng) {
                         return std::vector<Parameter>{Parameter("a", random_matrix(rng, 3, 5)), Parameter("b", random_matrix(rng, 4, 5))};
                     },
                     [](Graph&, auto& x) { return matmul_nt(x[0], x[1]); }});
    cases.push_back({"sum", [](auto& rng) { return std::vector<Parameter>{Parameter("a", random_matrix(rng, 3, 4))}; },
                     [](Graph&, auto& x) { return scale(sum(square(x[0])), 0.5); }});
    cases.push_back({"mean", [](auto& rng) { return std::vector<Parameter>{Parameter("a", random_matrix(rng, 3, 4))}; },
                     [](Graph&, auto& x) { return mean(square(x[0])); }});
    cases.push_back({"row_sum", [](auto& rng) { return std::vector<Parameter>{Parameter("a", random_matrix(rng, 4, 3))}; },
                     [](Graph&, auto& x) { return row_sum(x[0]); }});
    cases.push_back({"col_mean", [](auto& rng) { return std::vector<Parameter>{Parameter("a", random_matrix(rng, 4, 3))}; },
                     [](Graph&, auto& x) { return col_mean(x[0]); }});
    cases.push_back({"logsumexp_rows", [](auto& rng) { return std::vector<Parameter>{Parameter("a", random_matrix(rng, 4, 5, 2.0))}; },
                     [](Graph&, auto& x) { return logsumexp_rows(x[0]); }});
    cases.push_back({"softmax_rows", [](auto& rng) { return std::vector<Parameter>{Parameter("a", random_matrix(rng, 4, 5, 2.0))}; },
                     [](Graph&, auto& x) { return softmax_rows(x[0]); }});
    cases.push_back({"standardize_rows", [](auto& rng) { return std::vector<Parameter>{Parameter("a", random_matrix(rng, 4, 6))}; },
                     [](Graph&, auto& x) { return standardize_rows(x[0], 1e-6); }});
    cases.push_back({"gather_rows", [](auto& rng) { return std::vector<Parameter>{Parameter("a", random_matrix(rng, 5, 3))}; },
                     [](Graph&, auto& x) { return gather_rows(x[0], {4, 0, 4, 2}); }});
    cases.push_back({"embedding", [](auto& rng) { return std::vector<Parameter>{Parameter("table", random_matrix(rng, 6, 3))}; },
                     [](Graph&, auto& x) {
                         const std::vector<int> ids{1, 5, 1, 0, 3};
                         return embedding(x[0], ids);
                     }});
    cases.push_back({"pick_per_row", [](auto& rng) { return std::vector<Parameter>{Parameter("a", random_matrix(rng, 4, 3))}; },
                     [](Graph&, auto& x) { return pick_per_row(x[0], {2, 0, 1, 2}); }});
    cases.push_back({"gather_column", [](auto& rng) { return std::vector<Parameter>{Parameter("a", random_matrix(rng, 5, 3))}; },
                     [](Graph&, auto& x) { return gather_column(x[0], {0, 3, 3}, 1); }});
    cases.push_back({"scatter_add_rows",
                     [](auto& rng) {
                         return std::vector<Parameter>{Parameter("a", random_matrix(rng, 2, 3)), Parameter("b", random_matrix(rng, 3, 3))};
                     },
                     [](Graph& g, auto& x) {
                         return scatter_add_rows(g, {4, 3}, {{{0, 2}, x[0]}, {{2, 3, 1}, x[1]}});
                     }});
    cases.push_back({"masked_renormalize",
                     [](auto& rng) { return std::vector<Parameter>{Parameter("a", random_matrix(rng, 3, 4))}; },
                     [](Graph& g, auto& x) {
                         Matrix mask(3, 4);
                         mask << 1, 0, 1, 1, 0, 1, 0, 1, 1, 1, 1, 1;
                         // elementwise positive input: masked entries then have exactly zero
                         // influence, where a softmax would leave roundoff-level coupling
                         return masked_renormalize(add(square(x[0]), g.constant(Matrix::Constant(3, 4, 0.1))), mask);
                     }});
    cases.push_back({"causal_attention",
                     [](auto& rng) {
                         return std::vector<Parameter>{Parameter("q", random_matrix(rng, 6, 4)), Parameter("k", random_matrix(rng, 6, 4)),
                                                       Parameter("v", random_matrix(rng, 6, 4))};
                     },
                     [](Graph&, auto& x) { return causal_attention(x[0], x[1], x[2], 3); }});
    return cases;
}

}  // namespace

TEST(Softmax, LogTwoAndZero) {
    Graph g;
    Matrix z(1, 2);
    z << std::log(2.0), 0.0;
    const Matrix p = softmax_rows(g.constant(z)).value();
    EXPECT_NEAR(p(0, 0), 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(p(0, 1), 1.0 / 3.0, 1e-15);
}

TEST(Softmax, RowsSumToOneForLargeInputs) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1e3, 1e3);
    for (int trial = 0; trial < 50; ++trial) {
        Matrix z(4, 16);
        for (Index i = 0; i < z.size(); ++i) {
            z.data()[i] = u(rng);
        }
        Graph g;
        const Matrix p = softmax_rows(g.constant(z)).value();
        for (Index r = 0; r < p.rows(); ++r) {
            EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-12);
            EXPECT_TRUE(p.row(r).allFinite());
        }
    }
}

TEST(Standardize, OneTwoThree) {
    Graph g;
    Matrix z(1, 3);
    z << 1.0, 2.0, 3.0;
    const Matrix s = standardize_rows(g.constant(z), 1e-6).value();
    // population std of {1,2,3} is sqrt(2/3)
    const double sigma = std::sqrt(2.0 / 3.0);
    EXPECT_NEAR(s(0, 0), -1.0 / (sigma + 1e-6), 1e-12);
    EXPECT_NEAR(s(0, 1), 0.0, 1e-15);
    EXPECT_NEAR(s(0, 2), 1.0 / (sigma + 1e-6), 1e-12);
    EXPECT_NEAR(s(0, 2), 1.22474, 1e-5);
}

TEST(Standardize, ShiftAndScaleInvariant) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix z = random_matrix(rng, 3, 8, 3.0);
        for (Index r = 0; r < z.rows(); ++r) {
            const double mu = z.row(r).mean();
            const double sd = std::sqrt((z.row(r).array() - mu).square().mean());
            z.row(r) = (z.row(r).array() - mu) * ((2.0 + trial) / sd) + mu;
        }
        Graph g;
        const Matrix base = standardize_rows(g.constant(z), 1e-6).value();
        for (Index r = 0; r < z.rows(); ++r) {
            const double mu = z.row(r).mean();
            const double sd = std::sqrt((z.row(r).array() - mu).square().mean());
            ASSERT_GE(sd, 1.0) << "test precondition: sigma >= 1";
        }
        Matrix shifted = z.array() + 17.5;
        Matrix scaled = z * 4.0;
        const Matrix a = standardize_rows(g.constant(shifted), 1e-6).value();
        const Matrix b = standardize_rows(g.constant(scaled), 1e-6).value();
        EXPECT_LE((a - base).cwiseAbs().maxCoeff(), 1e-9);
        // scaling changes sigma + eps only through eps
        EXPECT_LE((b - base).cwiseAbs().maxCoeff(), 1e-6);
    }
}

TEST(Standardize, ConstantRowIsFinite) {
    Graph g;
    Tensor x = g.variable(Matrix::Constant(2, 5, 3.0));
    Tensor y = standardize_rows(x, 1e-6);
    EXPECT_TRUE(y.value().allFinite());
    EXPECT_EQ(y.value().cwiseAbs().maxCoeff(), 0.0);
    g.backward(sum(y));
    EXPECT_TRUE(g.grad(x).allFinite());
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHot) {
    std::mt19937_64 rng(5);
    Graph g;
    Tensor z = g.variable(random_matrix(rng, 3, 6));
    const std::vector<Index> y{2, 0, 5};
    // mean over rows of lse(z) - z_y
    Tensor ce = mean(sub(logsumexp_rows(z), pick_per_row(z, y)));
    g.backward(ce);
    Matrix expect = softmax_rows(g.constant(z.value())).value();
    for (std::size_t r = 0; r < y.size(); ++r) {
        expect(static_cast<Index>(r), y[r]) -= 1.0;
    }
    expect /= 3.0;
    EXPECT_LE((g.grad(z) - expect).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Graph, BackwardRequiresScalar) {
    Graph g;
    Tensor x = g.variable(Matrix::Ones(2, 2));
    EXPECT_THROW(g.backward(x), ShapeError);
}

TEST(Graph, ReusedNodeAccumulatesGradient) {
    Graph g;
    Matrix v(1, 1);
    v << 3.0;
    Tensor x = g.variable(v);
    g.backward(add(x, mul(x, x)));  // d/dx (x + x^2) = 1 + 2x
    EXPECT_DOUBLE_EQ(g.grad(x)(0, 0), 7.0);
}

TEST(Graph, ParameterGradientsAccumulateAcrossGraphs) {
    Parameter p("w", Matrix::Constant(1, 2, 2.0));
    for (int i = 0; i < 2; ++i) {
        Graph g;
        g.backward(sum(g.parameter(p)));
    }
    EXPECT_DOUBLE_EQ(p.grad(0, 0), 2.0);
    p.zero_grad();
    EXPECT_DOUBLE_EQ(p.grad(0, 1), 0.0);
}

TEST(Graph, ConstantsGetNoGradient) {
    Graph g;
    Tensor c = g.constant(Matrix::Ones(2, 2));
    Tensor x = g.variable(Matrix::Ones(2, 2));
    g.backward(sum(mul(c, x)));
    EXPECT_FALSE(g.requires_grad(c));
    EXPECT_EQ(g.grad(c).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Ops, ShapeMismatchesThrow) {
    Graph g;
    Tensor a = g.variable(Matrix::Ones(2, 3));
    Tensor b = g.variable(Matrix::Ones(2, 2));
    EXPECT_THROW(add(a, b), ShapeError);
    EXPECT_THROW(matmul(a, a), ShapeError);
    EXPECT_THROW(mul_rows(a, b), ShapeError);
    EXPECT_THROW(masked_renormalize(a, Matrix::Ones(3, 3)), ShapeError);
}

TEST(Ops, EmbeddingRejectsOutOfVocabulary) {
    Graph g;
    Tensor table = g.variable(Matrix::Ones(4, 2));
    const std::vector<int> bad{0, 4};
    const std::vector<int> negative{-1};
    EXPECT_THROW(embedding(table, bad), InvalidArgument);
    EXPECT_THROW(embedding(table, negative), InvalidArgument);
}

TEST(Ops, MaskedRenormalizeSingleSelectionHasZeroGradient) {
    Graph g;
    Matrix p(1, 4);
    p << 0.4, 0.3, 0.2, 0.1;
    Matrix mask(1, 4);
    mask << 0, 1, 0, 0;
    Tensor x = g.variable(p);
    Tensor w = masked_renormalize(x, mask);
    EXPECT_EQ(w.value()(0, 1), 1.0);
    Matrix up(1, 4);
    up << 1.0, 5.0, -2.0, 3.0;
    g.backward(sum(mul(w, g.constant(up))));
    EXPECT_EQ(g.grad(x).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Ops, MaskedRenormalizeValuesAndClosedFormGradient) {
    Graph g;
    Matrix p(1, 4);
    p << 0.4, 0.3, 0.2, 0.1;
    Matrix mask(1, 4);
    mask << 1, 0, 1, 0;
    Tensor x = g.variable(p);
    Tensor w = masked_renormalize(x, mask);
    EXPECT_NEAR(w.value()(0, 0), 0.4 / 0.6, 1e-15);
    EXPECT_EQ(w.value()(0, 1), 0.0);
    EXPECT_NEAR(w.value()(0, 2), 0.2 / 0.6, 1e-15);
    Matrix up(1, 4);
    up << 1.0, 5.0, -2.0, 3.0;
    g.backward(sum(mul(w, g.constant(up))));
    // selected k: (g_k - sum_i g_i w_i) / s; unselected: 0
    const double s = 0.6;
    const double dot = 1.0 * (0.4 / s) + -2.0 * (0.2 / s);
    EXPECT_NEAR(g.grad(x)(0, 0), (1.0 - dot) / s, 1e-14);
    EXPECT_EQ(g.grad(x)(0, 1), 0.0);
    EXPECT_NEAR(g.grad(x)(0, 2), (-2.0 - dot) / s, 1e-14);
    EXPECT_EQ(g.grad(x)(0, 3), 0.0);
}

TEST(Ops, CausalAttentionIgnoresFuture) {
    std::mt19937_64 rng(2);
    Matrix q = random_matrix(rng, 4, 3), k = random_matrix(rng, 4, 3), v = random_matrix(rng, 4, 3);
    Graph g;
    const Matrix base = causal_attention(g.constant(q), g.constant(k), g.constant(v), 4).value();
    k.row(3) *= 5.0;
    v.row(3).setConstant(100.0);
    const Matrix changed = causal_attention(g.constant(q), g.constant(k), g.constant(v), 4).value();
    EXPECT_LE((base.topRows(3) - changed.topRows(3)).cwiseAbs().maxCoeff(), 1e-15);
    // first position attends only to itself
    EXPECT_LE((base.row(0) - v.row(0)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GradCheck, QuadraticIsExact) {
    std::mt19937_64 rng(9);
    Parameter w("w", random_matrix(rng, 3, 3));
    const Matrix a = random_matrix(rng, 3, 3);
    std::vector<Parameter*> ps{&w};
    const ScalarFn f = [&](Graph& g) {
        Tensor x = g.parameter(w);
        return add(sum(square(x)), sum(mul(x, g.constant(a))));
    };
    const auto r = grad_check(f, ps, 1e-5);
    EXPECT_TRUE(r.finite);
    EXPECT_LT(r.max_rel_error, 1e-9);
    EXPECT_EQ(r.entries_checked, 9);
}

TEST(GradCheck, StepOutsideRangeIsRejected) {
    Parameter w("w", Matrix::Ones(1, 1));
    std::vector<Parameter*> ps{&w};
    const ScalarFn f = [&](Graph& g) { return sum(g.parameter(w)); };
    EXPECT_THROW(grad_check(f, ps, 0.0), InvalidArgument);
    EXPECT_THROW(grad_check(f, ps, 1e-3), InvalidArgument);
    EXPECT_THROW(grad_check(f, ps, 1e-7), InvalidArgument);
    EXPECT_NO_THROW(grad_check(f, ps, 1e-6));
    EXPECT_NO_THROW(grad_check(f, ps, 1e-4));
}

TEST(GradCheck, NonFiniteLossIsReportedWithLocation) {
    Parameter w("weights", Matrix::Constant(1, 3, 0.5));
    std::vector<Parameter*> ps{&w};
    const ScalarFn f = [&](Graph& g) {
        Tensor x = g.parameter(w);
        // blows up once entry 1 is perturbed upwards
        const double s = w.value(0, 1) > 0.5 ? std::numeric_limits<double>::quiet_NaN() : 1.0;
        return scale(sum(x), s);
    };
    const auto r = grad_check(f, ps, 1e-5);
    EXPECT_FALSE(r.finite);
    EXPECT_FALSE(r.passed(1.0));
    EXPECT_NE(r.failure.find("weights"), std::string::npos) << r.failure;
    EXPECT_NE(r.failure.find('1'), std::string::npos) << r.failure;
}

TEST(GradCheck, EveryPrimitiveOnTwentyInstances) {
    for (const OpCase& c : primitive_cases()) {
        double worst = 0.0;
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            worst = std::max(worst, max_error(c, seed * 1000 + 13));
        }
        EXPECT_LT(worst, 1e-4) << c.name;
    }
}
