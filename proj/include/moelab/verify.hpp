#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "moelab/autodiff.hpp"
#include "moelab/control.hpp"
#include "moelab/losses.hpp"
#include "moelab/model.hpp"
#include "moelab/routing.hpp"

// Reference implementations written for clarity rather than speed, and the
// verification groups run by `moelab selftest`.

namespace moelab::verify {

// ------------------------------------------------------------ selection oracles

struct PrefixOracle {
    std::vector<int> selected;  // in selection order
    int k = 0;
    std::vector<double> weights;  // dense, renormalized over the selection
};

/// Top-p by enumerating prefixes k = 1..N. Each prefix is rebuilt from scratch
/// by repeated argmax (lowest index wins ties) and its mass re-summed.
inline PrefixOracle top_p_by_prefixes(const std::vector<double>& row, double p) {
    const int n = static_cast<int>(row.size());
    for (int k = 1; k <= n; ++k) {
        std::vector<bool> used(row.size(), false);
        std::vector<int> chosen;
        for (int j = 0; j < k; ++j) {
            int best = -1;
            for (int i = 0; i < n; ++i) {
                if (!used[static_cast<std::size_t>(i)] && (best < 0 || row[static_cast<std::size_t>(i)] > row[static_cast<std::size_t>(best)])) {
                    best = i;
                }
            }
            used[static_cast<std::size_t>(best)] = true;
            chosen.push_back(best);
        }
        double mass = 0.0;
        for (int i : chosen) {
            mass += row[static_cast<std::size_t>(i)];
        }
        if (mass >= p || k == n) {
            PrefixOracle o;
            o.selected = chosen;
            o.k = k;
            o.weights.assign(row.size(), 0.0);
            for (int i : chosen) {
                o.weights[static_cast<std::size_t>(i)] = row[static_cast<std::size_t>(i)] / mass;
            }
            return o;
        }
    }
    return {};
}

/// Smallest cardinality over all subsets whose mass reaches p. Exponential;
/// exact only when subset sums are exact (dyadic rows).
inline int min_subset_cardinality(const std::vector<double>& row, double p) {
    const int n = static_cast<int>(row.size());
    int best = n;
    for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
        const int size = std::popcount(mask);
        if (size >= best) {
            continue;
        }
        double mass = 0.0;
        for (int i = 0; i < n; ++i) {
            if (mask & (1u << i)) {
                mass += row[static_cast<std::size_t>(i)];
            }
        }
        if (mass >= p) {
            best = size;
        }
    }
    return best;
}

// ------------------------------------------------------------ case generation

struct SelectionCase {
    std::vector<double> row;
    double p = 0.5;
    bool dyadic = false;  // entries are multiples of 1/64, so all sums are exact
};

/// Alternates smooth random rows, peaked rows and dyadic rows with many ties.
/// A third of dyadic cases put p exactly on a reachable prefix mass.
inline SelectionCase random_selection_case(std::mt19937_64& rng, int max_experts = 16) {
    SelectionCase c;
    const int n = std::uniform_int_distribution<int>(1, max_experts)(rng);
    const int kind = std::uniform_int_distribution<int>(0, 2)(rng);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    if (kind == 2) {
        c.dyadic = true;
        // small repeated levels, remainder handed out in chunks of 4
        static constexpr int kLevels[] = {0, 1, 2, 2, 4, 4, 8};
        std::uniform_int_distribution<int> level(0, 6);
        std::uniform_int_distribution<int> slot(0, n - 1);
        std::vector<int> units(static_cast<std::size_t>(n), 0);
        int sum = 0;
        do {
            sum = 0;
            for (int& u : units) {
                u = kLevels[level(rng)];
                sum += u;
            }
        } while (sum > 64);
        for (int rest = 64 - sum; rest > 0; rest -= 4) {
            units[static_cast<std::size_t>(slot(rng))] += std::min(rest, 4);
        }
        for (int u : units) {
            c.row.push_back(u / 64.0);
        }
        if (std::uniform_int_distribution<int>(0, 2)(rng) == 0) {
            std::vector<int> sorted = units;
            std::sort(sorted.rbegin(), sorted.rend());
            int acc = 0;
            std::vector<int> masses;
            for (int u : sorted) {
                acc += u;
                if (acc > 0 && acc < 64) {
                    masses.push_back(acc);
                }
            }
            if (!masses.empty()) {
                c.p = masses[std::uniform_int_distribution<std::size_t>(0, masses.size() - 1)(rng)] / 64.0;
                return c;
            }
        }
    } else {
        const double spread = kind == 0 ? 1.0 : 4.0;
        std::normal_distribution<double> z(0.0, spread);
        std::vector<double> logits;
        double mx = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < n; ++i) {
            logits.push_back(z(rng));
            mx = std::max(mx, logits.back());
        }
        double total = 0.0;
        for (double l : logits) {
            c.row.push_back(std::exp(l - mx));
            total += c.row.back();
        }
        for (double& v : c.row) {
            v /= total;
        }
    }
    do {
        c.p = unit(rng);
    } while (c.p <= 0.0 || c.p >= 1.0);
    return c;
}

inline std::string describe(const std::vector<double>& row) {
    std::ostringstream ss;
    ss << std::setprecision(17) << '[';
    for (std::size_t i = 0; i < row.size(); ++i) {
        ss << (i ? ", " : "") << row[i];
    }
    ss << ']';
    return ss.str();
}

// ------------------------------------------------------------ group results

inline std::vector<int> sorted(std::vector<int> v) {
    std::sort(v.begin(), v.end());
    return v;
}

struct GroupResult {
    std::string name;
    int cases = 0;
    bool passed = true;
    std::string first_failure;  // inputs of the first failing case
    double metric = 0.0;        // group-specific headline number
    double secondary = 0.0;     // gradient check: max error over entries >= 1e-5

    void fail(std::string what) {
        if (passed) {
            passed = false;
            first_failure = std::move(what);
        }
    }
};

/// Criterion-style selection check: route vs. prefix oracle (set, k, weights),
/// plus the subset oracle on dyadic rows with N <= 12.
inline GroupResult check_selection(std::uint64_t seed, int cases, routing::TieBreak tie = routing::TieBreak::ascending_index,
                                   double weight_tol = 1e-12) {
    GroupResult g;
    g.name = "selection-oracle";
    std::mt19937_64 rng(seed);
    for (int i = 0; i < cases; ++i) {
        const SelectionCase c = random_selection_case(rng);
        ++g.cases;
        const auto got = routing::select_top_p(c.row, c.p, tie);
        const auto want = top_p_by_prefixes(c.row, c.p);
        std::ostringstream why;
        if (got.cutoff != want.k) {
            why << "k_p " << got.cutoff << " != oracle " << want.k;
        } else if (sorted(got.selected) != sorted(want.selected)) {
            why << "selected set differs from oracle";
        } else {
            for (std::size_t j = 0; j < c.row.size(); ++j) {
                if (std::abs(got.weights[j] - want.weights[j]) > weight_tol) {
                    why << "weight of expert " << j << " differs: " << got.weights[j] << " vs " << want.weights[j];
                    break;
                }
            }
        }
        if (why.str().empty() && c.dyadic && c.row.size() <= 12) {
            const int kmin = min_subset_cardinality(c.row, c.p);
            if (kmin != got.cutoff) {
                why << "k_p " << got.cutoff << " != minimal subset size " << kmin;
            }
        }
        if (!why.str().empty()) {
            std::ostringstream msg;
            msg << "case " << i << ": row=" << describe(c.row) << " p=" << std::setprecision(17) << c.p << ": " << why.str();
            g.fail(msg.str());
        }
    }
    return g;
}

/// k_{p1} <= k_{p2} whenever p1 <= p2 on the same row.
inline GroupResult check_monotonicity(std::uint64_t seed, int cases) {
    GroupResult g;
    g.name = "nucleus-monotonicity";
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    int violations = 0;
    for (int i = 0; i < cases; ++i) {
        SelectionCase c = random_selection_case(rng);
        double p1 = c.p;
        double p2 = unit(rng);
        while (p2 <= 0.0 || p2 >= 1.0) {
            p2 = unit(rng);
        }
        if (p1 > p2) {
            std::swap(p1, p2);
        }
        ++g.cases;
        const int k1 = routing::select_top_p(c.row, p1).cutoff;
        const int k2 = routing::select_top_p(c.row, p2).cutoff;
        if (k1 > k2) {
            ++violations;
            std::ostringstream msg;
            msg << "case " << i << ": row=" << describe(c.row) << std::setprecision(17) << " p1=" << p1 << " p2=" << p2
                << " gives k1=" << k1 << " > k2=" << k2;
            g.fail(msg.str());
        }
    }
    g.metric = violations;
    return g;
}

// ------------------------------------------------------------ control

struct PlantCase {
    double target = 4.0;
    std::uint64_t plant_seed = 0;
    double disturbance = 0.0;  // additive step in a(p) applied at `disturb_at`
};

struct PlantOutcome {
    int settle = -1;       // first step after which |a - T| <= tol holds to the end of the phase
    int resettle = -1;     // same, counted from the disturbance
    double worst_tail = 0.0;
};

inline int settle_step(const std::vector<control::TrajectoryPoint>& traj, std::size_t from, std::size_t to, double target,
                       double tol) {
    std::size_t s = to;
    while (s > from && std::abs(traj[s - 1].active - target) <= tol) {
        --s;
    }
    return s == to ? -1 : static_cast<int>(s - from);
}

/// Runs one plant with gains (k_pro, k_int) from p0 for 2 * phase steps; the
/// disturbance switches on at `phase`.
inline PlantOutcome run_plant_case(const PlantCase& c, double p0, double k_pro, double k_int, int experts, int phase,
                                   double tol) {
    const control::PiecewiseLinear base = control::random_monotone_plant(c.plant_seed);
    control::Plant plant;
    plant.response = [base, c, phase](double p, int step) { return base(p) + (step >= phase ? c.disturbance : 0.0); };
    control::PIControllerState ctl(p0, k_pro, k_int, c.target, experts);
    const auto traj = control::simulate_plant(ctl, plant, 2 * phase);
    PlantOutcome o;
    o.settle = settle_step(traj, 0, static_cast<std::size_t>(phase), c.target, tol);
    o.resettle = settle_step(traj, static_cast<std::size_t>(phase), traj.size(), c.target, tol);
    return o;
}

/// |a_t - T| <= 0.1 within `budget` steps for T in {2, 4, 8}, and again within
/// `budget` steps of a step disturbance of either sign.
inline GroupResult check_pi_convergence(std::uint64_t seed, int plants_per_target = 10, int budget = 200) {
    GroupResult g;
    g.name = "pi-convergence";
    const int phase = 2 * budget;
    int worst = 0;
    for (double target : {2.0, 4.0, 8.0}) {
        for (int i = 0; i < plants_per_target; ++i) {
            for (double d : {0.75, -0.75}) {
                PlantCase c{target, seed + static_cast<std::uint64_t>(i) * 7919u, d};
                const PlantOutcome o = run_plant_case(c, 0.25, 0.1, 0.1, 16, phase, 0.1);
                ++g.cases;
                // a phase that never settles reports -1
                const int s = o.settle < 0 ? phase : o.settle;
                const int r = o.resettle < 0 ? phase : o.resettle;
                worst = std::max({worst, s, r});
                if (s > budget || r > budget) {
                    std::ostringstream msg;
                    msg << "plant seed " << c.plant_seed << " target " << target << " disturbance " << d << ": settled at step "
                        << o.settle << ", re-settled " << o.resettle << " steps after the disturbance (budget " << budget << ")";
                    g.fail(msg.str());
                }
            }
        }
    }
    g.metric = worst;
    return g;
}

// ------------------------------------------------------------ gradients

struct GradInstance {
    model::ToyModelConfig config;
    losses::LossWeights weights;
    std::vector<int> tokens;
    std::vector<int> targets;
    std::optional<double> threshold;
};

/// Random 2-layer, 4-expert instance. Most use DTop-p with dynamic
/// normalization; every fourth uses top-2 under a global temperature.
inline GradInstance random_grad_instance(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    GradInstance in;
    auto& c = in.config;
    c.layers = 2;
    c.experts = 4;
    c.hidden = 6;
    c.expert_dim = 5;
    c.vocab = 9;
    c.seq_len = 5;
    c.seed = seed;
    if (seed % 4 == 3) {
        c.strategy = routing::RoutingKind::top_k;
        c.target = 2;
        c.normalization = routing::Normalization::global(0.5 + unit(rng));
    } else {
        c.strategy = routing::RoutingKind::dtop_p;
        c.target = 2;
        c.normalization = routing::Normalization::dynamic();
        in.threshold = 0.3 + 0.6 * unit(rng);
        c.p = *in.threshold;
    }
    in.weights = {0.1 + unit(rng), 0.1 + unit(rng), 0.1 + unit(rng), 0.1 + unit(rng)};
    std::uniform_int_distribution<int> tok(0, c.vocab - 1);
    for (int i = 0; i < 2 * c.seq_len; ++i) {
        in.tokens.push_back(tok(rng));
        in.targets.push_back(tok(rng));
    }
    return in;
}

/// Finite-difference check of the total loss with respect to every model
/// parameter. Routing decisions are recorded once and replayed, since the
/// selection masks are constants of the objective.
inline ad::GradCheckResult check_model_gradients(const GradInstance& in, double h = 1e-5) {
    model::ToyModel m(in.config);
    std::mt19937_64 rng(in.config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> w(0.0, 0.5);
    std::uniform_real_distribution<double> theta(0.5, 2.0);
    for (auto& p : m.parameters()) {
        const bool is_theta = p.name.ends_with(".theta");
        for (ad::Index i = 0; i < p.value.size(); ++i) {
            p.value.data()[i] = is_theta ? theta(rng) : w(rng);
        }
    }
    std::vector<routing::RoutingBatch> forced;
    {
        ad::Graph g;
        const auto fwd = m.forward(g, in.tokens, {in.threshold});
        for (const auto& l : fwd.layers) {
            forced.push_back(l.routing);
        }
    }
    const ad::ScalarFn f = [&](ad::Graph& g) {
        const auto fwd = m.forward(g, in.tokens, {in.threshold, &forced});
        return losses::total_loss(fwd, in.targets, in.weights).total;
    };
    return ad::grad_check(f, m.parameter_pointers(), h);
}

inline GroupResult check_gradients(std::uint64_t seed, int instances, double tol = 1e-4) {
    GroupResult g;
    g.name = "gradient-check";
    for (int i = 0; i < instances; ++i) {
        const GradInstance in = random_grad_instance(seed + static_cast<std::uint64_t>(i));
        const auto r = check_model_gradients(in);
        ++g.cases;
        g.metric = std::max(g.metric, r.max_rel_error);
        g.secondary = std::max(g.secondary, r.max_rel_error_resolved);
        if (!r.passed(tol)) {
            std::ostringstream msg;
            msg << "instance seed " << in.config.seed << " (" << routing::to_string(in.config.strategy) << ", threshold "
                << (in.threshold ? std::to_string(*in.threshold) : std::string("none")) << "): ";
            if (!r.finite) {
                msg << r.failure;
            } else {
                msg << "relative error " << r.max_rel_error << " at " << r.worst_param << "[" << r.worst_index
                    << "], " << r.max_rel_error_resolved << " over entries >= 1e-5";
            }
            g.fail(msg.str());
        }
    }
    return g;
}

// ------------------------------------------------------------ loss closed forms

/// Uniform routing: LB = lambda * k, dynamic loss = lambda * ln N, zero-logit
/// router z-loss = lambda * (ln N)^2.
inline GroupResult check_loss_closed_forms(double tol = 1e-10) {
    GroupResult g;
    g.name = "loss-closed-forms";
    for (int n : {2, 3, 4, 8, 16, 64}) {
        for (int tokens : {1, 5, 32}) {
            for (double lambda : {1e-4, 1e-3, 0.37, 1.0}) {
                ad::Graph graph;
                const ad::Tensor zeros = graph.constant(ad::Matrix::Zero(tokens, n));
                const ad::Tensor probs = graph.constant(ad::Matrix::Constant(tokens, n, 1.0 / n));
                const double ln_n = std::log(static_cast<double>(n));
                for (int k = 1; k <= n; k *= 2) {
                    const auto batch = routing::route(probs.value(), routing::RoutingStrategy::top_k(k), std::nullopt);
                    const double lb = losses::load_balance_loss(batch, probs, lambda).item();
                    ++g.cases;
                    if (std::abs(lb - lambda * k) > tol) {
                        std::ostringstream msg;
                        msg << std::setprecision(17) << "load balance N=" << n << " tokens=" << tokens << " k=" << k
                            << " lambda=" << lambda << ": " << lb << " != " << lambda * k;
                        g.fail(msg.str());
                    }
                }
                const double dl = losses::dynamic_loss(probs, lambda).item();
                const double rz = losses::router_z_loss(zeros, lambda).item();
                g.cases += 2;
                if (std::abs(dl - lambda * ln_n) > tol) {
                    std::ostringstream msg;
                    msg << std::setprecision(17) << "dynamic loss N=" << n << " lambda=" << lambda << ": " << dl
                        << " != " << lambda * ln_n;
                    g.fail(msg.str());
                }
                if (std::abs(rz - lambda * ln_n * ln_n) > tol) {
                    std::ostringstream msg;
                    msg << std::setprecision(17) << "router z-loss N=" << n << " lambda=" << lambda << ": " << rz
                        << " != " << lambda * ln_n * ln_n;
                    g.fail(msg.str());
                }
            }
        }
    }
    return g;
}

// ------------------------------------------------------------ selftest

struct SelftestOptions {
    bool flip_tie_break = false;  // fault injection: route with descending-index ties
    std::uint64_t seed = 20240611;
};

/// Runs every group, printing one line per group and the first failing case.
/// Returns true iff all groups pass.
inline bool selftest(std::ostream& out, const SelftestOptions& opts = {}) {
    const auto tie = opts.flip_tie_break ? routing::TieBreak::descending_index : routing::TieBreak::ascending_index;
    const std::vector<std::function<GroupResult()>> groups{
        [&] { return check_selection(opts.seed, 1000, tie); },
        [&] { return check_monotonicity(opts.seed + 1, 1000); },
        [&] { return check_pi_convergence(opts.seed + 2); },
        [&] { return check_gradients(opts.seed + 3, 20); },
        [&] { return check_loss_closed_forms(); },
    };
    bool ok = true;
    std::string first;
    for (const auto& run : groups) {
        const GroupResult r = run();
        out << (r.passed ? "PASS " : "FAIL ") << r.name << " (" << r.cases << " cases)\n";
        if (!r.passed) {
            out << "  first failure: " << r.first_failure << "\n";
            if (ok) {
                first = r.name + ": " + r.first_failure;
            }
            ok = false;
        }
        out.flush();
    }
    if (!ok) {
        out << "selftest failed; first failing case: " << first << "\n";
    }
    return ok;
}

}  // namespace moelab::verify
