#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "moelab/error.hpp"

namespace moelab::control {

inline constexpr double kThresholdMin = 1e-4;
inline constexpr double kThresholdMax = 1.0 - 1e-4;

/// Discrete PI controller driving the global top-p threshold toward a target
/// number of activated experts. The law is absolute (anchored at p0):
///   e_t     = (target - a_t) / experts
///   p_{t+1} = clip(p0 + k_pro * e_t + k_int * sum_{i<=t} e_i)
/// Only the output is clipped; the error sum is never decayed or limited.
struct PIControllerState {
    double p0 = 0.25;
    double k_pro = 0.1;
    double k_int = 0.1;
    double error_sum = 0.0;
    double threshold = 0.25;
    double last_error = 0.0;
    int target = 1;
    int experts = 1;
    std::int64_t updates = 0;

    PIControllerState() = default;
    PIControllerState(double initial, double kp, double ki, int target_active, int total_experts)
        : p0(initial), k_pro(kp), k_int(ki), threshold(initial), target(target_active), experts(total_experts) {
        if (!(initial > 0.0 && initial < 1.0)) {
            throw ConfigError("controller p0 must lie in (0, 1), got " + std::to_string(initial));
        }
        if (!(kp >= 0.0 && ki >= 0.0 && std::isfinite(kp) && std::isfinite(ki))) {
            throw ConfigError("controller gains must be finite and non-negative");
        }
        if (total_experts < 1 || target_active < 1 || target_active > total_experts) {
            throw ConfigError("controller target " + std::to_string(target_active) + " outside [1, " +
                              std::to_string(total_experts) + "]");
        }
    }
};

inline double clip_threshold(double p) { return std::clamp(p, kThresholdMin, kThresholdMax); }

/// Feeds one observed mean activation into the controller and returns the
/// threshold for the next batch. A non-finite observation leaves the state untouched.
inline double pi_update(PIControllerState& s, double observed_active) {
    if (!std::isfinite(observed_active)) {
        throw ControllerError("observed activation is not finite; threshold left at " + std::to_string(s.threshold));
    }
    const double e = (static_cast<double>(s.target) - observed_active) / static_cast<double>(s.experts);
    s.error_sum += e;
    s.last_error = e;
    s.threshold = clip_threshold(s.p0 + s.k_pro * e + s.k_int * s.error_sum);
    ++s.updates;
    return s.threshold;
}

// ---------------------------------------------------------------- plants

/// Strictly increasing piecewise-linear map from threshold to activation,
/// clamped to its end values outside the knot range.
class PiecewiseLinear {
public:
    PiecewiseLinear(std::vector<double> xs, std::vector<double> ys) : xs_(std::move(xs)), ys_(std::move(ys)) {
        if (xs_.size() < 2 || xs_.size() != ys_.size()) {
            throw InvalidArgument("piecewise-linear plant needs at least two matching knots");
        }
        for (std::size_t i = 1; i < xs_.size(); ++i) {
            if (!(xs_[i] > xs_[i - 1]) || ys_[i] < ys_[i - 1]) {
                throw InvalidArgument("piecewise-linear plant knots must be increasing");
            }
        }
    }

    double operator()(double x) const {
        if (x <= xs_.front()) {
            return ys_.front();
        }
        if (x >= xs_.back()) {
            return ys_.back();
        }
        const auto it = std::upper_bound(xs_.begin(), xs_.end(), x);
        const std::size_t i = static_cast<std::size_t>(it - xs_.begin());
        const double t = (x - xs_[i - 1]) / (xs_[i] - xs_[i - 1]);
        return ys_[i - 1] + t * (ys_[i] - ys_[i - 1]);
    }

    [[nodiscard]] double max_slope() const {
        double m = 0.0;
        for (std::size_t i = 1; i < xs_.size(); ++i) {
            m = std::max(m, (ys_[i] - ys_[i - 1]) / (xs_[i] - xs_[i - 1]));
        }
        return m;
    }

private:
    std::vector<double> xs_;
    std::vector<double> ys_;
};

/// System under control: mean activation as a function of threshold and
/// step (the step lets a test shift the plant mid-run), plus uniform noise
/// in [-noise, noise].
struct Plant {
    std::function<double(double threshold, int step)> response;
    double noise = 0.0;
    std::uint64_t seed = 0;
};

struct TrajectoryPoint {
    double threshold = 0.0;  // p_t used at this step
    double active = 0.0;     // a_t observed
    double error = 0.0;      // e_t
};

/// Runs the closed loop for `steps` controller updates.
inline std::vector<TrajectoryPoint> simulate_plant(PIControllerState& controller, const Plant& plant, int steps) {
    if (!plant.response) {
        throw ConfigError("plant has no response function");
    }
    const double lo = plant.response(kThresholdMin, 0);
    const double hi = plant.response(kThresholdMax, 0);
    if (controller.target < lo || controller.target > hi) {
        throw ConfigError("target " + std::to_string(controller.target) + " outside plant range [" + std::to_string(lo) +
                          ", " + std::to_string(hi) + "]");
    }
    std::mt19937_64 rng(plant.seed);
    std::uniform_real_distribution<double> jitter(-1.0, 1.0);
    std::vector<TrajectoryPoint> out;
    out.reserve(static_cast<std::size_t>(std::max(steps, 0)));
    for (int t = 0; t < steps; ++t) {
        TrajectoryPoint pt;
        pt.threshold = controller.threshold;
        pt.active = plant.response(controller.threshold, t);
        if (plant.noise > 0.0) {
            pt.active += plant.noise * jitter(rng);
        }
        pi_update(controller, pt.active);
        pt.error = controller.last_error;
        out.push_back(pt);
    }
    return out;
}

/// Random strictly increasing plant on [0, 1] with a(0) = 1 and slopes in
/// [8, 15] per unit threshold, so a(1) lies in [9, 16].
inline PiecewiseLinear random_monotone_plant(std::uint64_t seed, int segments = 10) {
    std::mt19937_64 rng(seed);
    const double width = 1.0 / segments;
    std::uniform_real_distribution<double> slope(8.0, 15.0);
    std::vector<double> xs{0.0};
    std::vector<double> ys{1.0};
    for (int i = 1; i <= segments; ++i) {
        xs.push_back(i * width);
        ys.push_back(ys.back() + slope(rng) * width);
    }
    return {std::move(xs), std::move(ys)};
}

}  // namespace moelab::control
