#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace rdpm {

enum class ScheduleKind { Sin, Linear, Pow };

inline const char* to_string(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::Sin: return "sin";
        case ScheduleKind::Linear: return "linear";
        case ScheduleKind::Pow: return "pow";
    }
    return "?";
}

inline ScheduleKind schedule_kind_from(const std::string& s) {
    if (s == "sin") return ScheduleKind::Sin;
    if (s == "linear") return ScheduleKind::Linear;
    if (s == "pow") return ScheduleKind::Pow;
    throw std::invalid_argument("unknown schedule kind: " + s);
}

// Per-timestep mixing coefficients for the T-step quantization diffusion.
// alpha rises to exactly 1 at t = T; beta is always derived from alpha via
// the unit-norm constraint, so alpha_t^2 + beta_t^2 == 1 cannot drift.
// gamma_t = alpha_t is the per-step quantization loss weight.
struct NoiseSchedule {
    ScheduleKind kind;
    int T;
    double phi;  // pow only
    std::vector<double> alphas;  // index 0 holds t = 1
    std::vector<double> betas;
    std::vector<double> gammas;

    double alpha(int t) const { return alphas.at(static_cast<std::size_t>(t - 1)); }
    double beta(int t) const { return betas.at(static_cast<std::size_t>(t - 1)); }
    double gamma(int t) const { return gammas.at(static_cast<std::size_t>(t - 1)); }
};

inline NoiseSchedule build_schedule(ScheduleKind kind, int T, double phi = 0.75) {
    if (T < 1) throw std::invalid_argument("build_schedule: T must be >= 1");
    if (kind == ScheduleKind::Pow && !(phi > 0.0 && phi < 1.0))
        throw std::invalid_argument("build_schedule: pow needs phi in (0,1), got " +
                                    std::to_string(phi));
    NoiseSchedule s;
    s.kind = kind;
    s.T = T;
    s.phi = phi;
    s.alphas.resize(static_cast<std::size_t>(T));
    for (int t = 1; t <= T; ++t) {
        double a;
        switch (kind) {
            case ScheduleKind::Sin:
                a = std::sin(std::numbers::pi / 2.0 * t / T);
                break;
            case ScheduleKind::Linear:
                a = static_cast<double>(t) / T;
                break;
            case ScheduleKind::Pow:
                a = std::pow(phi, static_cast<double>(T - t));
                break;
            default:
                a = 1.0;
        }
        s.alphas[static_cast<std::size_t>(t - 1)] = a;
    }
    s.alphas.back() = 1.0;  // alpha_T = 1 for every kind
    s.betas.resize(s.alphas.size());
    for (std::size_t i = 0; i < s.alphas.size(); ++i) {
        double a = s.alphas[i];
        s.betas[i] = std::sqrt(std::max(0.0, 1.0 - a * a));
    }
    s.gammas = s.alphas;
    return s;
}

enum class CfgMode { Constant, Linear };

inline const char* to_string(CfgMode m) {
    return m == CfgMode::Constant ? "constant" : "linear";
}

inline CfgMode cfg_mode_from(const std::string& s) {
    if (s == "constant") return CfgMode::Constant;
    if (s == "linear") return CfgMode::Linear;
    throw std::invalid_argument("unknown cfg mode: " + s);
}

// Guidance strength at step t. The linear ramp starts at 0 (t = 1) and ends
// at lambda_max (t = T) so early steps keep diversity.
inline double cfg_lambda(int t, int T, double lambda_max, CfgMode mode) {
    if (t < 1 || t > T)
        throw std::invalid_argument("cfg_lambda: t = " + std::to_string(t) +
                                    " out of [1," + std::to_string(T) + "]");
    if (lambda_max < 0.0)
        throw std::invalid_argument("cfg_lambda: lambda_max must be >= 0");
    if (mode == CfgMode::Constant || T == 1) return lambda_max;
    return lambda_max * static_cast<double>(t - 1) / static_cast<double>(T - 1);
}

}  // namespace rdpm
