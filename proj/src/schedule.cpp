#include "fmlb/schedule.hpp"

#include <cmath>
#include <stdexcept>

#include "fmlb/tensor.hpp"

namespace fmlb {

void OptimizerConfig::validate() const {
    require(beta1 > 0.0 && beta1 < 1.0, "OptimizerConfig: beta1 out of (0, 1)");
    require(beta2 > 0.0 && beta2 < 1.0, "OptimizerConfig: beta2 out of (0, 1)");
    require(eps > 0.0, "OptimizerConfig: eps must be positive");
    require(weight_decay >= 0.0, "OptimizerConfig: negative weight decay");
}

double ScheduleConfig::decay_fraction() const {
    return static_cast<double>(t_total - t_stable_end) / static_cast<double>(t_total);
}

void ScheduleConfig::validate() const {
    require(eta_max > 0.0, "ScheduleConfig: eta_max must be positive");
    require(eta_min_ratio > 0.0 && eta_min_ratio <= 1.0, "ScheduleConfig: eta_min_ratio out of (0, 1]");
    require(t_warmup < t_stable_end, "ScheduleConfig: t_warmup must precede t_stable_end");
    require(t_stable_end < t_total, "ScheduleConfig: t_stable_end must precede t_total");
    require(b_min >= 1 && b_min <= b_max, "ScheduleConfig: need 1 <= b_min <= b_max");
    require(batch_granularity >= 1, "ScheduleConfig: batch_granularity must be >= 1");
}

ScheduleConfig ScheduleConfig::paper_scale() {
    ScheduleConfig cfg;
    cfg.eta_max = 6.4e-4;
    cfg.eta_min_ratio = 1.0 / 256.0;
    cfg.t_warmup = 1'000'000'000ull;          // 1 GT
    cfg.t_total = 5'800'000'000'000ull;       // 5.8 TT
    cfg.t_stable_end = 5'220'000'000'000ull;  // 10% of the run reserved for decay
    cfg.b_min = 128;
    cfg.b_max = 2048;
    cfg.t_rampup = 50'000'000'000ull;         // 50 GT
    cfg.batch_scaling = false;
    return cfg;
}

double noise_temperature(double eta, uint64_t b) {
    if (b == 0) {
        throw std::invalid_argument("noise_temperature: batch size must be >= 1");
    }
    require(eta >= 0.0, "noise_temperature: negative learning rate");
    return eta / std::sqrt(static_cast<double>(b));
}

uint64_t batch_size_at(uint64_t t, const ScheduleConfig& cfg) {
    uint64_t b;
    if (cfg.t_rampup == 0 || t >= cfg.t_rampup) {
        b = cfg.b_max;
    } else {
        double frac = static_cast<double>(t) / static_cast<double>(cfg.t_rampup);
        double raw = static_cast<double>(cfg.b_min) +
                     frac * static_cast<double>(cfg.b_max - cfg.b_min);
        b = static_cast<uint64_t>(raw);
    }
    b -= b % cfg.batch_granularity;
    return b;
}

double lr_at(uint64_t t, const ScheduleConfig& cfg) {
    if (t > cfg.t_total) {
        throw std::invalid_argument("lr_at: t beyond t_total");
    }
    auto eta_base = [&cfg](uint64_t at) {
        double base = cfg.eta_max;
        if (cfg.batch_scaling) {
            base *= std::sqrt(static_cast<double>(batch_size_at(at, cfg)) /
                              static_cast<double>(cfg.b_max));
        }
        return base;
    };
    if (t < cfg.t_warmup) {
        double frac = static_cast<double>(t) / static_cast<double>(cfg.t_warmup);
        return frac * eta_base(t);
    }
    if (t <= cfg.t_stable_end) {
        return eta_base(t);
    }
    // Decay anchors to the stable-phase value at t_stable_end. The profile
    // anchor * exp(-(tau/t_decay) * log(1/eta_min_ratio)) is computed as a
    // power so the endpoints land exactly on anchor and anchor * ratio.
    double anchor = eta_base(cfg.t_stable_end);
    double tau = static_cast<double>(t - cfg.t_stable_end);
    double t_decay = static_cast<double>(cfg.t_total - cfg.t_stable_end);
    return anchor * std::pow(cfg.eta_min_ratio, tau / t_decay);
}

ScheduleState schedule_at(uint64_t t, const ScheduleConfig& cfg) {
    ScheduleState s;
    s.t = t;
    s.lr = lr_at(t, cfg);
    s.batch = batch_size_at(t, cfg);
    s.noise_temp = noise_temperature(s.lr, s.batch);
    return s;
}

void adamw_update(double* p, const double* g, double* m, double* v, size_t n,
                  uint64_t step_index, double lr, const OptimizerConfig& cfg,
                  bool decay) {
    require(step_index >= 1, "adamw_update: step_index starts at 1");
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_index));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_index));
    double wd = decay ? cfg.weight_decay : 0.0;
    for (size_t i = 0; i < n; ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + wd * p[i]);
    }
}

}  // namespace fmlb
