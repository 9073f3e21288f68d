#pragma once

#include <cstddef>
#include <cstdint>

namespace fmlb {

struct OptimizerConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;

    void validate() const;
};

// Warmup-stable-decay schedule plus linear batch rampup. Time is measured in
// tokens throughout.
struct ScheduleConfig {
    double eta_max = 6.4e-4;
    double eta_min_ratio = 1.0 / 256.0;
    uint64_t t_warmup = 0;
    uint64_t t_stable_end = 0;
    uint64_t t_total = 0;
    uint64_t b_min = 128;
    uint64_t b_max = 2048;
    uint64_t t_rampup = 0;
    uint64_t batch_granularity = 1;
    // When set, the learning rate is scaled by sqrt(b/b_max) so that the
    // gradient noise temperature eta/sqrt(b) stays constant while the batch
    // size ramps up.
    bool batch_scaling = false;

    double decay_fraction() const;
    void validate() const;

    static ScheduleConfig paper_scale();
};

// Gradient noise temperature eta / sqrt(b).
double noise_temperature(double eta, uint64_t b);

// Linear b_min -> b_max over [0, t_rampup], then b_max; floored to a multiple
// of batch_granularity.
uint64_t batch_size_at(uint64_t t, const ScheduleConfig& cfg);

// Warmup: linear 0 -> eta_base over [0, t_warmup]. Stable: eta_base. Decay:
// value at t_stable_end times eta_min_ratio^(tau/t_decay), so the endpoint
// ratio is exact. eta_base is eta_max, scaled by sqrt(b(t)/b_max) when
// batch_scaling is on.
double lr_at(uint64_t t, const ScheduleConfig& cfg);

struct ScheduleState {
    uint64_t t = 0;
    double lr = 0.0;
    uint64_t batch = 0;
    double noise_temp = 0.0;
};

ScheduleState schedule_at(uint64_t t, const ScheduleConfig& cfg);

// Decoupled AdamW with bias correction on a flat parameter range:
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
//   p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd * p)
// `decay` turns the weight-decay term off for exempt parameters (norm gains,
// biases, the log-transition and skip parameters).
void adamw_update(double* p, const double* g, double* m, double* v, size_t n,
                  uint64_t step_index, double lr, const OptimizerConfig& cfg,
                  bool decay);

}  // namespace fmlb
