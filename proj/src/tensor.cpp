#include "fmlb/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace fmlb {

namespace {
thread_local TransientMeter* g_active_meter = nullptr;
}

TransientMeter::TransientMeter() : prev_(g_active_meter) {
    g_active_meter = this;
}

TransientMeter::~TransientMeter() {
    g_active_meter = prev_;
}

void TransientMeter::on_alloc(int64_t bytes) {
    for (TransientMeter* m = g_active_meter; m != nullptr; m = m->prev_) {
        m->current_ += bytes;
        if (m->current_ > m->peak_) {
            m->peak_ = m->current_;
        }
    }
}

void TransientMeter::on_free(int64_t bytes) {
    for (TransientMeter* m = g_active_meter; m != nullptr; m = m->prev_) {
        m->current_ -= bytes;
    }
}

Tensor::Tensor(std::vector<size_t> shape, double fill) : shape_(std::move(shape)) {
    size_t n = 1;
    for (size_t d : shape_) {
        require(d > 0, "Tensor: zero-sized dimension");
        n *= d;
    }
    data_.assign(n, fill);
    account(static_cast<int64_t>(n) * 8);
}

Tensor::Tensor(std::vector<size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
    size_t n = 1;
    for (size_t d : shape_) {
        n *= d;
    }
    require(n == data_.size(), "Tensor: shape does not match value count");
    account(static_cast<int64_t>(data_.size()) * 8);
}

Tensor::Tensor(const Tensor& other) : shape_(other.shape_), data_(other.data_) {
    account(static_cast<int64_t>(data_.size()) * 8);
}

Tensor::Tensor(Tensor&& other) noexcept
    : shape_(std::move(other.shape_)), data_(std::move(other.data_)) {
    other.shape_.clear();
    other.data_.clear();
}

Tensor& Tensor::operator=(const Tensor& other) {
    if (this != &other) {
        account(-static_cast<int64_t>(data_.size()) * 8);
        shape_ = other.shape_;
        data_ = other.data_;
        account(static_cast<int64_t>(data_.size()) * 8);
    }
    return *this;
}

Tensor& Tensor::operator=(Tensor&& other) noexcept {
    if (this != &other) {
        TransientMeter::on_free(static_cast<int64_t>(data_.size()) * 8);
        shape_ = std::move(other.shape_);
        data_ = std::move(other.data_);
        other.shape_.clear();
        other.data_.clear();
    }
    return *this;
}

Tensor::~Tensor() {
    account(-static_cast<int64_t>(data_.size()) * 8);
}

Tensor Tensor::vec(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

void Tensor::fill(double v) {
    data_.assign(data_.size(), v);
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
        os << (i ? "," : "") << shape_[i];
    }
    os << "]";
    return os.str();
}

void Tensor::account(int64_t bytes) {
    if (bytes > 0) {
        TransientMeter::on_alloc(bytes);
    } else if (bytes < 0) {
        TransientMeter::on_free(-bytes);
    }
}

void ensure_finite(const Tensor& t, const char* op_name) {
    if (!t.all_finite()) {
        throw std::invalid_argument(std::string(op_name) + ": non-finite input");
    }
}

void require(bool cond, const std::string& message) {
    if (!cond) {
        throw std::invalid_argument(message);
    }
}

}  // namespace fmlb
