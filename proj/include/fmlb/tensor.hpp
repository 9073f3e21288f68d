#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace fmlb {

// Tracks live tensor bytes inside a scope. Used by the inference and bench
// modules to account for transient working memory without a custom allocator.
// Meters nest; an allocation is charged to every active meter on this thread.
class TransientMeter {
public:
    TransientMeter();
    ~TransientMeter();
    TransientMeter(const TransientMeter&) = delete;
    TransientMeter& operator=(const TransientMeter&) = delete;

    int64_t current_bytes() const { return current_; }
    int64_t peak_bytes() const { return peak_; }

    static void on_alloc(int64_t bytes);
    static void on_free(int64_t bytes);

private:
    TransientMeter* prev_ = nullptr;
    int64_t current_ = 0;
    int64_t peak_ = 0;
};

// Dense row-major array of doubles. All shapes are fixed at construction.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<size_t> shape, double fill = 0.0);
    Tensor(std::vector<size_t> shape, std::vector<double> values);
    Tensor(const Tensor& other);
    Tensor(Tensor&& other) noexcept;
    Tensor& operator=(const Tensor& other);
    Tensor& operator=(Tensor&& other) noexcept;
    ~Tensor();

    static Tensor vec(std::initializer_list<double> values);

    size_t ndim() const { return shape_.size(); }
    size_t dim(size_t i) const { return shape_[i]; }
    const std::vector<size_t>& shape() const { return shape_; }
    size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // 2-D helpers; rows()/cols() require ndim() == 2.
    size_t rows() const { return shape_[0]; }
    size_t cols() const { return shape_[1]; }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }
    double& at(size_t r, size_t c) { return data_[r * shape_[1] + c]; }
    double at(size_t r, size_t c) const { return data_[r * shape_[1] + c]; }
    double* row(size_t r) { return data_.data() + r * shape_[1]; }
    const double* row(size_t r) const { return data_.data() + r * shape_[1]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    void fill(double v);
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;
    std::string shape_str() const;

private:
    void account(int64_t bytes);

    std::vector<size_t> shape_;
    std::vector<double> data_;
};

// Throws std::invalid_argument when `t` contains NaN or Inf.
void ensure_finite(const Tensor& t, const char* op_name);
void require(bool cond, const std::string& message);

}  // namespace fmlb
