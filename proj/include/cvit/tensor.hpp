#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cvit {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), int64_t{1}, std::multiplies<int64_t>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

struct dim_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dense n-dimensional array of scalars, row-major flat storage.
/// Scalar is float for training/inference and double for gradient checks.
template <typename Scalar>
class Tensor {
public:
    using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
    using MatrixMap =
        Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using ConstMatrixMap =
        Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        data_ = Storage::Zero(shape_numel(shape_));
    }

    Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
            throw dim_error("tensor data length " + std::to_string(data_.size()) +
                            " does not match shape " + shape_str(shape_));
    }

    Tensor(Shape shape, std::initializer_list<Scalar> values) : shape_(std::move(shape)) {
        data_.resize(static_cast<Eigen::Index>(values.size()));
        Eigen::Index i = 0;
        for (Scalar v : values) data_[i++] = v;
        if (data_.size() != shape_numel(shape_))
            throw dim_error("initializer length does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, Scalar value) {
        Tensor t(std::move(shape));
        t.data_.setConstant(value);
        return t;
    }

    static Tensor ones(Shape shape) { return full(std::move(shape), Scalar(1)); }

    const Shape& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t rank() const { return shape_.size(); }
    int64_t numel() const { return data_.size(); }

    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }
    Storage& array() { return data_; }
    const Storage& array() const { return data_; }

    Scalar& operator[](int64_t i) { return data_[i]; }
    Scalar operator[](int64_t i) const { return data_[i]; }

    /// View the flat data as a rows x cols row-major matrix.
    MatrixMap as_matrix(int64_t rows, int64_t cols) {
        if (rows * cols != numel())
            throw dim_error("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                            " does not cover tensor " + shape_str(shape_));
        return MatrixMap(data_.data(), rows, cols);
    }
    ConstMatrixMap as_matrix(int64_t rows, int64_t cols) const {
        if (rows * cols != numel())
            throw dim_error("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                            " does not cover tensor " + shape_str(shape_));
        return ConstMatrixMap(data_.data(), rows, cols);
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel())
            throw dim_error("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                            " changes element count");
        return Tensor(std::move(shape), data_);
    }

    bool all_finite() const { return data_.isFinite().all(); }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out(shape_);
        out.array() = data_.template cast<T>();
        return out;
    }

private:
    Shape shape_;
    Storage data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace cvit
