#pragma once

#include <optional>

#include <Eigen/Dense>

namespace relvit {

/// Backbone output: N tokens of dimension d laid out on a rows x cols grid
/// (row-major), plus an optional designated summary ([CLS]) token.
struct TokenSequence {
    Eigen::MatrixXd tokens;  // N x d
    int grid_rows = 0;
    int grid_cols = 0;
    std::optional<Eigen::RowVectorXd> cls;

    Eigen::Index size() const { return tokens.rows(); }
    Eigen::Index dim() const { return tokens.cols(); }

};

/// Exact (bitwise-value) equality including grid shape and summary token.
bool same_tokens(const TokenSequence& a, const TokenSequence& b);

} // namespace relvit
