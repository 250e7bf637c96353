#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace qagg::io {

/**
 * Dense matrices as headerless row-major CSV. An optional first line
 * "# rows cols" pins the shape; other lines starting with '#' are comments.
 * `field` prefixes every error message.
 */
Eigen::MatrixXd parse_matrix_csv(std::istream& in, const std::string& field);
Eigen::MatrixXd read_matrix_csv(const std::filesystem::path& path, const std::string& field);

/// Several matrices in one file, separated by blank lines. Each block may
/// carry its own shape header.
std::vector<Eigen::MatrixXd> parse_matrix_list(std::istream& in, const std::string& field);
std::vector<Eigen::MatrixXd> read_matrix_list(const std::filesystem::path& path, const std::string& field);

/// A column (n x 1) or a row (1 x n) matrix file read as a vector.
Eigen::VectorXd read_vector_csv(const std::filesystem::path& path, const std::string& field);

/// Writes with 17 significant digits so that values round-trip exactly.
void write_matrix_csv(std::ostream& os, const Eigen::MatrixXd& m);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

/// Lowercase hex SHA-256 digest.
std::string sha256_hex(const std::string& bytes);

}  // namespace qagg::io
