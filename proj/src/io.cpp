#include "qagg/io.hpp"

#include "qagg/error.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

namespace qagg::io {

namespace {

struct Block {
    std::vector<std::vector<double>> rows;
    long declared_rows = -1;
    long declared_cols = -1;
    std::size_t first_line = 0;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void fail(const std::string& field, std::size_t line, const std::string& what) {
    std::ostringstream os;
    os << field << ": line " << line << ": " << what;
    throw InputError(os.str());
}

std::vector<double> parse_row(const std::string& text, const std::string& field, std::size_t line) {
    std::vector<double> row;
    std::stringstream ss(text);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        cell = trim(cell);
        if (cell.empty()) fail(field, line, "empty cell");
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(cell, &used);
        } catch (const std::exception&) {
            fail(field, line, "cannot parse '" + cell + "' as a number");
        }
        if (used != cell.size()) fail(field, line, "cannot parse '" + cell + "' as a number");
        if (!std::isfinite(v)) fail(field, line, "non-finite value '" + cell + "'");
        row.push_back(v);
    }
    if (!text.empty() && text.back() == ',') fail(field, line, "trailing comma");
    return row;
}

Eigen::MatrixXd finish_block(const Block& b, const std::string& field) {
    if (b.rows.empty()) fail(field, b.first_line, "no data rows");
    const std::size_t cols = b.rows.front().size();
    for (std::size_t r = 0; r < b.rows.size(); ++r) {
        if (b.rows[r].size() != cols) {
            std::ostringstream os;
            os << "row " << r + 1 << " has " << b.rows[r].size() << " values, expected " << cols;
            fail(field, b.first_line, os.str());
        }
    }
    if (b.declared_rows >= 0 &&
        (static_cast<std::size_t>(b.declared_rows) != b.rows.size() ||
         static_cast<std::size_t>(b.declared_cols) != cols)) {
        std::ostringstream os;
        os << "header declares " << b.declared_rows << "x" << b.declared_cols << " but data is "
           << b.rows.size() << "x" << cols;
        fail(field, b.first_line, os.str());
    }
    Eigen::MatrixXd m(static_cast<Eigen::Index>(b.rows.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < b.rows.size(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = b.rows[r][c];
        }
    }
    return m;
}

std::vector<Eigen::MatrixXd> parse_blocks(std::istream& in, const std::string& field) {
    std::vector<Eigen::MatrixXd> out;
    Block cur;
    std::string raw;
    std::size_t line = 0;
    bool open = false;
    while (std::getline(in, raw)) {
        ++line;
        const std::string text = trim(raw);
        if (text.empty()) {
            if (open) out.push_back(finish_block(cur, field));
            cur = Block{};
            open = false;
            continue;
        }
        if (text.front() == '#') {
            std::istringstream hs(text.substr(1));
            long r = -1;
            long c = -1;
            if (!open && (hs >> r >> c) && r > 0 && c > 0) {
                std::string rest;
                if (!(hs >> rest)) {
                    cur.declared_rows = r;
                    cur.declared_cols = c;
                    cur.first_line = line;
                    open = true;
                }
            }
            continue;
        }
        if (!open) {
            cur.first_line = line;
            open = true;
        }
        cur.rows.push_back(parse_row(text, field, line));
    }
    if (open) out.push_back(finish_block(cur, field));
    return out;
}

}  // namespace

Eigen::MatrixXd parse_matrix_csv(std::istream& in, const std::string& field) {
    auto blocks = parse_blocks(in, field);
    if (blocks.empty()) throw InputError(field + ": no data");
    if (blocks.size() > 1) throw InputError(field + ": expected one matrix, found blank-line separated blocks");
    return std::move(blocks.front());
}

Eigen::MatrixXd read_matrix_csv(const std::filesystem::path& path, const std::string& field) {
    std::ifstream in(path);
    if (!in) throw InputError(field + ": cannot open '" + path.string() + "'");
    return parse_matrix_csv(in, field);
}

std::vector<Eigen::MatrixXd> parse_matrix_list(std::istream& in, const std::string& field) {
    auto blocks = parse_blocks(in, field);
    if (blocks.empty()) throw InputError(field + ": no matrices");
    return blocks;
}

std::vector<Eigen::MatrixXd> read_matrix_list(const std::filesystem::path& path, const std::string& field) {
    std::ifstream in(path);
    if (!in) throw InputError(field + ": cannot open '" + path.string() + "'");
    return parse_matrix_list(in, field);
}

Eigen::VectorXd read_vector_csv(const std::filesystem::path& path, const std::string& field) {
    const Eigen::MatrixXd m = read_matrix_csv(path, field);
    if (m.cols() == 1) return m.col(0);
    if (m.rows() == 1) return m.row(0).transpose();
    std::ostringstream os;
    os << field << ": expected a single row or column, got " << m.rows() << "x" << m.cols();
    throw InputError(os.str());
}

void write_matrix_csv(std::ostream& os, const Eigen::MatrixXd& m) {
    std::ostringstream line;
    line << std::setprecision(17);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        line.str("");
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            if (c > 0) line << ',';
            line << m(r, c);
        }
        os << line.str() << '\n';
    }
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw InputError("write failed for '" + path.string() + "'");
}

std::string sha256_hex(const std::string& bytes) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
        throw NumericalError("sha256 digest failed");
    }
    std::ostringstream os;
    os << std::hex << std::setfill('0');
    for (unsigned int i = 0; i < len; ++i) os << std::setw(2) << static_cast<int>(digest[i]);
    return os.str();
}

}  // namespace qagg::io
