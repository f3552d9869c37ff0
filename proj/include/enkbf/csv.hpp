#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "enkbf/errors.hpp"

namespace enkbf {

/// Shortest decimal that round-trips a double (%.17g always does).
inline std::string format_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

/// Hex-float encoding, bit-exact for finite doubles.
inline std::string format_double_hex(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%a", x);
    return buf;
}

/// Minimal CSV emitter: fixed column order, full round-trip precision, no
/// quoting (fields never contain commas here).
class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& columns)
        : out_(path), n_columns_(columns.size()) {
        if (!out_) throw ConfigInvalid("cannot open for writing: " + path);
        for (std::size_t i = 0; i < columns.size(); ++i) {
            if (i) out_ << ',';
            out_ << columns[i];
        }
        out_ << '\n';
    }

    void row(const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) out_ << ',';
            out_ << fields[i];
        }
        out_ << '\n';
    }

    std::size_t n_columns() const { return n_columns_; }

private:
    std::ofstream out_;
    std::size_t n_columns_;
};

inline std::string cell(double x) { return format_double(x); }
inline std::string cell(long x) { return std::to_string(x); }
inline std::string cell(int x) { return std::to_string(x); }
inline std::string cell(std::size_t x) { return std::to_string(x); }
inline std::string cell(const std::string& s) { return s; }

} // namespace enkbf
