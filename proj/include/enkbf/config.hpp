#pragma once

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "enkbf/csv.hpp"
#include "enkbf/model.hpp"

namespace enkbf {

/// Sectioned key = value text config. Key order inside a section is
/// preserved so writes round-trip verbatim.
class IniFile {
public:
    struct Section {
        std::string name;
        std::vector<std::pair<std::string, std::string>> entries;
    };

    static IniFile parse_text(const std::string& text, const std::string& origin = "<string>") {
        IniFile ini;
        std::istringstream in(text);
        std::string line;
        Section* current = nullptr;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string t = trim(line);
            if (t.empty() || t[0] == '#' || t[0] == ';') continue;
            if (t.front() == '[') {
                if (t.back() != ']')
                    throw ConfigInvalid(origin + ":" + std::to_string(lineno) +
                                        ": malformed section header");
                ini.sections_.push_back({trim(t.substr(1, t.size() - 2)), {}});
                current = &ini.sections_.back();
                continue;
            }
            auto eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigInvalid(origin + ":" + std::to_string(lineno) +
                                    ": expected key = value");
            if (!current)
                throw ConfigInvalid(origin + ":" + std::to_string(lineno) +
                                    ": key outside any [section]");
            current->entries.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
        }
        return ini;
    }

    static IniFile load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigInvalid("cannot open config file: " + path);
        std::ostringstream buf;
        buf << in.rdbuf();
        return parse_text(buf.str(), path);
    }

    bool has_section(const std::string& name) const { return find(name) != nullptr; }

    const Section* find(const std::string& name) const {
        for (const auto& s : sections_)
            if (s.name == name) return &s;
        return nullptr;
    }

    const std::string* get(const std::string& section, const std::string& key) const {
        const Section* s = find(section);
        if (!s) return nullptr;
        for (const auto& [k, v] : s->entries)
            if (k == key) return &v;
        return nullptr;
    }

    /// Every key of `section` must be in `allowed`; anything else is an
    /// error, not a warning.
    void require_known_keys(const std::string& section, const std::set<std::string>& allowed) const {
        const Section* s = find(section);
        if (!s) return;
        for (const auto& [k, v] : s->entries)
            if (!allowed.count(k))
                throw ConfigInvalid("unknown key '" + k + "' in section [" + section + "]");
    }

    const std::vector<Section>& sections() const { return sections_; }

private:
    static std::string trim(const std::string& s) {
        auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return {};
        auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    std::vector<Section> sections_;
};

namespace detail {

inline std::vector<double> parse_double_list(const std::string& text, const std::string& key) {
    std::vector<double> out;
    const char* p = text.c_str();
    char* end = nullptr;
    while (*p) {
        double v = std::strtod(p, &end);
        if (end == p) {
            std::string rest(p);
            if (rest.find_first_not_of(" \t") == std::string::npos) break;
            throw ConfigInvalid("cannot parse number list for key '" + key + "'");
        }
        out.push_back(v);
        p = end;
    }
    return out;
}

inline std::string encode_matrix(const Matrix& m) {
    std::string s;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            if (!s.empty()) s += ' ';
            s += format_double_hex(m(i, j)); // row-major
        }
    return s;
}

inline Matrix decode_matrix(const std::string& text, Eigen::Index rows, Eigen::Index cols,
                            const std::string& key) {
    std::vector<double> v = parse_double_list(text, key);
    if (static_cast<Eigen::Index>(v.size()) != rows * cols)
        throw ConfigInvalid("key '" + key + "' expected " + std::to_string(rows * cols) +
                            " values, got " + std::to_string(v.size()));
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = v[static_cast<std::size_t>(i * cols + j)];
    return m;
}

} // namespace detail

inline const std::set<std::string> kModelKeys = {
    "d_x", "d_y", "seed", "block_size", "stability_margin",
    "A",   "C",   "R1",   "R2",         "m0",
    "P0",  "file"};

/// Writes a model as a [model] section with row-major hex-float entries, so
/// loading reproduces every stored double bit for bit.
inline void save_model(const Model& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigInvalid("cannot open for writing: " + path);
    out << "[model]\n";
    out << "d_x = " << m.d_x << "\n";
    out << "d_y = " << m.d_y << "\n";
    out << "seed = " << m.seed << "\n";
    out << "A = " << detail::encode_matrix(m.A) << "\n";
    out << "C = " << detail::encode_matrix(m.C) << "\n";
    out << "R1 = " << detail::encode_matrix(m.R1) << "\n";
    out << "R2 = " << detail::encode_matrix(m.R2) << "\n";
    out << "m0 = " << detail::encode_matrix(m.m0) << "\n";
    out << "P0 = " << detail::encode_matrix(m.P0) << "\n";
}

/// Builds a model from a [model] section: explicit matrices when A is
/// present, otherwise the random generator keyed by d_x/d_y/seed.
inline Model model_from_ini(const IniFile& ini) {
    const IniFile::Section* s = ini.find("model");
    if (!s) throw ConfigInvalid("config has no [model] section");
    ini.require_known_keys("model", kModelKeys);

    auto get_int = [&](const std::string& key, long fallback, bool required = false) -> long {
        const std::string* v = ini.get("model", key);
        if (!v) {
            if (required) throw ConfigInvalid("[model] missing required key '" + key + "'");
            return fallback;
        }
        return std::strtol(v->c_str(), nullptr, 10);
    };

    if (const std::string* file = ini.get("model", "file")) return model_from_ini(IniFile::load(*file));

    if (ini.get("model", "A")) {
        const long d_x = get_int("d_x", 0, true);
        const long d_y = get_int("d_y", 0, true);
        auto req = [&](const char* key) -> const std::string& {
            const std::string* v = ini.get("model", key);
            if (!v) throw ConfigInvalid(std::string("[model] missing required key '") + key + "'");
            return *v;
        };
        Matrix A = detail::decode_matrix(req("A"), d_x, d_x, "A");
        Matrix C = detail::decode_matrix(req("C"), d_y, d_x, "C");
        Matrix R1 = detail::decode_matrix(req("R1"), d_x, d_x, "R1");
        Matrix R2 = detail::decode_matrix(req("R2"), d_y, d_y, "R2");
        Matrix m0m = detail::decode_matrix(req("m0"), d_x, 1, "m0");
        Matrix P0 = detail::decode_matrix(req("P0"), d_x, d_x, "P0");
        return Model::create(std::move(A), std::move(C), std::move(R1), std::move(R2),
                             Vector(m0m.col(0)), std::move(P0),
                             static_cast<std::uint64_t>(get_int("seed", 0)));
    }

    ModelGenSpec spec;
    spec.d_x = static_cast<int>(get_int("d_x", 0, true));
    spec.d_y = static_cast<int>(get_int("d_y", spec.d_x));
    spec.seed = static_cast<std::uint64_t>(get_int("seed", 0));
    spec.block_size = static_cast<int>(get_int("block_size", 10));
    if (const std::string* v = ini.get("model", "stability_margin"))
        spec.stability_margin = std::strtod(v->c_str(), nullptr);
    return make_ou_model(spec);
}

inline Model load_model(const std::string& path) { return model_from_ini(IniFile::load(path)); }

} // namespace enkbf
