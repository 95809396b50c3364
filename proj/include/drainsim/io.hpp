#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace drainsim {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Format a double so that a read-back reproduces it exactly.
inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline double parse_double(std::string_view s, const std::string& context) {
    try {
        size_t pos = 0;
        double v = std::stod(std::string(s), &pos);
        if (pos == 0) throw std::invalid_argument("empty");
        return v;
    } catch (const std::exception&) {
        throw IoError("cannot parse number '" + std::string(s) + "' in " + context);
    }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline std::string slurp_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write file: " + path);
    out << content;
}

/// Read a CSV file into rows of fields. The first line must be a header.
inline std::vector<std::vector<std::string>> read_csv(const std::string& path,
                                                      std::vector<std::string>* header = nullptr) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw IoError("missing header line in " + path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (header) *header = split_csv_line(line);
    std::vector<std::vector<std::string>> rows;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        rows.push_back(split_csv_line(line));
    }
    return rows;
}

// FNV-1a, used for input provenance fingerprints. Stable across runs and platforms.
inline uint64_t fnv1a64(std::string_view data, uint64_t seed = 14695981039346656037ULL) {
    uint64_t h = seed;
    for (unsigned char c : data) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string file_hash(const std::string& path) {
    return hex64(fnv1a64(slurp_file(path)));
}

}  // namespace drainsim
