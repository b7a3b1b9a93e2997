#ifndef FEDMEM_CSV_HPP
#define FEDMEM_CSV_HPP

// Minimal CSV emission with deterministic number formatting (shortest
// round-trip via std::to_chars), so byte-identical reruns fall out of
// value-identical results.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "fedmem/errors.hpp"

namespace fedmem::csv {

inline std::string format(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc()) throw Error("number formatting failed");
    return std::string(buf, ptr);
}

inline std::string format(int v) { return std::to_string(v); }
inline std::string format(unsigned long v) { return std::to_string(v); }
inline std::string format(unsigned long long v) { return std::to_string(v); }
inline std::string format(const std::string& v) { return v; }
inline std::string format(const char* v) { return v; }

class Writer {
public:
    Writer(const std::string& path, const std::vector<std::string>& header) : out_(path) {
        if (!out_) throw ConfigError("cannot open " + path + " for writing");
        write_row(header);
    }

    template <typename... Fields>
    void row(const Fields&... fields) {
        std::vector<std::string> cells{format(fields)...};
        write_row(cells);
    }

private:
    void write_row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i > 0) out_ << ',';
            out_ << cells[i];
        }
        out_ << '\n';
    }

    std::ofstream out_;
};

} // namespace fedmem::csv

#endif
