#include "upgd/csv.hpp"

#include "upgd/errors.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace upgd::csv {

std::string format(double value) {
    if (std::isnan(value)) {
        return "nan";
    }
    if (std::isinf(value)) {
        return value > 0 ? "inf" : "-inf";
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    return buf;
}

std::string format(std::optional<double> value) { return value ? format(*value) : std::string(); }

std::optional<double> parse_optional(const std::string& field) {
    if (field.empty()) {
        return std::nullopt;
    }
    return std::stod(field);
}

Writer::Writer(const std::filesystem::path& path, const std::vector<std::string>& header)
    : out_(path, std::ios::binary | std::ios::trunc), width_(header.size()) {
    if (!out_) {
        throw Error("cannot write " + path.string());
    }
    row(header);
}

void Writer::row(const std::vector<std::string>& fields) {
    if (fields.size() != width_) {
        throw Error("csv row has " + std::to_string(fields.size()) + " fields, header has " + std::to_string(width_));
    }
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i > 0) {
            out_ << ',';
        }
        out_ << fields[i];
    }
    out_ << '\n';
}

std::size_t Table::column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == name) {
            return i;
        }
    }
    throw Error("csv column '" + name + "' not found");
}

Table read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot read " + path.string());
    }
    Table table;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) {
            fields.push_back(field);
        }
        if (!line.empty() && line.back() == ',') {
            fields.emplace_back();
        }
        if (first) {
            table.header = std::move(fields);
            first = false;
        } else {
            table.rows.push_back(std::move(fields));
        }
    }
    return table;
}

}  // namespace upgd::csv
