#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace upgd::csv {

/// Shortest form is not used on purpose: 17 significant digits round-trip
/// every double and keep outputs byte-stable.
[[nodiscard]] std::string format(double value);
[[nodiscard]] std::string format(std::optional<double> value);

[[nodiscard]] std::optional<double> parse_optional(const std::string& field);

class Writer {
public:
    Writer(const std::filesystem::path& path, const std::vector<std::string>& header);

    void row(const std::vector<std::string>& fields);

private:
    std::ofstream out_;
    std::size_t width_;
};

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    /// Index of a header column; throws if missing.
    [[nodiscard]] std::size_t column(const std::string& name) const;
};

[[nodiscard]] Table read(const std::filesystem::path& path);

}  // namespace upgd::csv
