#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace rrn::io {

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// reader never observes a partially written file.
void atomic_write(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

/// Ordered `key = value` records. Blank lines and `#` comments are skipped.
/// Duplicate keys are rejected.
class KeyValues {
  public:
    static KeyValues parse(std::string_view text, const std::string& source = "<text>");

    [[nodiscard]] bool has(const std::string& key) const { return values_.count(key) != 0; }
    [[nodiscard]] const std::string& get(const std::string& key) const;
    [[nodiscard]] std::string get_or(const std::string& key, const std::string& fallback) const;
    void set(const std::string& key, std::string value);
    [[nodiscard]] const std::vector<std::string>& keys() const { return order_; }
    [[nodiscard]] std::string render() const;

  private:
    std::string source_;
    std::map<std::string, std::string> values_;
    std::vector<std::string> order_;
};

std::vector<double> parse_reals(const std::string& text, std::size_t expected, const std::string& what);
std::vector<int> parse_ints(const std::string& text, std::size_t expected, const std::string& what);
std::string trim(std::string_view s);

/// Shortest round-trippable decimal rendering.
std::string fmt_real(double v);

}  // namespace rrn::io
