#include "rrn/textio.hpp"

#include "rrn/tensor.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace rrn::io {

void atomic_write(const std::filesystem::path& path, std::string_view bytes) {
    auto tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ValidationError("cannot open for writing: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            throw ValidationError("write failed: " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw ValidationError("cannot rename into place: " + path.string());
    }
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

KeyValues KeyValues::parse(std::string_view text, const std::string& source) {
    KeyValues kv;
    kv.source_ = source;
    std::size_t lineno = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        ++lineno;
        auto line = trim(text.substr(pos, nl - pos));
        pos = nl + 1;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ValidationError(source + ":" + std::to_string(lineno) + ": expected `key = value`");
        }
        auto key = trim(std::string_view(line).substr(0, eq));
        auto value = trim(std::string_view(line).substr(eq + 1));
        if (key.empty()) throw ValidationError(source + ":" + std::to_string(lineno) + ": empty key");
        if (kv.has(key)) throw ValidationError(source + ": duplicate key `" + key + "`");
        kv.set(key, value);
    }
    return kv;
}

const std::string& KeyValues::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ValidationError(source_ + ": missing key `" + key + "`");
    return it->second;
}

std::string KeyValues::get_or(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

void KeyValues::set(const std::string& key, std::string value) {
    if (values_.count(key) == 0) order_.push_back(key);
    values_[key] = std::move(value);
}

std::string KeyValues::render() const {
    std::string out;
    for (const auto& k : order_) out += k + " = " + values_.at(k) + "\n";
    return out;
}

template <typename V>
static std::vector<V> parse_list(const std::string& text, std::size_t expected, const std::string& what) {
    std::vector<V> out;
    std::istringstream ss(text);
    std::string tok;
    while (ss >> tok) {
        V v{};
        const char* end = tok.data() + tok.size();
        auto res = std::from_chars(tok.data(), end, v);
        if (res.ec != std::errc() || res.ptr != end) throw ValidationError(what + ": cannot parse `" + tok + "`");
        out.push_back(v);
    }
    if (expected != 0 && out.size() != expected) {
        throw ValidationError(what + ": expected " + std::to_string(expected) + " values, got " + std::to_string(out.size()));
    }
    return out;
}

std::vector<double> parse_reals(const std::string& text, std::size_t expected, const std::string& what) {
    return parse_list<double>(text, expected, what);
}

std::vector<int> parse_ints(const std::string& text, std::size_t expected, const std::string& what) {
    return parse_list<int>(text, expected, what);
}

std::string fmt_real(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace rrn::io
