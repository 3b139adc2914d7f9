#pragma once

#include "rrn/model.hpp"
#include "rrn/voldata.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <unistd.h>

namespace rrn::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("rrn_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    [[nodiscard]] const std::filesystem::path& path() const { return path_; }
    [[nodiscard]] std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

  private:
    std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    f << text;
}

template <typename T>
Tensor<T> random_tensor(int c, Grid3 g, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    net::SplitMix64 rng(seed);
    Tensor<T> t(c, g);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(lo + (hi - lo) * rng.uniform());
    return t;
}

inline Volume random_volume(Grid3 g, std::uint64_t seed, float lo = 0.0f, float hi = 1.0f) {
    net::SplitMix64 rng(seed);
    std::vector<float> v(g.voxels());
    for (auto& x : v) x = static_cast<float>(lo + (hi - lo) * rng.uniform());
    return Volume(g, {1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}, Units::normalized, std::move(v));
}

inline Volume volume_from(Grid3 g, const std::function<float(int, int, int)>& fn, Units units = Units::normalized) {
    Volume v(g, units);
    for (int z = 0; z < g.d; ++z)
        for (int y = 0; y < g.h; ++y)
            for (int x = 0; x < g.w; ++x) v.at(z, y, x) = fn(z, y, x);
    return v;
}

template <typename A, typename B>
bool same_bytes(const std::vector<A>& a, const std::vector<B>& b) {
    return a.size() * sizeof(A) == b.size() * sizeof(B) && std::memcmp(a.data(), b.data(), a.size() * sizeof(A)) == 0;
}

}  // namespace rrn::testing
