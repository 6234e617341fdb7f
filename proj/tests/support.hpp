#pragma once

// Shared fixtures for the unit suites: small grids, small datasets and
// temporary directories.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "chanest/chansim.hpp"
#include "chanest/grid.hpp"
#include "chanest/neuralnet.hpp"

namespace chanest::test {

// 16 x 6 grid with pilots on symbols 1 and 4, every second subcarrier.
inline GeneratorConfig small_config() {
    GeneratorConfig g;
    g.ofdm.n_sub = 16;
    g.ofdm.n_sym = 6;
    g.ofdm.nfft = 32;
    g.ofdm.pilot_symbol_indices = {1, 4};
    g.ofdm.pilot_subcarrier_stride = 2;
    return g;
}

inline Dataset small_dataset(std::size_t n, std::uint64_t seed) { return generate_dataset(n, small_config(), seed); }

inline RealGrid random_grid(std::size_t n_sub, std::size_t n_sym, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-scale, scale);
    std::vector<double> v(n_sub * n_sym * kPlanes);
    for (double& x : v) x = u(rng);
    return RealGrid(n_sub, n_sym, kPlanes, std::move(v));
}

// Fresh empty directory under the system temp path, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("chanest_" + tag + "_" + std::to_string(rd()));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace chanest::test
