// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "talora/numerics/tensor.hpp"

namespace talora::test {

inline num::Tensor randn(num::Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> data(num::shape_numel(shape));
    for (double& x : data) x = dist(rng);
    return num::Tensor(std::move(shape), std::move(data));
}

inline num::Tensor param(num::Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
    num::Tensor t = randn(std::move(shape), rng, stddev);
    t.set_requires_grad(true);
    return t;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("talora-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
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

private:
    std::filesystem::path path_;
};

}  // namespace talora::test
