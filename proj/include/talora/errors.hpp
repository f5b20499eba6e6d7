// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace talora {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    /// Short machine-readable category, used by the CLI error line.
    virtual const char* code() const noexcept { return "error"; }
};

#define TALORA_DEFINE_ERROR(Name, Code)                                   \
    class Name : public Error {                                           \
    public:                                                               \
        using Error::Error;                                               \
        const char* code() const noexcept override { return Code; }       \
    }

TALORA_DEFINE_ERROR(DimensionError, "dimension");
TALORA_DEFINE_ERROR(ArgumentError, "argument");
TALORA_DEFINE_ERROR(StateError, "state");
TALORA_DEFINE_ERROR(EvaluationError, "evaluation");
TALORA_DEFINE_ERROR(TrainingError, "training");
TALORA_DEFINE_ERROR(ParseError, "parse");
TALORA_DEFINE_ERROR(StageOrderError, "stage_order");
TALORA_DEFINE_ERROR(MissingFileError, "missing_file");
TALORA_DEFINE_ERROR(IoError, "io");

#undef TALORA_DEFINE_ERROR

/// Malformed checkpoint bytes. Carries the offset at which decoding failed.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    const char* code() const noexcept override { return "format"; }
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class UnsupportedVersionError : public Error {
public:
    explicit UnsupportedVersionError(std::uint32_t version)
        : Error("unsupported checkpoint version " + std::to_string(version)), version_(version) {}
    const char* code() const noexcept override { return "unsupported_version"; }
    std::uint32_t version() const noexcept { return version_; }

private:
    std::uint32_t version_;
};

}  // namespace talora
