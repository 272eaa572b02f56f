#pragma once

#include <stdexcept>
#include <string>

namespace microexp {

// Every failure the library reports derives from Error so callers (the CLI in
// particular) can map it to a category without string matching.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& what) : Error("dimension", what) {}
};
struct ValidationError : Error {
    explicit ValidationError(const std::string& what) : Error("validation", what) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error("numeric", what) {}
};
struct FormatError : Error {
    explicit FormatError(const std::string& what) : Error("format", what) {}
};
struct IoError : Error {
    explicit IoError(const std::string& what) : Error("io", what) {}
};
struct CoverageError : Error {
    explicit CoverageError(const std::string& what) : Error("coverage", what) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error("config", what) {}
};

}  // namespace microexp
