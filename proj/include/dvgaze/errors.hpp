#pragma once

#include <stdexcept>
#include <string>

namespace dvgaze {

// Two viewing rays are (near) parallel, a reference point sits at or behind
// the camera, or a homography cannot be inverted.
class DegenerateGeometryError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// The two world-frame gazes cancel and their mean has no direction.
class UndefinedAverageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Invalid configuration value. `key_path()` names the offending entry, e.g.
// "model.stage_channels[2]".
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key_path, const std::string& what)
        : std::runtime_error(key_path.empty() ? what : key_path + ": " + what),
          key_path_(std::move(key_path)) {}

    const std::string& key_path() const noexcept { return key_path_; }

private:
    std::string key_path_;
};

// Corrupt, truncated or version-mismatched file.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace dvgaze
