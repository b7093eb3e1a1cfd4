#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace loraview {

/// Root of every error thrown by the library. The `what()` text is prefixed
/// with a short category tag so CLI users can grep for it.
class Error : public std::runtime_error {
public:
    Error(const std::string& category, const std::string& message)
        : std::runtime_error(category + ": " + message) {}
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& m) : Error("shape error", m) {}
};

class ParameterError : public Error {
public:
    explicit ParameterError(const std::string& m) : Error("parameter error", m) {}
};

class ContractError : public Error {
public:
    explicit ContractError(const std::string& m) : Error("contract error", m) {}
};

class DivergenceError : public Error {
public:
    explicit DivergenceError(const std::string& m) : Error("training divergence", m) {}
};

class KeyError : public Error {
public:
    explicit KeyError(const std::string& m) : Error("key error", m) {}
};

class ProtocolError : public Error {
public:
    explicit ProtocolError(const std::string& m) : Error("protocol error", m) {}
};

class TokenError : public Error {
public:
    explicit TokenError(const std::string& m) : Error("token error", m) {}
};

class MetricError : public Error {
public:
    explicit MetricError(const std::string& m) : Error("metric error", m) {}
};

/// Malformed container file. `offset()` is the byte position where parsing
/// gave up.
class FormatError : public Error {
public:
    FormatError(const std::string& m, std::uint64_t offset)
        : Error("format error", m + " (at byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}
    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

}  // namespace loraview
