#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedrec {

// Precondition failed at a library boundary (shape mismatch, missing vector, ...).
class ContractViolation : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Input is well-formed but violates a domain constraint (rating range, negative variance).
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ParseError : public std::runtime_error {
public:
    ParseError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

// A federated round could not be completed (non-finite client update).
class RoundAborted : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const char* msg) {
    if (!cond) {
        throw ContractViolation(msg);
    }
}

} // namespace fedrec
