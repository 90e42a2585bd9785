#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mocl {

/// Caller broke a documented precondition (shape mismatch, bad config field, ...).
class ContractViolation : public std::logic_error {
 public:
    using std::logic_error::logic_error;
};

/// Mathematically undefined input (zero-vector cosine, all-pad sequence, ...).
class DomainError : public std::domain_error {
 public:
    using std::domain_error::domain_error;
};

/// An optimizer tried to write into a frozen parameter.
class FrozenWriteError : public std::runtime_error {
 public:
    using std::runtime_error::runtime_error;
};

class NonDeterminismError : public std::runtime_error {
 public:
    using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class NumericalError : public std::runtime_error {
 public:
    using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
    ParseError(const std::string& what, std::size_t line)
        : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line_(line) {}

    std::size_t line() const noexcept { return line_; }

 private:
    std::size_t line_;
};

namespace detail {

[[noreturn]] inline void contract_fail(const std::string& msg) { throw ContractViolation(msg); }

}  // namespace detail

#define MOCL_EXPECT(cond, msg)                          \
    do {                                                \
        if (!(cond)) ::mocl::detail::contract_fail(msg); \
    } while (0)

}  // namespace mocl
