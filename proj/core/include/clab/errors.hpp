#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace clab {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input outside an operation's mathematical domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A higher-is-better score at or below 4/5 of its random-chance floor.
class BelowRandomFloor : public DomainError {
 public:
  using DomainError::DomainError;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed weights file. Carries the byte offset where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Malformed text input. Line numbers are 1-based; 0 means "whole file".
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class SourceError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace clab
