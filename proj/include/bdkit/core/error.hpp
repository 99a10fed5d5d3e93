// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bdkit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Structured-text config could not be parsed. `line()` is 1-based, 0 if unknown.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& what, std::size_t line)
      : Error("config parse error at line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// A value is outside its documented domain. `field()` names the offending field.
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& what)
      : Error("invalid " + field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class DatasetError : public Error {
 public:
  using Error::Error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class BatchTooSmallError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& stage, std::size_t epoch)
      : Error(stage + ": loss became non-finite at epoch " + std::to_string(epoch)), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

class AttackError : public Error {
 public:
  using Error::Error;
};

class InversionError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class StaleArtifactError : public Error {
 public:
  using Error::Error;
};

class ExperimentError : public Error {
 public:
  ExperimentError(std::string stage, std::string config_hash, const std::string& cause)
      : Error("stage '" + stage + "' failed for config " + config_hash + ": " + cause),
        stage_(std::move(stage)),
        config_hash_(std::move(config_hash)) {}
  const std::string& stage() const noexcept { return stage_; }
  const std::string& config_hash() const noexcept { return config_hash_; }

 private:
  std::string stage_;
  std::string config_hash_;
};

}  // namespace bdkit
