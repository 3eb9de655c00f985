// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ebkit {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor extents disagree with an operation's contract.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A token id, target class, or element index is out of range.
class IndexError : public Error {
public:
    using Error::Error;
};

// A numeric argument is outside its admissible domain (e.g. p not in [0,1]).
class DomainError : public Error {
public:
    using Error::Error;
};

// An operation's precondition was violated (e.g. backward on a non-scalar).
class ContractError : public Error {
public:
    using Error::Error;
};

// A NaN or Inf was produced where only finite values are allowed.
class NumericsError : public Error {
public:
    using Error::Error;
};

// Training produced a non-finite loss; the run aborts with a report.
class DivergenceError : public Error {
public:
    explicit DivergenceError(const std::string& msg, int epoch_in = 0)
        : Error(msg), epoch(epoch_in) {}
    int epoch;
};

// Invalid model or experiment configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Dataset construction or ingestion failed.
class DataError : public Error {
public:
    using Error::Error;
};

// A serialized file does not match its declared layout.
class FormatError : public Error {
public:
    using Error::Error;
};

// A prune mask does not match the model it is applied to.
class MaskError : public Error {
public:
    using Error::Error;
};

// Detector observations arrived out of order.
class SequencingError : public Error {
public:
    using Error::Error;
};

// Filesystem problems (missing file, failed rename).
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace ebkit
