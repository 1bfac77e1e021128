#pragma once

#include <stdexcept>
#include <string>

namespace bibldr {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error { public: using Error::Error; };
class MaskingError : public Error { public: using Error::Error; };
class BatchSizeError : public Error { public: using Error::Error; };
class ValidationError : public Error { public: using Error::Error; };
class ContractError : public Error { public: using Error::Error; };
class DivergenceError : public Error { public: using Error::Error; };
class RangeError : public Error { public: using Error::Error; };
class LoadError : public Error { public: using Error::Error; };
class SplitError : public Error { public: using Error::Error; };
class MetricUndefinedError : public Error { public: using Error::Error; };
class DegeneratePrototypeError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class CheckpointError : public Error { public: using Error::Error; };

}  // namespace bibldr
