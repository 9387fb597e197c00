#pragma once

#include <stdexcept>
#include <string>

namespace v2f {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define V2F_DEFINE_ERROR(Name)            \
  class Name : public Error {             \
   public:                                \
    using Error::Error;                   \
  }

V2F_DEFINE_ERROR(DegenerateBox);
V2F_DEFINE_ERROR(ShapeMismatch);
V2F_DEFINE_ERROR(ParseError);
V2F_DEFINE_ERROR(GeometryError);
V2F_DEFINE_ERROR(SpecInfeasible);
V2F_DEFINE_ERROR(MissingBox);
V2F_DEFINE_ERROR(EmptyBatch);
V2F_DEFINE_ERROR(DivergedLoss);
V2F_DEFINE_ERROR(ConfigError);
V2F_DEFINE_ERROR(IoError);

#undef V2F_DEFINE_ERROR

}  // namespace v2f
