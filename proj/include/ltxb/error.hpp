#pragma once

#include <stdexcept>
#include <string>

namespace ltxb {

// Every failure the library can raise carries one of these kinds so the CLI
// can emit a machine-readable error record and tests can assert on category.
enum class ErrorKind {
  dimension,      // shape/rank mismatch between operands
  numeric,        // NaN/Inf where finite values are required
  contract,       // API misuse (backward on non-scalar, missing grad, ...)
  range,          // index or timestep outside its valid interval
  vocabulary,     // word not present in the vocabulary
  length,         // tokenized prompt exceeds the fixed token count
  template_id,    // template index outside the pool
  config,         // unparseable or unknown configuration key
  io,             // file missing/unreadable/unwritable
  corruption,     // stored hash does not match file bytes
  version,        // unsupported serialized format version
  not_found,      // named entry absent from a bank/registry
  compatibility,  // artifact produced by a different backbone/config
  planning,       // blend span resolution failed
  guidance,       // guidance requested without usable attention maps
  degenerate,     // zero-mass map, constant image, or similar
  training,       // training failed to converge within its budget
  oracle_quality, // presence oracle below its accuracy gate
  argument,       // bad command-line usage
};

const char* error_kind_name(ErrorKind k);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }
  const char* kind_name() const { return error_kind_name(kind_); }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

}  // namespace ltxb
