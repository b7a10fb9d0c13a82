#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <exception>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ccnn {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using MatrixF = Eigen::MatrixXf;

// Error hierarchy. The CLI maps these onto exit codes, so keep the split
// between configuration, data and numerical failures intact.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ChecksumError : DataError {
  using DataError::DataError;
};

struct UnsupportedVersionError : DataError {
  using DataError::DataError;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

namespace detail {

inline unsigned& thread_cap() {
  static unsigned cap = 1;
  return cap;
}

}  // namespace detail

using LogSink = std::function<void(const std::string&)>;

/// Diagnostic messages (rank ties, degenerate patches) go to this sink; none by default.
inline LogSink& log_sink() {
  static LogSink sink;
  return sink;
}

inline void log_message(const std::string& msg) {
  if (const auto& sink = log_sink()) sink(msg);
}

/// Caps the worker count used by batch featurization and layer forwarding.
inline void set_num_threads(unsigned n) { detail::thread_cap() = std::max(1u, n); }
inline unsigned num_threads() { return detail::thread_cap(); }

/// Runs fn(i) for i in [0, n). Each index is written by exactly one worker, so
/// results do not depend on the thread count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(num_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t lo = w * chunk;
      const std::size_t hi = std::min(n, lo + chunk);
      if (lo >= hi) break;
      pool.emplace_back([lo, hi, w, &fn, &errors] {
        try {
          for (std::size_t i = lo; i < hi; ++i) fn(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace ccnn
