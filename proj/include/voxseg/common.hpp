#ifndef VOXSEG_COMMON_HPP
#define VOXSEG_COMMON_HPP

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace voxseg {

// Large tensor and conv-scratch buffers are allocated and freed at high rate;
// without this, glibc serves them via mmap/munmap and every reuse repays page
// faults. Keeping big blocks on the heap free-list roughly doubles conv
// throughput.
struct MallocTuning {
  MallocTuning() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  }
};
inline MallocTuning malloc_tuning_init{};

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

// Error categories map onto CLI exit codes: Config -> 1, Data -> 2, Numeric -> 3.
// Shape violations are configuration-class errors (incompatible model/tensor setup).
enum class ErrorKind { Config, Shape, Data, Numeric };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

inline void check(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

}  // namespace voxseg

#endif  // VOXSEG_COMMON_HPP
