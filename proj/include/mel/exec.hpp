#pragma once

#include <exception>
#include <mutex>

namespace mel {

// Kernels take an execution policy. Serial is the reference path; Parallel
// fans out with OpenMP and reduces in the same fixed order, so both produce
// bit-identical results.
enum class Exec { Serial, Parallel };

// Exceptions must not cross an OpenMP region boundary. Capture the first one
// inside the region and rethrow after it.
class ExceptionSlot {
public:
    template <class F>
    void run(F&& f) noexcept {
        try {
            f();
        } catch (...) {
            std::lock_guard<std::mutex> lock(mu_);
            if (!first_) first_ = std::current_exception();
        }
    }
    void rethrow() {
        if (first_) std::rethrow_exception(first_);
    }

private:
    std::mutex mu_;
    std::exception_ptr first_;
};

}  // namespace mel
