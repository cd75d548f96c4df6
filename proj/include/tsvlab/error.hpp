#pragma once

#include <functional>
#include <iostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace tsvlab {

// Every failure carries a short machine-readable code (e.g. "single-class")
// next to the human-readable message. The CLI prints both on one line.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

using WarningSink = std::function<void(std::string_view)>;

inline WarningSink& warning_sink() {
    static WarningSink sink = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
    return sink;
}

inline void warn(std::string_view msg) {
    if (auto& sink = warning_sink()) {
        sink(msg);
    }
}

// Swaps the warning sink for the lifetime of the guard.
class ScopedWarningSink {
public:
    explicit ScopedWarningSink(WarningSink sink) : previous_(std::exchange(warning_sink(), std::move(sink))) {}
    ~ScopedWarningSink() { warning_sink() = std::move(previous_); }
    ScopedWarningSink(const ScopedWarningSink&) = delete;
    ScopedWarningSink& operator=(const ScopedWarningSink&) = delete;

private:
    WarningSink previous_;
};

}  // namespace tsvlab
