#include "hcvt/common.hpp"

#include <cstdlib>
#include <cstring>
#include <mutex>
#include <thread>

namespace hcvt {

namespace logging {

Level threshold() {
    static Level cached = [] {
        const char* env = std::getenv("HCVT_LOG");
        if (!env) return Level::info;
        if (std::strcmp(env, "debug") == 0) return Level::debug;
        if (std::strcmp(env, "warn") == 0) return Level::warn;
        if (std::strcmp(env, "error") == 0) return Level::error;
        return Level::info;
    }();
    return cached;
}

void emit(Level lv, const std::string& msg) {
    if (lv < threshold()) return;
    static const char* names[] = {"debug", "info", "warn", "error"};
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    std::fprintf(stderr, "[hcvt:%s] %s\n", names[int(lv)], msg.c_str());
}

}  // namespace logging

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

int worker_threads() {
    const char* env = std::getenv("HCVT_THREADS");
    if (env) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int(hw);
}

}  // namespace hcvt
