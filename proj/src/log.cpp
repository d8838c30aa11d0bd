#include "scops/log.hpp"

#include <iostream>
#include <mutex>

namespace scops {

namespace {

std::mutex& sink_mutex() {
    static std::mutex m;
    return m;
}

LogSink& current_sink() {
    static LogSink sink = [](LogLevel level, const std::string& message) {
        const char* tag = level == LogLevel::info ? "info" : level == LogLevel::warning ? "warning" : "error";
        std::cerr << "[" << tag << "] " << message << '\n';
    };
    return sink;
}

} // namespace

LogSink set_log_sink(LogSink sink) {
    std::lock_guard lock(sink_mutex());
    LogSink previous = std::move(current_sink());
    current_sink() = std::move(sink);
    return previous;
}

void log_message(LogLevel level, const std::string& message) {
    std::lock_guard lock(sink_mutex());
    if (current_sink()) current_sink()(level, message);
}

} // namespace scops
