#pragma once

#include <string>

#include "diffret/errors.hpp"

namespace diffret {

enum class TaskMode { Category, Finegrained };

inline std::string to_string(TaskMode t) {
    return t == TaskMode::Category ? "category" : "finegrained";
}

inline TaskMode task_from_string(const std::string& s) {
    if (s == "category") return TaskMode::Category;
    if (s == "finegrained") return TaskMode::Finegrained;
    throw ConfigError("unknown task: " + s);
}

enum class TextMode { Learned, ClassTemplate, Caption };

inline std::string to_string(TextMode m) {
    switch (m) {
        case TextMode::Learned: return "learned";
        case TextMode::ClassTemplate: return "class_template";
        default: return "caption";
    }
}

inline TextMode text_mode_from_string(const std::string& s) {
    if (s == "learned") return TextMode::Learned;
    if (s == "class_template") return TextMode::ClassTemplate;
    if (s == "caption") return TextMode::Caption;
    throw ConfigError("unknown text mode: " + s);
}

}  // namespace diffret
