#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

namespace slens::testing {

// real checkpoints live outside the repo; suites that need them skip when
// the directory is absent (see README "Desk-scale models")
inline std::string models_dir() {
    const char * env = std::getenv("SLENS_MODELS_DIR");
    return env ? env : "";
}

inline bool have_model(const std::string & name) {
    std::string dir = models_dir();
    if (dir.empty()) {
        return false;
    }
    return std::filesystem::exists(dir + "/" + name + "/model.safetensors");
}

inline std::string model_file(const std::string & name, const std::string & file) {
    return models_dir() + "/" + name + "/" + file;
}

inline std::string tmp_dir(const std::string & tag) {
    auto p = std::filesystem::temp_directory_path() / ("slens_test_" + tag);
    std::filesystem::create_directories(p);
    return p.string();
}

} // namespace slens::testing
