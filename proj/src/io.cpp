#include "mmae/io.hpp"

#include <filesystem>
#include <fstream>

#include "mmae/tensor.hpp"

namespace mmae {

void write_file_atomic(const std::string& path, const std::function<void(std::ostream&)>& writer) {
    const std::filesystem::path target(path);
    std::filesystem::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
        writer(out);
        out.flush();
        if (!out) throw DataError("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, target, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw DataError("rename to " + path + " failed: " + ec.message());
    }
}

}  // namespace mmae
