#include "mel/checkpoint.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "mel/error.hpp"

namespace mel {
namespace {

constexpr const char* kMagic = "MELCKPT";

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

void put_section(std::ostringstream& out, const char* name, const std::string& body) {
    out << "section " << name << ' ' << body.size() << '\n' << body << '\n';
}

struct Reader {
    std::string_view data;
    std::size_t pos = 0;

    std::string_view line() {
        const auto nl = data.find('\n', pos);
        if (nl == std::string_view::npos) throw CheckpointError("checkpoint truncated");
        auto l = data.substr(pos, nl - pos);
        pos = nl + 1;
        return l;
    }

    std::uint64_t number_after(std::string_view l, std::string_view prefix) {
        if (l.substr(0, prefix.size()) != prefix) throw CheckpointError("checkpoint: expected '" + std::string(prefix) + "'");
        std::uint64_t v = 0;
        const auto rest = l.substr(prefix.size());
        auto [p, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), v);
        if (ec != std::errc() || p != rest.data() + rest.size())
            throw CheckpointError("checkpoint: bad number in '" + std::string(l) + "'");
        return v;
    }

    std::string section(std::string_view name) {
        const std::string prefix = "section " + std::string(name) + " ";
        const auto n = number_after(line(), prefix);
        if (pos + n + 1 > data.size()) throw CheckpointError("checkpoint truncated in section " + std::string(name));
        std::string body(data.substr(pos, n));
        pos += n;
        if (data[pos] != '\n') throw CheckpointError("checkpoint: section " + std::string(name) + " is malformed");
        ++pos;
        return body;
    }
};

}  // namespace

std::string serialize_checkpoint(const TrainState& state) {
    std::ostringstream out;
    out << kMagic << ' ' << kCheckpointVersion << '\n';
    out << "step " << state.step << '\n';
    out << "seed " << state.seed << '\n';
    std::ostringstream params;
    save_params(params, state.params);
    put_section(out, "params", params.str());
    std::ostringstream snap;
    if (state.snapshot) save_params(snap, state.snapshot->params());
    put_section(out, "snapshot", snap.str());
    std::ostringstream pool;
    state.pool.save_jsonl(pool);
    put_section(out, "pool", pool.str());
    std::string body = out.str();
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a(body)));
    body += "checksum ";
    body += hex;
    body += '\n';
    return body;
}

TrainState parse_checkpoint(const std::string& bytes) {
    const auto cpos = bytes.rfind("checksum ");
    if (cpos == std::string::npos) throw CheckpointError("checkpoint has no checksum line (truncated?)");
    const std::string_view tail = std::string_view(bytes).substr(cpos + 9);
    if (tail.size() != 17 || tail.back() != '\n') throw CheckpointError("checkpoint checksum line is malformed");
    std::uint64_t stored = 0;
    auto [p, ec] = std::from_chars(tail.data(), tail.data() + 16, stored, 16);
    if (ec != std::errc() || p != tail.data() + 16) throw CheckpointError("checkpoint checksum line is malformed");
    const std::string_view body = std::string_view(bytes).substr(0, cpos);
    if (fnv1a(body) != stored) throw CheckpointError("checkpoint checksum mismatch (file corrupted)");

    Reader r{body};
    const auto header = r.line();
    const std::string magic = std::string(kMagic) + " ";
    if (header.substr(0, magic.size()) != magic) throw CheckpointError("not a checkpoint file");
    const auto version = r.number_after(header, magic);
    if (version != static_cast<std::uint64_t>(kCheckpointVersion))
        throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    TrainState s;
    s.step = r.number_after(r.line(), "step ");
    s.seed = r.number_after(r.line(), "seed ");
    try {
        std::istringstream params(r.section("params"));
        s.params = load_params(params);
        const std::string snap = r.section("snapshot");
        if (!snap.empty()) {
            std::istringstream in(snap);
            s.snapshot.emplace(load_params(in));
        }
        std::istringstream pool(r.section("pool"));
        s.pool = MetaExperiencePool::load_jsonl(pool);
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::runtime_error& e) {
        throw CheckpointError(std::string("checkpoint payload: ") + e.what());
    }
    if (r.pos != body.size()) throw CheckpointError("checkpoint has trailing data");
    return s;
}

void save_checkpoint(const std::string& path, const TrainState& state) {
    const std::string bytes = serialize_checkpoint(state);
    const std::filesystem::path target(path);
    if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot write " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw CheckpointError("write failed for " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, target, ec);
    if (ec) throw CheckpointError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

TrainState load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path);
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return parse_checkpoint(bytes);
    } catch (const CheckpointError& e) {
        throw CheckpointError(path + ": " + e.what());
    }
}

std::string checkpoint_path(const std::string& run_dir, std::uint64_t step) {
    return (std::filesystem::path(run_dir) / "checkpoints" / ("step-" + std::to_string(step))).string();
}

std::optional<std::uint64_t> latest_checkpoint(const std::string& run_dir) {
    const auto dir = std::filesystem::path(run_dir) / "checkpoints";
    std::error_code ec;
    if (!std::filesystem::is_directory(dir, ec)) return std::nullopt;
    std::optional<std::uint64_t> best;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("step-", 0) != 0) continue;
        std::uint64_t k = 0;
        auto [p, e] = std::from_chars(name.data() + 5, name.data() + name.size(), k);
        if (e != std::errc() || p != name.data() + name.size()) continue;
        if (!best || k > *best) best = k;
    }
    return best;
}

}  // namespace mel
