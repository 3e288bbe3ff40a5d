#include "mmrg/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mmrg/error.hpp"

namespace mmrg {

namespace {

constexpr char magic[4] = {'M', 'M', 'R', 'G'};
constexpr size_t fixed_header = 4 + 4 + 8;

uint64_t align_up(uint64_t v) {
    return (v + container_alignment - 1) / container_alignment * container_alignment;
}

template <class U>
void put_le(std::string& out, U v) {
    for (size_t i = 0; i < sizeof(U); ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

template <class U>
U get_le(std::string_view in, size_t pos) {
    U v = 0;
    for (size_t i = 0; i < sizeof(U); ++i) {
        v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    }
    return v;
}

bool valid_name(const std::string& name) {
    if (name.empty() || name[0] == '#') {
        return false;
    }
    return std::all_of(name.begin(), name.end(), [](char c) {
        auto u = static_cast<unsigned char>(c);
        return u >= 0x20 && u < 0x7f;
    });
}

bool valid_meta_text(const std::string& s) {
    return s.find_first_of("\t\n\r") == std::string::npos;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    size_t start = 0;
    while (true) {
        size_t pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            out.push_back(s.substr(start));
            return out;
        }
        out.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
}

template <class I>
I parse_int(std::string_view s, const char* what) {
    I v{};
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
        throw format_error(std::string("malformed ") + what + " '" + std::string(s) + "'");
    }
    return v;
}

struct index_record {
    std::string name;
    shape_t shape;
    uint64_t offset = 0;
    uint64_t length = 0;
};

} // namespace

int64_t shape_numel(const shape_t& shape) {
    int64_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_to_string(const shape_t& shape) {
    std::string s;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            s += ',';
        }
        s += std::to_string(shape[i]);
    }
    return s;
}

const tensor& tensor_map::at(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) {
        throw format_error("tensor '" + name + "' not found");
    }
    return it->second;
}

std::string tensor_map::stage() const {
    auto it = meta.find("stage");
    return it == meta.end() ? std::string() : it->second;
}

size_t tensor_map::param_count() const {
    size_t n = 0;
    for (const auto& [_, t] : entries) {
        n += t.numel();
    }
    return n;
}

void validate_tensor_map(const tensor_map& map) {
    for (const auto& [name, t] : map.entries) {
        if (!valid_name(name)) {
            throw format_error("invalid tensor name '" + name + "'");
        }
        if (t.shape.empty()) {
            throw format_error("tensor '" + name + "' has empty shape");
        }
        for (auto d : t.shape) {
            if (d <= 0) {
                throw format_error("tensor '" + name + "' has non-positive dimension");
            }
        }
        if (static_cast<int64_t>(t.data.size()) != shape_numel(t.shape)) {
            throw format_error("tensor '" + name + "' data length " + std::to_string(t.data.size()) +
                               " does not match shape [" + shape_to_string(t.shape) + "]");
        }
        for (float v : t.data) {
            if (!std::isfinite(v)) {
                throw format_error("tensor '" + name + "' contains a non-finite value");
            }
        }
    }
    for (const auto& [k, v] : map.meta) {
        if (k.empty() || !valid_meta_text(k) || !valid_meta_text(v)) {
            throw format_error("meta entry '" + k + "' contains tab or newline");
        }
    }
}

std::string encode_container(const tensor_map& map) {
    validate_tensor_map(map);

    std::string index;
    uint64_t offset = 0;
    for (const auto& [name, t] : map.entries) {
        const uint64_t length = t.numel() * sizeof(float);
        index += name;
        index += "\tf32\t";
        index += shape_to_string(t.shape);
        index += '\t';
        index += std::to_string(offset);
        index += '\t';
        index += std::to_string(length);
        index += '\n';
        offset = align_up(offset + length);
    }
    for (const auto& [k, v] : map.meta) {
        index += "#meta\t" + k + "\t" + v + "\n";
    }

    std::string out;
    out.append(magic, sizeof(magic));
    put_le<uint32_t>(out, container_version);
    put_le<uint64_t>(out, index.size());
    out += index;
    out.resize(align_up(out.size()), '\0');
    const size_t data_start = out.size();

    for (const auto& [name, t] : map.entries) {
        out.resize(align_up(out.size() - data_start) + data_start, '\0');
        for (float v : t.data) {
            put_le<uint32_t>(out, std::bit_cast<uint32_t>(v));
        }
    }
    return out;
}

tensor_map decode_container(std::string_view bytes) {
    if (bytes.size() < fixed_header || std::memcmp(bytes.data(), magic, sizeof(magic)) != 0) {
        throw format_error("bad magic: not an MMRG container");
    }
    const auto version = get_le<uint32_t>(bytes, 4);
    if (version != container_version) {
        throw format_error("unsupported container version " + std::to_string(version));
    }
    const auto index_len = get_le<uint64_t>(bytes, 8);
    if (index_len > bytes.size() - fixed_header) {
        throw format_error("index length exceeds file size");
    }
    std::string_view index = bytes.substr(fixed_header, index_len);
    const uint64_t data_start = align_up(fixed_header + index_len);

    tensor_map map;
    std::vector<index_record> records;
    std::set<std::string> seen;
    size_t line_no = 0;
    for (auto line : split(index, '\n')) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        auto fields = split(line, '\t');
        if (fields[0] == "#meta") {
            if (fields.size() != 3) {
                throw format_error("malformed meta line " + std::to_string(line_no));
            }
            if (!map.meta.emplace(std::string(fields[1]), std::string(fields[2])).second) {
                throw format_error("duplicate meta key '" + std::string(fields[1]) + "'");
            }
            continue;
        }
        if (fields.size() != 5) {
            throw format_error("malformed index line " + std::to_string(line_no));
        }
        index_record rec;
        rec.name = std::string(fields[0]);
        if (!valid_name(rec.name)) {
            throw format_error("invalid tensor name in index line " + std::to_string(line_no));
        }
        if (!seen.insert(rec.name).second) {
            throw format_error("duplicate tensor name '" + rec.name + "' in index");
        }
        if (fields[1] != "f32") {
            throw format_error("unsupported dtype '" + std::string(fields[1]) + "'");
        }
        for (auto dim : split(fields[2], ',')) {
            auto d = parse_int<int64_t>(dim, "dimension");
            if (d <= 0) {
                throw format_error("non-positive dimension for '" + rec.name + "'");
            }
            rec.shape.push_back(d);
        }
        rec.offset = parse_int<uint64_t>(fields[3], "offset");
        rec.length = parse_int<uint64_t>(fields[4], "length");
        if (rec.offset % container_alignment != 0) {
            throw format_error("misaligned payload offset for '" + rec.name + "'");
        }
        if (rec.length != static_cast<uint64_t>(shape_numel(rec.shape)) * sizeof(float)) {
            throw format_error("shape/length mismatch for '" + rec.name + "'");
        }
        records.push_back(std::move(rec));
    }

    const uint64_t payload_size = bytes.size() > data_start ? bytes.size() - data_start : 0;
    for (const auto& rec : records) {
        if (rec.offset + rec.length > payload_size) {
            throw format_error("payload shorter than index");
        }
        tensor t(rec.shape);
        const size_t base = data_start + rec.offset;
        for (size_t i = 0; i < t.data.size(); ++i) {
            float v = std::bit_cast<float>(get_le<uint32_t>(bytes, base + 4 * i));
            if (!std::isfinite(v)) {
                throw format_error("non-finite value in payload of '" + rec.name + "'");
            }
            t.data[i] = v;
        }
        map.entries.emplace(rec.name, std::move(t));
    }
    return map;
}

void write_container(const tensor_map& map, const std::filesystem::path& path) {
    const std::string bytes = encode_container(map);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw error("cannot open '" + path.string() + "' for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw error("write to '" + path.string() + "' failed");
    }
}

tensor_map read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw missing_artifact("cannot open '" + path.string() + "'");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return decode_container(ss.str());
    } catch (const format_error& e) {
        throw format_error(path.string() + ": " + e.what());
    }
}

namespace {
void check_stage(const tensor_map& map) {
    auto stage = map.stage();
    if (!checkpoint_stages.count(stage)) {
        throw format_error("checkpoint meta 'stage' is missing or invalid ('" + stage + "')");
    }
}
} // namespace

void save_checkpoint(const tensor_map& map, const std::filesystem::path& path) {
    check_stage(map);
    write_container(map, path);
}

tensor_map load_checkpoint(const std::filesystem::path& path) {
    auto map = read_container(path);
    check_stage(map);
    return map;
}

param_partition validate_compatibility(const tensor_map& sft, const tensor_map& pre) {
    param_partition part;
    for (const auto& [name, t] : pre.entries) {
        auto it = sft.entries.find(name);
        if (it == sft.entries.end()) {
            throw format_error("pretrained tensor '" + name + "' is missing from the fine-tuned map");
        }
        if (it->second.shape != t.shape) {
            throw format_error("shape mismatch for '" + name + "': [" + shape_to_string(it->second.shape) +
                               "] vs [" + shape_to_string(t.shape) + "]");
        }
        part.shared_names.insert(name);
    }
    for (const auto& [name, _] : sft.entries) {
        if (!pre.contains(name)) {
            part.adapter_names.insert(name);
        }
    }
    return part;
}

} // namespace mmrg
