// SPDX-License-Identifier: Apache-2.0
//
// Native checkpoint format: a directory holding `manifest.json` and
// `tensors.bin`. The manifest lists every record (sorted by name) with its
// dtype, shape, byte offset into the blob, byte length and SHA-256. Blob
// offsets are 8-byte aligned with zero padding between records; values are
// little-endian.

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"
#include "smerge/error.hpp"
#include "smerge/linalg.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace smerge {

enum class Dtype { F32, F64 };

inline std::size_t dtype_size(Dtype dt) { return dt == Dtype::F32 ? 4 : 8; }

inline std::string_view dtype_name(Dtype dt) { return dt == Dtype::F32 ? "f32" : "f64"; }

inline Dtype parse_dtype(std::string_view s, std::string_view tensor) {
    if (s == "f32" || s == "float32" || s == "F32") {
        return Dtype::F32;
    }
    if (s == "f64" || s == "float64" || s == "F64") {
        return Dtype::F64;
    }
    throw Error(ErrorCode::UnsupportedDtype,
                "tensor '" + std::string(tensor) + "' has unsupported dtype '" + std::string(s) + "'");
}

/// One named tensor. Values are kept as the raw little-endian bytes so that
/// save/load is bit-exact; arithmetic goes through to_doubles().
struct TensorRecord {
    std::string name;
    Dtype dtype = Dtype::F32;
    std::vector<std::uint64_t> shape;
    std::vector<std::uint8_t> bytes;

    std::size_t element_count() const {
        std::size_t n = 1;
        for (auto d : shape) {
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::vector<double> to_doubles() const {
        const std::size_t n = bytes.size() / dtype_size(dtype);
        std::vector<double> out(n);
        if (dtype == Dtype::F32) {
            for (std::size_t i = 0; i < n; ++i) {
                float f;
                std::memcpy(&f, bytes.data() + 4 * i, 4);
                out[i] = static_cast<double>(f);
            }
        } else {
            std::memcpy(out.data(), bytes.data(), 8 * n);
        }
        return out;
    }

    Matrix to_matrix() const {
        if (shape.size() != 2) {
            throw Error(ErrorCode::ShapeMismatch,
                        "tensor '" + name + "' is not 2-D (rank " + std::to_string(shape.size()) + ")");
        }
        try {
            return Matrix(shape[0], shape[1], to_doubles());
        } catch (const Error& e) {
            throw Error(e.code(), "tensor '" + name + "': " + e.detail());
        }
    }

    /// Stores `values` in `dtype`; f32 narrowing rounds to nearest-even.
    static TensorRecord from_values(std::string name, Dtype dtype, std::vector<std::uint64_t> shape,
                                    std::span<const double> values) {
        TensorRecord r{std::move(name), dtype, std::move(shape), {}};
        if (r.element_count() != values.size()) {
            throw Error(ErrorCode::ShapeMismatch, "tensor '" + r.name + "' shape does not match " +
                                                      std::to_string(values.size()) + " values");
        }
        r.bytes.resize(values.size() * dtype_size(dtype));
        if (dtype == Dtype::F32) {
            for (std::size_t i = 0; i < values.size(); ++i) {
                const float f = static_cast<float>(values[i]);
                std::memcpy(r.bytes.data() + 4 * i, &f, 4);
            }
        } else if (!values.empty()) {
            std::memcpy(r.bytes.data(), values.data(), 8 * values.size());
        }
        return r;
    }

    static TensorRecord from_matrix(std::string name, Dtype dtype, const Matrix& m) {
        return from_values(std::move(name), dtype, {m.rows(), m.cols()}, m.data());
    }

    friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

struct Checkpoint {
    std::map<std::string, TensorRecord> records;
    std::map<std::string, std::string> meta;

    void add(TensorRecord record) {
        const std::string key = record.name;
        if (!records.emplace(key, std::move(record)).second) {
            throw Error(ErrorCode::DuplicateName, "duplicate tensor name '" + key + "'");
        }
    }

    bool contains(const std::string& name) const { return records.count(name) != 0; }

    const TensorRecord& at(const std::string& name) const {
        auto it = records.find(name);
        if (it == records.end()) {
            throw Error(ErrorCode::MissingLayer, "tensor '" + name + "' not found");
        }
        return it->second;
    }

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr std::string_view kLoraASuffix = ".lora_A";
inline constexpr std::string_view kLoraBSuffix = ".lora_B";
inline constexpr std::string_view kMetaLoraRank = "lora_r";
inline constexpr std::string_view kMetaLoraAlpha = "lora_alpha";

/// Adapter scaling parameters for one layer. Per-layer meta keys
/// `lora_r:<layer>` / `lora_alpha:<layer>` override the global ones.
struct AdapterParams {
    std::size_t rank = 0;
    double alpha = 0.0;
};

namespace detail {

inline bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

inline const std::string* find_meta(const Checkpoint& c, std::string_view key, const std::string& layer) {
    auto it = c.meta.find(std::string(key) + ":" + layer);
    if (it != c.meta.end()) {
        return &it->second;
    }
    it = c.meta.find(std::string(key));
    return it == c.meta.end() ? nullptr : &it->second;
}

inline double parse_positive(const std::string& s, const std::string& what) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != s.size() || !(v > 0.0) || !std::isfinite(v)) {
        throw Error(ErrorCode::AdapterMeta, what + " must be a positive number, got '" + s + "'");
    }
    return v;
}

} // namespace detail

inline AdapterParams adapter_params(const Checkpoint& c, const std::string& layer) {
    const std::string* r = detail::find_meta(c, kMetaLoraRank, layer);
    const std::string* a = detail::find_meta(c, kMetaLoraAlpha, layer);
    if (r == nullptr || a == nullptr) {
        throw Error(ErrorCode::AdapterMeta, "adapter layer '" + layer + "' has no lora_r/lora_alpha in meta");
    }
    const double rank = detail::parse_positive(*r, "lora_r for '" + layer + "'");
    if (rank != std::floor(rank)) {
        throw Error(ErrorCode::AdapterMeta, "lora_r for '" + layer + "' must be an integer");
    }
    return {static_cast<std::size_t>(rank), detail::parse_positive(*a, "lora_alpha for '" + layer + "'")};
}

/// Layer names (without suffix) that carry an adapter pair.
inline std::vector<std::string> adapter_layers(const Checkpoint& c) {
    std::vector<std::string> out;
    for (const auto& [name, rec] : c.records) {
        if (detail::ends_with(name, kLoraASuffix)) {
            out.push_back(name.substr(0, name.size() - kLoraASuffix.size()));
        }
    }
    return out;
}

/// Structural checks shared by load and save: byte lengths, adapter pairing
/// and adapter metadata.
inline void validate_checkpoint(const Checkpoint& c) {
    for (const auto& [name, rec] : c.records) {
        if (name != rec.name) {
            throw Error(ErrorCode::MalformedManifest, "record key '" + name + "' differs from its name");
        }
        for (auto d : rec.shape) {
            if (d == 0) {
                throw Error(ErrorCode::MalformedManifest, "tensor '" + name + "' has a zero dimension");
            }
        }
        if (rec.element_count() * dtype_size(rec.dtype) != rec.bytes.size()) {
            throw Error(ErrorCode::ByteLength, "tensor '" + name + "' declares " +
                                                   std::to_string(rec.element_count()) + " elements but holds " +
                                                   std::to_string(rec.bytes.size()) + " bytes");
        }
        if (detail::ends_with(name, kLoraBSuffix)) {
            const std::string layer = name.substr(0, name.size() - kLoraBSuffix.size());
            if (!c.contains(layer + std::string(kLoraASuffix))) {
                throw Error(ErrorCode::InconsistentRank, "adapter '" + name + "' has no matching lora_A");
            }
        }
    }
    for (const auto& layer : adapter_layers(c)) {
        const auto& a = c.at(layer + std::string(kLoraASuffix));
        auto b_it = c.records.find(layer + std::string(kLoraBSuffix));
        if (b_it == c.records.end()) {
            throw Error(ErrorCode::InconsistentRank, "adapter '" + a.name + "' has no matching lora_B");
        }
        const auto& b = b_it->second;
        if (a.shape.size() != 2 || b.shape.size() != 2) {
            throw Error(ErrorCode::ShapeMismatch, "adapter pair for '" + layer + "' must be 2-D");
        }
        if (a.shape[1] != b.shape[0]) {
            throw Error(ErrorCode::InconsistentRank,
                        "adapter pair for '" + layer + "' has inconsistent rank: lora_A is (" +
                            std::to_string(a.shape[0]) + "," + std::to_string(a.shape[1]) + "), lora_B is (" +
                            std::to_string(b.shape[0]) + "," + std::to_string(b.shape[1]) + ")");
        }
        const AdapterParams p = adapter_params(c, layer);
        if (p.rank != a.shape[1]) {
            throw Error(ErrorCode::InconsistentRank, "adapter pair for '" + layer + "' has rank " +
                                                         std::to_string(a.shape[1]) + " but meta declares " +
                                                         std::to_string(p.rank));
        }
    }
}

inline std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw Error(ErrorCode::Io, "sha256 computation failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::Io, "cannot open '" + p.string() + "'");
    }
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) {
        throw Error(ErrorCode::Io, "error reading '" + p.string() + "'");
    }
    return buf;
}

inline void write_file(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorCode::Io, "cannot open '" + p.string() + "' for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
        throw Error(ErrorCode::Io, "error writing '" + p.string() + "'");
    }
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    write_file(p, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

inline void ensure_directory(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw Error(ErrorCode::Io, "cannot create directory '" + dir.string() + "': " + ec.message());
    }
}

inline std::vector<std::uint64_t> parse_shape(const nlohmann::json& j, const std::string& name) {
    if (!j.is_array()) {
        throw Error(ErrorCode::MalformedManifest, "tensor '" + name + "' shape is not an array");
    }
    std::vector<std::uint64_t> shape;
    for (const auto& d : j) {
        if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0) {
            throw Error(ErrorCode::MalformedManifest, "tensor '" + name + "' has a non-positive dimension");
        }
        shape.push_back(d.get<std::uint64_t>());
    }
    return shape;
}

inline std::map<std::string, std::string> parse_meta(const nlohmann::json& j) {
    std::map<std::string, std::string> meta;
    if (j.is_null()) {
        return meta;
    }
    if (!j.is_object()) {
        throw Error(ErrorCode::MalformedManifest, "meta must be an object");
    }
    for (const auto& [k, v] : j.items()) {
        if (!v.is_string()) {
            throw Error(ErrorCode::MalformedManifest, "meta value for '" + k + "' must be a string");
        }
        meta[k] = v.get<std::string>();
    }
    return meta;
}

inline nlohmann::json parse_json_file(const std::filesystem::path& p) {
    const auto bytes = read_file(p);
    try {
        return nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::MalformedManifest, "'" + p.string() + "' is not valid JSON: " + e.what());
    }
}

} // namespace detail

inline constexpr std::string_view kManifestFile = "manifest.json";
inline constexpr std::string_view kBlobFile = "tensors.bin";

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    const auto manifest_path = dir / kManifestFile;
    if (!std::filesystem::is_regular_file(manifest_path)) {
        throw Error(ErrorCode::MissingManifest, "no manifest at '" + manifest_path.string() + "'");
    }
    const auto manifest = detail::parse_json_file(manifest_path);
    if (!manifest.is_object() || manifest.value("format_version", std::string()) != "1" ||
        !manifest.contains("records") || !manifest["records"].is_array()) {
        throw Error(ErrorCode::MalformedManifest, "'" + manifest_path.string() + "' is not a version 1 manifest");
    }

    Checkpoint ckpt;
    ckpt.meta = detail::parse_meta(manifest.value("meta", nlohmann::json()));
    const auto& records = manifest["records"];
    if (records.empty()) {
        return ckpt;
    }
    const auto blob = detail::read_file(dir / kBlobFile);
    for (const auto& r : records) {
        if (!r.is_object() || !r.contains("name") || !r["name"].is_string()) {
            throw Error(ErrorCode::MalformedManifest, "manifest record without a name");
        }
        const std::string name = r["name"].get<std::string>();
        try {
            TensorRecord rec;
            rec.name = name;
            rec.dtype = parse_dtype(r.value("dtype", std::string()), name);
            rec.shape = detail::parse_shape(r.value("shape", nlohmann::json()), name);
            const auto offset = r.value("offset", std::uint64_t{0});
            const auto length = r.value("byte_length", std::uint64_t{0});
            const std::size_t expected = rec.element_count() * dtype_size(rec.dtype);
            if (length != expected) {
                throw Error(ErrorCode::ByteLength, "tensor '" + name + "' manifest byte_length " +
                                                       std::to_string(length) + " but shape needs " +
                                                       std::to_string(expected));
            }
            if (offset > blob.size() || blob.size() - offset < length) {
                throw Error(ErrorCode::ByteLength,
                            "tensor '" + name + "' needs " + std::to_string(length) + " bytes at offset " +
                                std::to_string(offset) + " but blob holds " +
                                std::to_string(blob.size() > offset ? blob.size() - offset : 0));
            }
            rec.bytes.assign(blob.begin() + static_cast<std::ptrdiff_t>(offset),
                             blob.begin() + static_cast<std::ptrdiff_t>(offset + length));
            if (r.contains("sha256") && r["sha256"].get<std::string>() != sha256_hex(rec.bytes)) {
                throw Error(ErrorCode::Checksum, "tensor '" + name + "' fails its sha256 check");
            }
            ckpt.add(std::move(rec));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::MalformedManifest, "tensor '" + name + "': " + e.what());
        }
    }
    validate_checkpoint(ckpt);
    return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
    validate_checkpoint(ckpt);
    detail::ensure_directory(dir);

    std::vector<std::uint8_t> blob;
    nlohmann::json records = nlohmann::json::array();
    for (const auto& [name, rec] : ckpt.records) {
        blob.resize((blob.size() + 7) / 8 * 8, 0);
        const std::size_t offset = blob.size();
        blob.insert(blob.end(), rec.bytes.begin(), rec.bytes.end());
        records.push_back({{"name", name},
                           {"dtype", dtype_name(rec.dtype)},
                           {"shape", rec.shape},
                           {"offset", offset},
                           {"byte_length", rec.bytes.size()},
                           {"sha256", sha256_hex(rec.bytes)}});
    }
    nlohmann::json manifest = {{"format_version", "1"}, {"records", records}, {"meta", ckpt.meta}};
    detail::write_file(dir / kBlobFile, blob);
    detail::write_text(dir / kManifestFile, manifest.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Interchange layout: a directory of per-tensor raw little-endian blobs and an
// `index.json` of the form
//   {"tensors": [{"name", "dtype", "shape", "file"}, ...], "meta": {...}}
// Only f32 and f64 tensors are accepted.

inline constexpr std::string_view kInterchangeIndex = "index.json";

inline Checkpoint read_interchange(const std::filesystem::path& dir) {
    const auto index_path = dir / kInterchangeIndex;
    if (!std::filesystem::is_regular_file(index_path)) {
        throw Error(ErrorCode::MissingManifest, "no interchange index at '" + index_path.string() + "'");
    }
    const auto index = detail::parse_json_file(index_path);
    if (!index.is_object() || !index.contains("tensors") || !index["tensors"].is_array()) {
        throw Error(ErrorCode::MalformedManifest, "'" + index_path.string() + "' lacks a tensors array");
    }
    Checkpoint ckpt;
    ckpt.meta = detail::parse_meta(index.value("meta", nlohmann::json()));
    for (const auto& t : index["tensors"]) {
        if (!t.is_object() || !t.contains("name") || !t["name"].is_string() || !t.contains("file") ||
            !t["file"].is_string()) {
            throw Error(ErrorCode::MalformedManifest, "interchange entry needs string name and file");
        }
        const std::string name = t["name"].get<std::string>();
        TensorRecord rec;
        rec.name = name;
        rec.dtype = parse_dtype(t.value("dtype", std::string()), name);
        rec.shape = detail::parse_shape(t.value("shape", nlohmann::json()), name);
        rec.bytes = detail::read_file(dir / t["file"].get<std::string>());
        if (rec.bytes.size() != rec.element_count() * dtype_size(rec.dtype)) {
            throw Error(ErrorCode::ByteLength, "tensor '" + name + "' file holds " +
                                                   std::to_string(rec.bytes.size()) + " bytes, shape needs " +
                                                   std::to_string(rec.element_count() * dtype_size(rec.dtype)));
        }
        ckpt.add(std::move(rec));
    }
    validate_checkpoint(ckpt);
    return ckpt;
}

inline void write_interchange(const Checkpoint& ckpt, const std::filesystem::path& dir) {
    detail::ensure_directory(dir);
    nlohmann::json tensors = nlohmann::json::array();
    std::size_t i = 0;
    for (const auto& [name, rec] : ckpt.records) {
        const std::string file = "t" + std::to_string(i++) + ".bin";
        detail::write_file(dir / file, rec.bytes);
        tensors.push_back({{"name", name}, {"dtype", dtype_name(rec.dtype)}, {"shape", rec.shape}, {"file", file}});
    }
    nlohmann::json index = {{"tensors", tensors}, {"meta", ckpt.meta}};
    detail::write_text(dir / kInterchangeIndex, index.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Parameter classification.

enum class ParamClass { LanguageLinear, ModalitySpecific, BiasNorm, Frozen };

inline constexpr std::array<ParamClass, 4> kAllParamClasses = {ParamClass::LanguageLinear, ParamClass::ModalitySpecific,
                                                               ParamClass::BiasNorm, ParamClass::Frozen};

inline std::string_view param_class_name(ParamClass c) {
    switch (c) {
    case ParamClass::LanguageLinear: return "language_linear";
    case ParamClass::ModalitySpecific: return "modality_specific";
    case ParamClass::BiasNorm: return "bias_norm";
    case ParamClass::Frozen: return "frozen";
    }
    return "frozen";
}

inline ParamClass parse_param_class(std::string_view s) {
    for (auto c : kAllParamClasses) {
        if (param_class_name(c) == s) {
            return c;
        }
    }
    throw Error(ErrorCode::InvalidConfig, "unknown parameter class '" + std::string(s) + "'");
}

struct ClassRule {
    std::string pattern;
    ParamClass param_class;
};

/// `*` matches any run of characters (dots included); everything else is
/// literal.
inline bool glob_match(std::string_view pattern, std::string_view text) {
    std::size_t p = 0, t = 0;
    std::size_t star = std::string_view::npos, mark = 0;
    while (t < text.size()) {
        if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = t;
        } else if (p < pattern.size() && pattern[p] == text[t]) {
            ++p;
            ++t;
        } else if (star != std::string_view::npos) {
            p = star + 1;
            t = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') {
        ++p;
    }
    return p == pattern.size();
}

/// Encoders and projectors stay per-specialist, norms and biases are
/// averaged, decoder weights and their adapters are merged, anything else is
/// taken from the base.
inline std::vector<ClassRule> default_rules() {
    return {
        {"*encoder*", ParamClass::ModalitySpecific},
        {"*projector*", ParamClass::ModalitySpecific},
        {"*norm*", ParamClass::BiasNorm},
        {"*bias*", ParamClass::BiasNorm},
        {"decoder.*.weight", ParamClass::LanguageLinear},
        {"decoder.*.weight.lora_A", ParamClass::LanguageLinear},
        {"decoder.*.weight.lora_B", ParamClass::LanguageLinear},
        {"*", ParamClass::Frozen},
    };
}

/// Reads `{"rules": [{"pattern": "...", "class": "language_linear"}, ...]}`.
inline std::vector<ClassRule> load_rules(const std::filesystem::path& path) {
    const auto j = detail::parse_json_file(path);
    if (!j.is_object() || !j.contains("rules") || !j["rules"].is_array()) {
        throw Error(ErrorCode::InvalidConfig, "rules file '" + path.string() + "' lacks a rules array");
    }
    std::vector<ClassRule> rules;
    for (const auto& r : j["rules"]) {
        if (!r.is_object() || !r.contains("pattern") || !r.contains("class") || !r["pattern"].is_string() ||
            !r["class"].is_string()) {
            throw Error(ErrorCode::InvalidConfig, "rule entries need string 'pattern' and 'class'");
        }
        rules.push_back({r["pattern"].get<std::string>(), parse_param_class(r["class"].get<std::string>())});
    }
    return rules;
}

struct Classification {
    std::map<std::string, ParamClass> classes;

    std::size_t count(ParamClass c) const {
        std::size_t n = 0;
        for (const auto& [name, cls] : classes) {
            n += cls == c ? 1 : 0;
        }
        return n;
    }

    ParamClass of(const std::string& name) const {
        auto it = classes.find(name);
        if (it == classes.end()) {
            throw Error(ErrorCode::UnmatchedParams, "'" + name + "' was not classified");
        }
        return it->second;
    }
};

/// First matching rule wins. Every record must match some rule.
inline Classification classify_parameters(const Checkpoint& ckpt, std::span<const ClassRule> rules) {
    Classification out;
    std::vector<std::string> unmatched;
    for (const auto& [name, rec] : ckpt.records) {
        bool matched = false;
        for (const auto& rule : rules) {
            if (glob_match(rule.pattern, name)) {
                out.classes.emplace(name, rule.param_class);
                matched = true;
                break;
            }
        }
        if (!matched) {
            unmatched.push_back(name);
        }
    }
    if (!unmatched.empty()) {
        std::string list;
        for (const auto& n : unmatched) {
            list += (list.empty() ? "" : ", ") + n;
        }
        throw Error(ErrorCode::UnmatchedParams, "no rule matches: " + list);
    }
    return out;
}

} // namespace smerge
