#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "oodkit/matrix.hpp"

namespace oodkit {

// ---------------------------------------------------------------------------
// .oodt tensor container
//
//   "OODB" | version u32 LE (=1) | dtype u8 | ndim u8 | reserved u16 (=0)
//   | ndim x u64 LE shape | row-major little-endian payload
//
// dtype 0 = f32, 1 = i64. dtype 2 = f64 is accepted only for detector states
// and model checkpoints; bundle readers reject it.

enum class DType : std::uint8_t { f32 = 0, i64 = 1, f64 = 2 };

inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::size_t kMaxRank = 8;

struct Tensor {
    DType dtype = DType::f32;
    std::vector<std::uint64_t> shape;
    std::vector<float> f32;
    std::vector<std::int64_t> i64;
    std::vector<double> f64;

    std::size_t numel() const;
    std::size_t rank() const { return shape.size(); }

    static Tensor from_f32(std::vector<std::uint64_t> shape, std::vector<float> data);
    static Tensor from_i64(std::vector<std::uint64_t> shape, std::vector<std::int64_t> data);
    static Tensor from_f64(std::vector<std::uint64_t> shape, std::vector<double> data);

    // Rounds doubles to f32 (round to nearest even).
    static Tensor from_matrix_f32(const Matrix& m);
    static Tensor from_vector_f32(const Vector& v);
    static Tensor from_matrix_f64(const Matrix& m);

    // Rank-2 view as a double matrix (f32 and f64 only).
    Matrix to_matrix() const;
    // Any-rank float tensor flattened to doubles.
    Vector to_doubles() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

struct TensorHeader {
    DType dtype = DType::f32;
    std::vector<std::uint64_t> shape;
    std::size_t payload_offset = 0;
};

std::string encode_tensor(const Tensor& t);
TensorHeader decode_tensor_header(std::string_view bytes, bool allow_f64 = false);
Tensor decode_tensor(std::string_view bytes, bool allow_f64 = false);

Tensor read_tensor(const std::filesystem::path& path, bool allow_f64 = false);
void write_tensor(const std::filesystem::path& path, const Tensor& t);

std::string read_file(const std::filesystem::path& path);
// Writes through a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

// ---------------------------------------------------------------------------
// Manifest

enum class SplitKind { id_train, id_val, id_test, csid, near_ood, far_ood };
enum class SplitPhase { train, val, test };

std::string to_string(SplitKind k);
std::string to_string(SplitPhase p);
SplitKind parse_split_kind(const std::string& s);
SplitPhase parse_split_phase(const std::string& s);

inline bool is_id_kind(SplitKind k) {
    return k == SplitKind::id_train || k == SplitKind::id_val || k == SplitKind::id_test;
}

// Temperature and magnitude the recorded perturbed_logits were produced with.
struct Perturbation {
    double temperature = 1.0;
    double epsilon = 0.0;
    friend bool operator==(const Perturbation&, const Perturbation&) = default;
};

struct SplitEntry {
    SplitKind kind = SplitKind::id_train;
    SplitPhase phase = SplitPhase::train;
    std::uint64_t sample_count = 0;
    std::map<std::string, std::string> tensors;  // role -> file name
    std::optional<Perturbation> perturbation;

    bool has(const std::string& role) const { return tensors.count(role) != 0; }
    friend bool operator==(const SplitEntry&, const SplitEntry&) = default;
};

struct HeadRef {
    std::string weight;
    std::string bias;
    friend bool operator==(const HeadRef&, const HeadRef&) = default;
};

struct Manifest {
    std::string benchmark_name;
    std::uint32_t format_version = 1;
    std::uint64_t num_classes = 0;
    std::vector<std::string> layer_names;  // last = penultimate
    std::map<std::string, SplitEntry> splits;
    std::optional<HeadRef> head;

    const std::string& penultimate() const { return layer_names.back(); }
    const SplitEntry& split(const std::string& id) const;

    // Adds a split whose tensor files follow the default naming scheme.
    SplitEntry& add_split(const std::string& id, SplitKind kind, SplitPhase phase,
                          std::uint64_t n, const std::vector<std::string>& roles);
    void declare_head();

    friend bool operator==(const Manifest&, const Manifest&) = default;
};

std::string feature_role(const std::string& layer);
std::string default_tensor_file(const std::string& split_id, const std::string& role);

// Structural checks that need no tensor data. Throws SchemaError.
void validate_manifest(const Manifest& m);

// Canonical JSON: sorted keys, no whitespace.
std::string manifest_to_json(const Manifest& m);
// Strict parse: unknown or missing keys, duplicate keys and type mismatches
// are SchemaError; malformed JSON is FormatError.
Manifest manifest_from_json(const std::string& text);

// ---------------------------------------------------------------------------
// Bundles

struct ClassifierHead {
    Matrix weight;  // K x D
    Vector bias;    // K
};

inline const std::string kHeadSplit = "";
inline const std::string kHeadWeightRole = "head.weight";
inline const std::string kHeadBiasRole = "head.bias";

using TensorKey = std::pair<std::string, std::string>;  // (split id, role)

struct BundleContents {
    Manifest manifest;
    std::map<TensorKey, Tensor> tensors;

    void put(const std::string& split, const std::string& role, Tensor t) {
        tensors[{split, role}] = std::move(t);
    }
};

// Validates manifest and tensor contents, then writes the directory
// atomically (staging directory + rename).
void write_bundle(const BundleContents& contents, const std::filesystem::path& dir);

// Shape/value validation of one tensor against the manifest. Throws
// SchemaError.
void validate_tensor(const Manifest& m, const std::string& split, const std::string& role,
                     const Tensor& t);
void validate_tensor_header(const Manifest& m, const std::string& split, const std::string& role,
                            const TensorHeader& h);

struct HeadReport {
    double max_deviation = 0.0;
    std::size_t rows_checked = 0;
};

class FeatureBundle {
public:
    // Manifest validated eagerly; tensors are read and checked on first use.
    static FeatureBundle open(const std::filesystem::path& dir);
    // In-memory bundle over already validated contents.
    static FeatureBundle from_contents(BundleContents contents);

    const Manifest& manifest() const;
    const std::filesystem::path& directory() const;

    bool has(const std::string& split, const std::string& role) const;
    const Tensor& tensor(const std::string& split, const std::string& role) const;

    Matrix features(const std::string& split, const std::string& layer = {}) const;
    Matrix logits(const std::string& split) const;
    std::vector<std::int64_t> labels(const std::string& split) const;
    std::vector<Matrix> dropout_logits(const std::string& split) const;
    Matrix perturbed_logits(const std::string& split) const;
    std::optional<ClassifierHead> head() const;

    // Reads and validates every declared tensor, including cross-split layer
    // widths and the head shape.
    void validate_all() const;
    BundleContents load_all() const;

private:
    struct Impl;
    std::shared_ptr<Impl> impl_;
};

inline FeatureBundle read_bundle(const std::filesystem::path& dir) { return FeatureBundle::open(dir); }

// Max |W z + b - logits| / max(1, |logits|) over up to 256 evenly spaced
// id_train rows. Throws HeadMismatchError above 1e-4, CapabilityError when no
// head is declared.
HeadReport validate_head(const FeatureBundle& bundle);

inline constexpr double kHeadTolerance = 1e-4;

}  // namespace oodkit
