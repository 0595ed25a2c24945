#pragma once

// Datasets: synthesis, file ingestion, scarcity injection, and the
// stratified / counter-biased splits used to build member training sets.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "debias/error.hpp"
#include "debias/nn.hpp"
#include "debias/rng.hpp"

namespace debias {

struct Dataset {
    Matrix features;              // N x D
    std::vector<ClassId> labels;  // N
    int class_count = 0;
    std::string name;

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }

    void validate() const {
        if (labels.empty()) {
            throw ValueError("dataset '" + name + "' is empty");
        }
        if (static_cast<std::size_t>(features.rows()) != labels.size()) {
            throw DimensionError("dataset '" + name + "' has mismatched feature and label counts");
        }
        if (class_count <= 0) {
            throw ValueError("dataset '" + name + "' has no classes");
        }
        for (ClassId y : labels) {
            if (y < 0 || y >= class_count) {
                throw LabelError(LabelError::Kind::out_of_range,
                                 "dataset '" + name + "' has label " + std::to_string(y) + " outside [0, " +
                                     std::to_string(class_count) + ")");
            }
        }
        if (!features.allFinite()) {
            throw ValueError("dataset '" + name + "' has non-finite features");
        }
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(static_cast<std::size_t>(class_count), 0);
        for (ClassId y : labels) {
            ++counts.at(static_cast<std::size_t>(y));
        }
        return counts;
    }

    // Row indices of each class, in dataset order.
    std::vector<std::vector<std::size_t>> rows_by_class() const {
        std::vector<std::vector<std::size_t>> rows(static_cast<std::size_t>(class_count));
        for (std::size_t i = 0; i < labels.size(); ++i) {
            rows.at(static_cast<std::size_t>(labels[i])).push_back(i);
        }
        return rows;
    }

    Dataset select(std::span<const std::size_t> rows, std::string new_name = {}) const {
        Dataset out;
        out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
        out.labels.reserve(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            out.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(rows[i]));
            out.labels.push_back(labels.at(rows[i]));
        }
        out.class_count = class_count;
        out.name = new_name.empty() ? name : std::move(new_name);
        return out;
    }

    // Exact equality of shape, values, labels and class count (names ignored).
    friend bool operator==(const Dataset& a, const Dataset& b) {
        return a.class_count == b.class_count && a.labels == b.labels && a.features.rows() == b.features.rows() &&
               a.features.cols() == b.features.cols() && a.features == b.features;
    }
};

// FNV-1a over the raw bytes of features, labels and class count.
inline std::string fingerprint(const Dataset& ds) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    auto feed = [&](const void* data, std::size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 0x100000001B3ULL;
        }
    };
    const std::int64_t shape[3] = {static_cast<std::int64_t>(ds.features.rows()),
                                   static_cast<std::int64_t>(ds.features.cols()), ds.class_count};
    feed(shape, sizeof(shape));
    feed(ds.features.data(), static_cast<std::size_t>(ds.features.size()) * sizeof(double));
    feed(ds.labels.data(), ds.labels.size() * sizeof(ClassId));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// Isotropic Gaussian blobs, one per class, with centers drawn uniformly
/// from [-1, 1]^dim. Rows are grouped by class.
inline Dataset synth_gaussian(int class_count, std::size_t per_class, std::size_t dim, double spread,
                              std::uint64_t seed) {
    if (class_count <= 0 || per_class == 0 || dim == 0) {
        throw ValueError("synth_gaussian needs positive class count, per-class size and dimension");
    }
    if (!(spread > 0.0) || !std::isfinite(spread)) {
        throw ValueError("synth_gaussian spread must be positive");
    }
    Rng rng(seed);
    Matrix centers(class_count, static_cast<Eigen::Index>(dim));
    for (Eigen::Index c = 0; c < centers.rows(); ++c) {
        for (;;) {
            for (Eigen::Index d = 0; d < centers.cols(); ++d) {
                centers(c, d) = rng.uniform(-1.0, 1.0);
            }
            bool distinct = true;
            for (Eigen::Index o = 0; o < c; ++o) {
                distinct = distinct && (centers.row(o) - centers.row(c)).norm() > 1e-9;
            }
            if (distinct) {
                break;
            }
        }
    }
    Dataset ds;
    ds.class_count = class_count;
    ds.name = "synthetic";
    ds.features.resize(static_cast<Eigen::Index>(per_class) * class_count, static_cast<Eigen::Index>(dim));
    ds.labels.reserve(per_class * static_cast<std::size_t>(class_count));
    Eigen::Index row = 0;
    for (int c = 0; c < class_count; ++c) {
        for (std::size_t i = 0; i < per_class; ++i, ++row) {
            for (Eigen::Index d = 0; d < centers.cols(); ++d) {
                ds.features(row, d) = centers(c, d) + spread * rng.normal();
            }
            ds.labels.push_back(c);
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// File formats

enum class DatasetFormat { csv_labeled, idx_pair };

struct LoadOptions {
    bool header = false;     // csv: skip the first line
    bool normalize = false;  // min-max scale every feature column to [0, 1]
};

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t comma = line.find(',', start);
        std::string_view field = line.substr(start, comma == std::string_view::npos ? line.npos : comma - start);
        while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) {
            field.remove_prefix(1);
        }
        while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r')) {
            field.remove_suffix(1);
        }
        out.push_back(field);
        if (comma == std::string_view::npos) {
            return out;
        }
        start = comma + 1;
    }
}

inline double parse_double(std::string_view field, std::size_t line_no) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (ec != std::errc{} || ptr != field.data() + field.size() || field.empty()) {
        throw ParseError("line " + std::to_string(line_no) + ": cannot parse '" + std::string(field) + "' as a number");
    }
    if (!std::isfinite(v)) {
        throw ParseError("line " + std::to_string(line_no) + ": non-finite value");
    }
    return v;
}

// Labels must be integral, nonnegative, and cover [0, max] without gaps.
inline int check_label_set(const std::vector<ClassId>& labels) {
    const int max_label = *std::max_element(labels.begin(), labels.end());
    std::vector<bool> seen(static_cast<std::size_t>(max_label) + 1, false);
    for (ClassId y : labels) {
        seen[static_cast<std::size_t>(y)] = true;
    }
    for (std::size_t c = 0; c < seen.size(); ++c) {
        if (!seen[c]) {
            throw LabelError(LabelError::Kind::gap, "no sample carries label " + std::to_string(c) +
                                                        " although larger labels exist");
        }
    }
    return max_label + 1;
}

inline void min_max_normalize(Matrix& features) {
    for (Eigen::Index c = 0; c < features.cols(); ++c) {
        const double lo = features.col(c).minCoeff();
        const double hi = features.col(c).maxCoeff();
        if (hi > lo) {
            features.col(c) = (features.col(c).array() - lo) / (hi - lo);
        } else {
            features.col(c).setZero();
        }
    }
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ParseError("cannot open '" + path.string() + "'");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset) {
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

struct IdxArray {
    std::uint8_t type = 0;
    std::vector<std::uint32_t> dims;
    std::vector<double> values;
};

inline std::size_t idx_element_size(std::uint8_t type) {
    switch (type) {
    case 0x08: return 1;  // unsigned byte
    case 0x09: return 1;  // signed byte
    case 0x0B: return 2;  // int16
    case 0x0C: return 4;  // int32
    case 0x0D: return 4;  // float32
    case 0x0E: return 8;  // float64
    default: throw ParseError("unsupported IDX element type " + std::to_string(type));
    }
}

inline IdxArray read_idx(const std::filesystem::path& path) {
    const auto bytes = read_bytes(path);
    if (bytes.size() < 4 || bytes[0] != 0 || bytes[1] != 0) {
        throw ParseError("'" + path.string() + "' lacks an IDX magic number");
    }
    IdxArray arr;
    arr.type = bytes[2];
    const std::size_t ndims = bytes[3];
    const std::size_t elem = idx_element_size(arr.type);
    if (ndims == 0 || bytes.size() < 4 + 4 * ndims) {
        throw ParseError("'" + path.string() + "' has a truncated IDX header");
    }
    std::size_t count = 1;
    for (std::size_t d = 0; d < ndims; ++d) {
        arr.dims.push_back(read_be32(bytes, 4 + 4 * d));
        count *= arr.dims.back();
    }
    const std::size_t offset = 4 + 4 * ndims;
    if (bytes.size() != offset + count * elem) {
        throw ParseError("'" + path.string() + "' payload size does not match its IDX header");
    }
    arr.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const unsigned char* p = bytes.data() + offset + i * elem;
        std::uint64_t raw = 0;
        for (std::size_t b = 0; b < elem; ++b) {
            raw = (raw << 8) | p[b];
        }
        switch (arr.type) {
        case 0x08: arr.values[i] = static_cast<double>(raw); break;
        case 0x09: arr.values[i] = static_cast<double>(static_cast<std::int8_t>(raw)); break;
        case 0x0B: arr.values[i] = static_cast<double>(static_cast<std::int16_t>(raw)); break;
        case 0x0C: arr.values[i] = static_cast<double>(static_cast<std::int32_t>(raw)); break;
        case 0x0D: {
            const auto bits = static_cast<std::uint32_t>(raw);
            float f;
            std::memcpy(&f, &bits, sizeof(f));
            arr.values[i] = f;
            break;
        }
        default: {
            double v;
            std::memcpy(&v, &raw, sizeof(v));
            arr.values[i] = v;
        }
        }
    }
    return arr;
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                       static_cast<char>(v)};
    out.write(b, 4);
}

} // namespace detail

/// Reads a CSV file whose last column is an integer class label.
inline Dataset load_csv(const std::filesystem::path& path, const LoadOptions& options = {}) {
    std::ifstream in(path);
    if (!in) {
        throw ParseError("cannot open '" + path.string() + "'");
    }
    std::vector<double> values;
    std::vector<ClassId> labels;
    std::size_t width = 0;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line_no == 1 && options.header) {
            continue;
        }
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        const auto fields = detail::split_fields(line);
        if (fields.size() < 2) {
            throw DimensionError("line " + std::to_string(line_no) + ": need at least one feature and a label");
        }
        if (width == 0) {
            width = fields.size();
        } else if (fields.size() != width) {
            throw DimensionError("line " + std::to_string(line_no) + " has " + std::to_string(fields.size()) +
                                 " columns, expected " + std::to_string(width));
        }
        for (std::size_t i = 0; i + 1 < fields.size(); ++i) {
            values.push_back(detail::parse_double(fields[i], line_no));
        }
        const double label = detail::parse_double(fields.back(), line_no);
        if (label != std::floor(label)) {
            throw LabelError(LabelError::Kind::non_integral,
                             "line " + std::to_string(line_no) + ": label '" + std::string(fields.back()) +
                                 "' is not an integer");
        }
        if (label < 0) {
            throw LabelError(LabelError::Kind::negative, "line " + std::to_string(line_no) + ": negative label");
        }
        labels.push_back(static_cast<ClassId>(label));
    }
    if (labels.empty()) {
        throw ParseError("'" + path.string() + "' contains no samples");
    }
    Dataset ds;
    const auto dim = static_cast<Eigen::Index>(width - 1);
    ds.features = Eigen::Map<const Matrix>(values.data(), static_cast<Eigen::Index>(labels.size()), dim);
    ds.class_count = detail::check_label_set(labels);
    ds.labels = std::move(labels);
    ds.name = path.stem().string();
    if (options.normalize) {
        detail::min_max_normalize(ds.features);
    }
    return ds;
}

/// Reads an IDX feature file (first dimension = samples, the rest flattened)
/// and a one-dimensional IDX label file.
inline Dataset load_idx_pair(const std::filesystem::path& features_path, const std::filesystem::path& labels_path,
                             const LoadOptions& options = {}) {
    const auto feats = detail::read_idx(features_path);
    const auto labs = detail::read_idx(labels_path);
    if (labs.dims.size() != 1) {
        throw DimensionError("IDX label file must be one-dimensional");
    }
    if (feats.dims.front() != labs.dims.front()) {
        throw DimensionError("IDX feature and label files disagree on the sample count");
    }
    const std::size_t n = feats.dims.front();
    if (n == 0) {
        throw ParseError("IDX files contain no samples");
    }
    const std::size_t dim = feats.values.size() / n;
    Dataset ds;
    ds.features = Eigen::Map<const Matrix>(feats.values.data(), static_cast<Eigen::Index>(n),
                                           static_cast<Eigen::Index>(dim));
    for (double v : labs.values) {
        if (v != std::floor(v)) {
            throw LabelError(LabelError::Kind::non_integral, "IDX label is not an integer");
        }
        if (v < 0) {
            throw LabelError(LabelError::Kind::negative, "IDX label is negative");
        }
        ds.labels.push_back(static_cast<ClassId>(v));
    }
    ds.class_count = detail::check_label_set(ds.labels);
    ds.name = features_path.stem().string();
    if (!ds.features.allFinite()) {
        throw ParseError("IDX features contain non-finite values");
    }
    if (options.normalize) {
        detail::min_max_normalize(ds.features);
    }
    return ds;
}

inline Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format, const LoadOptions& options = {},
                            const std::filesystem::path& labels_path = {}) {
    if (format == DatasetFormat::csv_labeled) {
        return load_csv(path, options);
    }
    if (labels_path.empty()) {
        throw ValueError("idx_pair format needs a label file path");
    }
    return load_idx_pair(path, labels_path, options);
}

// Writes features with shortest round-trip decimals, label last.
inline void save_csv(const Dataset& ds, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw Error("cannot write '" + path.string() + "'");
    }
    std::array<char, 64> buf{};
    for (std::size_t r = 0; r < ds.size(); ++r) {
        for (Eigen::Index c = 0; c < ds.features.cols(); ++c) {
            const auto res = std::to_chars(buf.data(), buf.data() + buf.size(),
                                           ds.features(static_cast<Eigen::Index>(r), c));
            out.write(buf.data(), res.ptr - buf.data());
            out.put(',');
        }
        out << ds.labels[r] << '\n';
    }
}

// Features as float64 (type 0x0E) with shape (N, D); labels as unsigned bytes.
inline void save_idx_pair(const Dataset& ds, const std::filesystem::path& features_path,
                          const std::filesystem::path& labels_path) {
    if (ds.class_count > 256) {
        throw ValueError("IDX label files store at most 256 classes");
    }
    std::ofstream f(features_path, std::ios::binary);
    std::ofstream l(labels_path, std::ios::binary);
    if (!f || !l) {
        throw Error("cannot write IDX files");
    }
    f.write("\0\0\x0E\x02", 4);
    detail::write_be32(f, static_cast<std::uint32_t>(ds.size()));
    detail::write_be32(f, static_cast<std::uint32_t>(ds.dim()));
    for (Eigen::Index i = 0; i < ds.features.size(); ++i) {
        std::uint64_t raw;
        std::memcpy(&raw, ds.features.data() + i, sizeof(raw));
        for (int b = 7; b >= 0; --b) {
            f.put(static_cast<char>(raw >> (8 * b)));
        }
    }
    l.write("\0\0\x08\x01", 4);
    detail::write_be32(l, static_cast<std::uint32_t>(ds.size()));
    for (ClassId y : ds.labels) {
        l.put(static_cast<char>(y));
    }
}

// ---------------------------------------------------------------------------
// Scarcity and splitting

/// Classes whose samples are thinned out of a training set.
struct BiasSpec {
    std::set<ClassId> scarce_classes;
    double retention = 1.0;

    void validate(int class_count) const {
        if (scarce_classes.empty()) {
            throw ValueError("bias spec names no scarce classes");
        }
        for (ClassId c : scarce_classes) {
            if (c < 0 || c >= class_count) {
                throw LabelError(LabelError::Kind::out_of_range, "scarce class " + std::to_string(c) + " is invalid");
            }
        }
        if (!(retention > 0.0 && retention <= 1.0)) {
            throw ValueError("retention must lie in (0, 1]");
        }
    }
};

struct SplitPlan {
    std::set<ClassId> missing_classes;
    std::size_t k = 2;
    std::uint64_t seed = 0;

    void validate(int class_count) const {
        if (k == 0) {
            throw ValueError("split plan needs k >= 1");
        }
        for (ClassId c : missing_classes) {
            if (c < 0 || c >= class_count) {
                throw LabelError(LabelError::Kind::out_of_range,
                                 "missing class " + std::to_string(c) + " is invalid");
            }
        }
    }
};

// Number of scarce-class samples kept: floor(retention * n), at least 1.
// The small epsilon keeps products such as 0.29 * 100 from flooring to 28.
inline std::size_t retained_count(std::size_t n, double retention) {
    const auto kept = static_cast<std::size_t>(std::floor(retention * static_cast<double>(n) + 1e-9));
    return std::max<std::size_t>(1, std::min(kept, n));
}

/// Subsamples every scarce class without replacement; other classes are
/// kept whole. The result is shuffled.
inline Dataset inject_scarcity(const Dataset& ds, const BiasSpec& bias, std::uint64_t seed) {
    bias.validate(ds.class_count);
    Rng rng(seed);
    std::vector<std::size_t> keep;
    auto by_class = ds.rows_by_class();
    for (int c = 0; c < ds.class_count; ++c) {
        auto& rows = by_class[static_cast<std::size_t>(c)];
        if (bias.scarce_classes.contains(c) && !rows.empty()) {
            rng.shuffle(std::span(rows));
            rows.resize(retained_count(rows.size(), bias.retention));
            std::sort(rows.begin(), rows.end());
        }
        keep.insert(keep.end(), rows.begin(), rows.end());
    }
    std::sort(keep.begin(), keep.end());
    rng.shuffle(std::span(keep));
    return ds.select(keep, ds.name + "-scarce");
}

/// Counter-biased subsets: non-missing classes are dealt into k disjoint,
/// class-stratified parts; every subset also gets all missing-class samples.
inline std::vector<Dataset> counterbias_split(const Dataset& ds, const SplitPlan& plan) {
    plan.validate(ds.class_count);
    Rng rng(plan.seed);
    auto by_class = ds.rows_by_class();
    std::vector<std::vector<std::size_t>> parts(plan.k);
    std::vector<std::size_t> shared;
    for (int c = 0; c < ds.class_count; ++c) {
        auto& rows = by_class[static_cast<std::size_t>(c)];
        if (plan.missing_classes.contains(c)) {
            shared.insert(shared.end(), rows.begin(), rows.end());
            continue;
        }
        if (rows.empty()) {
            continue;
        }
        if (rows.size() < plan.k) {
            throw ValueError("class " + std::to_string(c) + " has " + std::to_string(rows.size()) +
                             " samples, fewer than k = " + std::to_string(plan.k));
        }
        rng.shuffle(std::span(rows));
        // Remainders go to the lowest-indexed parts.
        const std::size_t base = rows.size() / plan.k;
        const std::size_t extra = rows.size() % plan.k;
        std::size_t pos = 0;
        for (std::size_t p = 0; p < plan.k; ++p) {
            const std::size_t take = base + (p < extra ? 1 : 0);
            parts[p].insert(parts[p].end(), rows.begin() + static_cast<std::ptrdiff_t>(pos),
                            rows.begin() + static_cast<std::ptrdiff_t>(pos + take));
            pos += take;
        }
    }
    std::vector<Dataset> subsets;
    for (std::size_t p = 0; p < plan.k; ++p) {
        auto rows = parts[p];
        rows.insert(rows.end(), shared.begin(), shared.end());
        std::sort(rows.begin(), rows.end());
        rng.shuffle(std::span(rows));
        subsets.push_back(ds.select(rows, ds.name + "-subset" + std::to_string(p)));
    }
    return subsets;
}

struct TrainTestSplit {
    Dataset train;
    Dataset test;
};

/// Stratified holdout: round(test_fraction * class size) samples of every
/// class go to the test side.
inline TrainTestSplit holdout_split(const Dataset& ds, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
        throw ValueError("test_fraction must lie in (0, 1)");
    }
    Rng rng(seed);
    std::vector<std::size_t> train_rows;
    std::vector<std::size_t> test_rows;
    auto by_class = ds.rows_by_class();
    for (int c = 0; c < ds.class_count; ++c) {
        auto& rows = by_class[static_cast<std::size_t>(c)];
        if (rows.empty()) {
            continue;
        }
        const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(rows.size())));
        if (n_test == 0 || n_test == rows.size()) {
            throw ValueError("class " + std::to_string(c) + " is too small to appear on both sides of the split");
        }
        rng.shuffle(std::span(rows));
        test_rows.insert(test_rows.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_test));
        train_rows.insert(train_rows.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_test), rows.end());
    }
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(test_rows.begin(), test_rows.end());
    rng.shuffle(std::span(train_rows));
    rng.shuffle(std::span(test_rows));
    return {ds.select(train_rows, ds.name + "-train"), ds.select(test_rows, ds.name + "-test")};
}

} // namespace debias
