#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "drc/common.hpp"

namespace drc {

enum class DataType : uint8_t { Int64 = 0, Float64 = 1, Utf8 = 2 };

inline const char* dtype_name(DataType t) {
    switch (t) {
        case DataType::Int64: return "int64";
        case DataType::Float64: return "float64";
        case DataType::Utf8: return "utf8";
    }
    return "?";
}

inline std::optional<DataType> dtype_from_name(std::string_view name) {
    if (name == "int64") return DataType::Int64;
    if (name == "float64") return DataType::Float64;
    if (name == "utf8") return DataType::Utf8;
    return std::nullopt;
}

struct Field {
    std::string name;
    DataType dtype;

    bool operator==(const Field&) const = default;
};

/// Ordered list of named, typed fields. Names are unique and non-empty;
/// field order is significant and preserved by every operation.
class Schema {
public:
    Schema() = default;
    explicit Schema(std::vector<Field> fields) : fields_(std::move(fields)) {
        std::unordered_set<std::string_view> seen;
        for (const auto& f : fields_) {
            if (f.name.empty()) throw Error("schema: empty field name");
            if (!seen.insert(f.name).second)
                throw Error("schema: duplicate field name '" + f.name + "'");
        }
    }

    size_t num_fields() const { return fields_.size(); }
    const Field& field(size_t i) const { return fields_[i]; }
    const std::vector<Field>& fields() const { return fields_; }

    std::optional<size_t> index_of(std::string_view name) const {
        for (size_t i = 0; i < fields_.size(); ++i)
            if (fields_[i].name == name) return i;
        return std::nullopt;
    }

    /// Index of `name`, throwing when absent.
    size_t require(std::string_view name) const {
        if (auto i = index_of(name)) return *i;
        throw Error("schema: unknown column '" + std::string(name) + "'");
    }

    bool operator==(const Schema&) const = default;

private:
    std::vector<Field> fields_;
};

/// Variable-width string storage: offsets[i]..offsets[i+1] delimit row i's
/// bytes. offsets has length rows+1, is non-decreasing, starts at 0 and ends
/// at bytes.size().
struct Utf8Buffer {
    std::vector<uint64_t> offsets{0};
    std::string bytes;

    size_t rows() const { return offsets.size() - 1; }
};

/// One typed value buffer. Columns are immutable after construction and share
/// their storage across copies, so a Column is cheap to pass by value and safe
/// to read from any number of threads.
class Column {
public:
    static Column int64(std::vector<int64_t> values) {
        Column c;
        c.dtype_ = DataType::Int64;
        c.length_ = values.size();
        c.i64_ = std::make_shared<const std::vector<int64_t>>(std::move(values));
        return c;
    }

    static Column float64(std::vector<double> values) {
        Column c;
        c.dtype_ = DataType::Float64;
        c.length_ = values.size();
        c.f64_ = std::make_shared<const std::vector<double>>(std::move(values));
        return c;
    }

    static Column utf8(Utf8Buffer buf) {
        validate_utf8(buf);
        Column c;
        c.dtype_ = DataType::Utf8;
        c.length_ = buf.rows();
        c.utf8_ = std::make_shared<const Utf8Buffer>(std::move(buf));
        return c;
    }

    static Column utf8(const std::vector<std::string>& values) {
        Utf8Buffer buf;
        buf.offsets.reserve(values.size() + 1);
        for (const auto& v : values) {
            buf.bytes += v;
            buf.offsets.push_back(buf.bytes.size());
        }
        return utf8(std::move(buf));
    }

    DataType dtype() const { return dtype_; }
    size_t length() const { return length_; }

    int64_t i64(size_t row) const { return (*i64_)[row]; }
    double f64(size_t row) const { return (*f64_)[row]; }
    std::string_view str(size_t row) const {
        const auto& b = *utf8_;
        return std::string_view(b.bytes).substr(b.offsets[row], b.offsets[row + 1] - b.offsets[row]);
    }

    const std::vector<int64_t>& i64_data() const { return *i64_; }
    const std::vector<double>& f64_data() const { return *f64_; }
    const Utf8Buffer& utf8_data() const { return *utf8_; }

    /// Shared handle to the Float64 buffer; used by batch views to keep the
    /// storage alive without copying values.
    std::shared_ptr<const std::vector<double>> f64_storage() const { return f64_; }

    bool operator==(const Column& other) const {
        if (dtype_ != other.dtype_ || length_ != other.length_) return false;
        switch (dtype_) {
            case DataType::Int64: return *i64_ == *other.i64_;
            case DataType::Float64: {
                // Bitwise comparison so NaN payloads and signed zeros survive
                // roundtrip checks.
                const auto& a = *f64_;
                const auto& b = *other.f64_;
                for (size_t i = 0; i < a.size(); ++i) {
                    if (std::bit_cast<uint64_t>(a[i]) != std::bit_cast<uint64_t>(b[i])) return false;
                }
                return true;
            }
            case DataType::Utf8:
                return utf8_->offsets == other.utf8_->offsets && utf8_->bytes == other.utf8_->bytes;
        }
        return false;
    }

private:
    static void validate_utf8(const Utf8Buffer& buf) {
        if (buf.offsets.empty() || buf.offsets.front() != 0)
            throw Error("utf8 column: offsets must start at 0");
        for (size_t i = 1; i < buf.offsets.size(); ++i)
            if (buf.offsets[i] < buf.offsets[i - 1])
                throw Error("utf8 column: offsets must be non-decreasing");
        if (buf.offsets.back() != buf.bytes.size())
            throw Error("utf8 column: last offset must equal byte buffer length");
    }

    DataType dtype_ = DataType::Int64;
    size_t length_ = 0;
    std::shared_ptr<const std::vector<int64_t>> i64_;
    std::shared_ptr<const std::vector<double>> f64_;
    std::shared_ptr<const Utf8Buffer> utf8_;
};

/// Immutable columnar table: schema plus one column per field, all of equal
/// length.
class Table {
public:
    Table() = default;

    Table(Schema schema, std::vector<Column> columns)
        : schema_(std::move(schema)), columns_(std::move(columns)) {
        if (columns_.size() != schema_.num_fields())
            throw Error("table: column count does not match schema");
        num_rows_ = columns_.empty() ? 0 : columns_[0].length();
        for (size_t i = 0; i < columns_.size(); ++i) {
            if (columns_[i].dtype() != schema_.field(i).dtype)
                throw Error("table: column dtype mismatch for '" + schema_.field(i).name + "'");
            if (columns_[i].length() != num_rows_)
                throw Error("table: ragged columns");
        }
    }

    static Table empty(Schema schema) {
        std::vector<Column> cols;
        cols.reserve(schema.num_fields());
        for (const auto& f : schema.fields()) {
            switch (f.dtype) {
                case DataType::Int64: cols.push_back(Column::int64({})); break;
                case DataType::Float64: cols.push_back(Column::float64({})); break;
                case DataType::Utf8: cols.push_back(Column::utf8(Utf8Buffer{})); break;
            }
        }
        return Table(std::move(schema), std::move(cols));
    }

    const Schema& schema() const { return schema_; }
    size_t num_rows() const { return num_rows_; }
    size_t num_columns() const { return columns_.size(); }
    const Column& column(size_t i) const { return columns_[i]; }
    const Column& column(std::string_view name) const { return columns_[schema_.require(name)]; }

    bool operator==(const Table& other) const {
        return schema_ == other.schema_ && columns_ == other.columns_;
    }

private:
    Schema schema_;
    std::vector<Column> columns_;
    size_t num_rows_ = 0;
};

/// Appends typed cells and finishes into a Column. Used by the CSV reader,
/// the IPC decoder and row-selection operators.
class ColumnBuilder {
public:
    explicit ColumnBuilder(DataType dtype) : dtype_(dtype) {}

    void append_i64(int64_t v) { i64_.push_back(v); }
    void append_f64(double v) { f64_.push_back(v); }
    void append_str(std::string_view v) {
        utf8_.bytes.append(v);
        utf8_.offsets.push_back(utf8_.bytes.size());
    }

    /// Copies row `row` of `src` (same dtype).
    void append_from(const Column& src, size_t row) {
        switch (dtype_) {
            case DataType::Int64: append_i64(src.i64(row)); break;
            case DataType::Float64: append_f64(src.f64(row)); break;
            case DataType::Utf8: append_str(src.str(row)); break;
        }
    }

    Column finish() {
        switch (dtype_) {
            case DataType::Int64: return Column::int64(std::move(i64_));
            case DataType::Float64: return Column::float64(std::move(f64_));
            case DataType::Utf8: return Column::utf8(std::move(utf8_));
        }
        throw Error("unreachable dtype");
    }

private:
    DataType dtype_;
    std::vector<int64_t> i64_;
    std::vector<double> f64_;
    Utf8Buffer utf8_;
};

}  // namespace drc
