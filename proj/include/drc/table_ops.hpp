#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "drc/table.hpp"

namespace drc {

// ---------------------------------------------------------------------------
// Key encoding and comparison
// ---------------------------------------------------------------------------

/// Resolves key column names to indices, checking existence.
inline std::vector<size_t> key_indices(const Table& table, std::span<const std::string> keys) {
    std::vector<size_t> idx;
    idx.reserve(keys.size());
    for (const auto& k : keys) idx.push_back(table.schema().require(k));
    return idx;
}

/// Appends the canonical encoding of one cell to `out`: Int64 and Float64 as
/// their 8 LE bytes (Float64 by bit pattern, -0.0 normalized to +0.0 so hash
/// and equality agree), Utf8 as raw bytes. 0x00 in data is escaped as
/// 0x00 0xFF, so a bare 0x00 can separate fields unambiguously.
inline void append_canonical_cell(const Column& col, size_t row, std::string& out) {
    auto put_escaped = [&out](const uint8_t* p, size_t n) {
        for (size_t i = 0; i < n; ++i) {
            out.push_back(static_cast<char>(p[i]));
            if (p[i] == 0x00) out.push_back(static_cast<char>(0xFF));
        }
    };
    switch (col.dtype()) {
        case DataType::Int64: {
            uint64_t v = static_cast<uint64_t>(col.i64(row));
            uint8_t b[8];
            for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>((v >> (8 * i)) & 0xFF);
            put_escaped(b, 8);
            break;
        }
        case DataType::Float64: {
            double d = col.f64(row);
            if (d == 0.0) d = 0.0;  // collapse -0.0
            uint64_t v = std::bit_cast<uint64_t>(d);
            uint8_t b[8];
            for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>((v >> (8 * i)) & 0xFF);
            put_escaped(b, 8);
            break;
        }
        case DataType::Utf8: {
            auto s = col.str(row);
            put_escaped(reinterpret_cast<const uint8_t*>(s.data()), s.size());
            break;
        }
    }
}

/// Canonical byte string of the key tuple at `row`: escaped fields separated
/// by a bare 0x00.
inline std::string canonical_key_bytes(const Table& table, size_t row,
                                       std::span<const size_t> key_cols) {
    std::string out;
    for (size_t i = 0; i < key_cols.size(); ++i) {
        if (i > 0) out.push_back('\0');
        append_canonical_cell(table.column(key_cols[i]), row, out);
    }
    return out;
}

/// Canonical byte string of a full row (all columns); handy for multiset
/// comparisons in oracles and conservation checks.
inline std::string canonical_row_bytes(const Table& table, size_t row) {
    std::string out;
    for (size_t c = 0; c < table.num_columns(); ++c) {
        if (c > 0) out.push_back('\0');
        append_canonical_cell(table.column(c), row, out);
    }
    return out;
}

namespace detail {

/// Float64 ordering: total, with NaN greater than everything (and equal to
/// itself); -0.0 and 0.0 compare equal.
inline int cmp_f64(double a, double b) {
    bool na = std::isnan(a), nb = std::isnan(b);
    if (na || nb) {
        if (na && nb) return 0;
        return na ? 1 : -1;
    }
    if (a < b) return -1;
    if (a > b) return 1;
    return 0;
}

inline int cmp_cell(const Column& col, size_t ra, size_t rb) {
    switch (col.dtype()) {
        case DataType::Int64: {
            int64_t a = col.i64(ra), b = col.i64(rb);
            return a < b ? -1 : (a > b ? 1 : 0);
        }
        case DataType::Float64: return cmp_f64(col.f64(ra), col.f64(rb));
        case DataType::Utf8: {
            auto a = col.str(ra), b = col.str(rb);
            int c = a.compare(b);
            return c < 0 ? -1 : (c > 0 ? 1 : 0);
        }
    }
    return 0;
}

}  // namespace detail

/// Lexicographic comparison of key tuples across two tables with identical
/// key column dtypes. Returns <0, 0, >0.
inline int compare_key_rows(const Table& ta, size_t ra, std::span<const size_t> ka,
                            const Table& tb, size_t rb, std::span<const size_t> kb) {
    for (size_t i = 0; i < ka.size(); ++i) {
        const Column& ca = ta.column(ka[i]);
        const Column& cb = tb.column(kb[i]);
        int c;
        switch (ca.dtype()) {
            case DataType::Int64: {
                int64_t a = ca.i64(ra), b = cb.i64(rb);
                c = a < b ? -1 : (a > b ? 1 : 0);
                break;
            }
            case DataType::Float64: c = detail::cmp_f64(ca.f64(ra), cb.f64(rb)); break;
            case DataType::Utf8: {
                int r = ca.str(ra).compare(cb.str(rb));
                c = r < 0 ? -1 : (r > 0 ? 1 : 0);
                break;
            }
            default: c = 0;
        }
        if (c != 0) return c;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Local operators
// ---------------------------------------------------------------------------

/// Selects rows by index, in index order; duplicates allowed.
inline Table take_rows(const Table& table, std::span<const uint64_t> indices) {
    for (uint64_t i : indices)
        if (i >= table.num_rows())
            throw Error("take_rows: index " + std::to_string(i) + " out of range");
    std::vector<Column> cols;
    cols.reserve(table.num_columns());
    for (size_t c = 0; c < table.num_columns(); ++c) {
        ColumnBuilder b(table.schema().field(c).dtype);
        for (uint64_t i : indices) b.append_from(table.column(c), i);
        cols.push_back(b.finish());
    }
    return Table(table.schema(), std::move(cols));
}

/// Stable sort by the given key columns. `ascending=false` reverses the key
/// order but keeps the tie-break stability.
inline Table local_sort(const Table& table, std::span<const std::string> keys, bool ascending = true) {
    auto kidx = key_indices(table, keys);
    std::vector<uint64_t> order(table.num_rows());
    std::iota(order.begin(), order.end(), uint64_t{0});
    std::stable_sort(order.begin(), order.end(), [&](uint64_t a, uint64_t b) {
        int c = compare_key_rows(table, a, kidx, table, b, kidx);
        return ascending ? c < 0 : c > 0;
    });
    return take_rows(table, order);
}

/// Inner hash join. Output schema is the left fields followed by the right
/// non-key fields; output rows are, for each left row in order, the matching
/// right rows in order. NaN join keys are rejected (their hash and equality
/// semantics disagree).
inline Table local_hash_join(const Table& left, const Table& right,
                             std::span<const std::string> on) {
    if (on.empty()) throw Error("join: empty key list");
    auto lk = key_indices(left, on);
    auto rk = key_indices(right, on);
    for (size_t i = 0; i < on.size(); ++i) {
        if (left.schema().field(lk[i]).dtype != right.schema().field(rk[i]).dtype)
            throw Error("join: key dtype mismatch for '" + on[i] + "'");
    }
    auto reject_nan = [&](const Table& t, std::span<const size_t> ks) {
        for (size_t c : ks) {
            if (t.schema().field(c).dtype != DataType::Float64) continue;
            for (double v : t.column(c).f64_data())
                if (std::isnan(v)) throw Error("join: NaN join key");
        }
    };
    reject_nan(left, lk);
    reject_nan(right, rk);

    // Output schema: left fields, then right non-key fields.
    std::vector<Field> out_fields = left.schema().fields();
    std::vector<size_t> right_keep;
    for (size_t c = 0; c < right.num_columns(); ++c) {
        if (std::find(rk.begin(), rk.end(), c) != rk.end()) continue;
        right_keep.push_back(c);
        out_fields.push_back(right.schema().field(c));
    }
    Schema out_schema(std::move(out_fields));  // throws on duplicate names

    // Build on the right, probe the left in order.
    std::unordered_map<std::string, std::vector<uint64_t>> build;
    build.reserve(right.num_rows() * 2);
    for (size_t r = 0; r < right.num_rows(); ++r)
        build[canonical_key_bytes(right, r, rk)].push_back(r);

    std::vector<uint64_t> left_rows, right_rows;
    for (size_t l = 0; l < left.num_rows(); ++l) {
        std::string key = canonical_key_bytes(left, l, lk);
        auto it = build.find(key);
        if (it == build.end()) continue;
        for (uint64_t r : it->second) {
            left_rows.push_back(l);
            right_rows.push_back(r);
        }
    }

    std::vector<Column> cols;
    cols.reserve(out_schema.num_fields());
    for (size_t c = 0; c < left.num_columns(); ++c) {
        ColumnBuilder b(left.schema().field(c).dtype);
        for (uint64_t r : left_rows) b.append_from(left.column(c), r);
        cols.push_back(b.finish());
    }
    for (size_t c : right_keep) {
        ColumnBuilder b(right.schema().field(c).dtype);
        for (uint64_t r : right_rows) b.append_from(right.column(c), r);
        cols.push_back(b.finish());
    }
    return Table(std::move(out_schema), std::move(cols));
}

/// Concatenates tables with identical schemas, in list order.
inline Table concat(std::span<const Table> tables) {
    if (tables.empty()) throw Error("concat: empty table list");
    const Schema& schema = tables[0].schema();
    for (const auto& t : tables)
        if (!(t.schema() == schema)) throw Error("concat: schema mismatch");
    std::vector<Column> cols;
    cols.reserve(schema.num_fields());
    for (size_t c = 0; c < schema.num_fields(); ++c) {
        ColumnBuilder b(schema.field(c).dtype);
        for (const auto& t : tables)
            for (size_t r = 0; r < t.num_rows(); ++r) b.append_from(t.column(c), r);
        cols.push_back(b.finish());
    }
    return Table(schema, std::move(cols));
}

/// Contiguous row range [begin, end) as a new table.
inline Table slice_rows(const Table& table, size_t begin, size_t end) {
    if (begin > end || end > table.num_rows()) throw Error("slice_rows: bad range");
    std::vector<uint64_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    return take_rows(table, idx);
}

/// Splits a table into `parts` contiguous chunks whose sizes differ by at
/// most one (the first `num_rows % parts` chunks get the extra row).
inline std::vector<Table> split_rows(const Table& table, size_t parts) {
    if (parts == 0) throw Error("split_rows: parts must be >= 1");
    std::vector<Table> out;
    out.reserve(parts);
    size_t n = table.num_rows();
    size_t base = n / parts, extra = n % parts;
    size_t pos = 0;
    for (size_t p = 0; p < parts; ++p) {
        size_t len = base + (p < extra ? 1 : 0);
        out.push_back(slice_rows(table, pos, pos + len));
        pos += len;
    }
    return out;
}

}  // namespace drc
