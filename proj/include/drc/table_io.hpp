#pragma once

#include <cerrno>
#include <cstdlib>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "drc/table.hpp"
#include "drc/wire.hpp"

namespace drc {

// ---------------------------------------------------------------------------
// Binary IPC encoding
//
// Layout (all integers little-endian):
//   magic "DRC1"
//   u32 field count
//   per field: u16 name length | name bytes | u8 dtype tag (0/1/2)
//   u64 num_rows
//   per column, schema order:
//     Int64/Float64: num_rows x 8-byte LE values
//     Utf8:          (num_rows+1) x u64 LE offsets, then the byte buffer
// ---------------------------------------------------------------------------

inline constexpr char kIpcMagic[4] = {'D', 'R', 'C', '1'};

inline Bytes encode_ipc(const Table& table) {
    ByteWriter w;
    w.raw(kIpcMagic, 4);
    w.u32(static_cast<uint32_t>(table.schema().num_fields()));
    for (const auto& f : table.schema().fields()) {
        w.u16(static_cast<uint16_t>(f.name.size()));
        w.str(f.name);
        w.u8(static_cast<uint8_t>(f.dtype));
    }
    w.u64(table.num_rows());
    for (size_t c = 0; c < table.num_columns(); ++c) {
        const Column& col = table.column(c);
        switch (col.dtype()) {
            case DataType::Int64:
                for (int64_t v : col.i64_data()) w.i64(v);
                break;
            case DataType::Float64:
                for (double v : col.f64_data()) w.f64(v);
                break;
            case DataType::Utf8: {
                const auto& buf = col.utf8_data();
                for (uint64_t off : buf.offsets) w.u64(off);
                w.str(buf.bytes);
                break;
            }
        }
    }
    return w.take();
}

inline Table decode_ipc(std::span<const uint8_t> bytes) {
    ByteReader r(bytes);
    auto magic = r.raw(4);
    if (std::memcmp(magic.data(), kIpcMagic, 4) != 0) throw DecodeError("bad magic");

    uint32_t nfields = r.u32();
    std::vector<Field> fields;
    fields.reserve(nfields);
    for (uint32_t i = 0; i < nfields; ++i) {
        uint16_t name_len = r.u16();
        std::string name = r.str(name_len);
        uint8_t tag = r.u8();
        if (tag > 2) throw DecodeError("unknown dtype tag");
        fields.push_back({std::move(name), static_cast<DataType>(tag)});
    }
    Schema schema(std::move(fields));

    uint64_t num_rows = r.u64();
    std::vector<Column> cols;
    cols.reserve(schema.num_fields());
    for (const auto& f : schema.fields()) {
        switch (f.dtype) {
            case DataType::Int64: {
                std::vector<int64_t> v(num_rows);
                for (uint64_t i = 0; i < num_rows; ++i) v[i] = r.i64();
                cols.push_back(Column::int64(std::move(v)));
                break;
            }
            case DataType::Float64: {
                std::vector<double> v(num_rows);
                for (uint64_t i = 0; i < num_rows; ++i) v[i] = r.f64();
                cols.push_back(Column::float64(std::move(v)));
                break;
            }
            case DataType::Utf8: {
                Utf8Buffer buf;
                buf.offsets.resize(num_rows + 1);
                for (uint64_t i = 0; i <= num_rows; ++i) buf.offsets[i] = r.u64();
                if (buf.offsets.front() != 0) throw DecodeError("utf8 offsets must start at 0");
                for (uint64_t i = 1; i <= num_rows; ++i)
                    if (buf.offsets[i] < buf.offsets[i - 1])
                        throw DecodeError("utf8 offsets must be non-decreasing");
                buf.bytes = r.str(buf.offsets.back());
                cols.push_back(Column::utf8(std::move(buf)));
                break;
            }
        }
    }
    if (!r.done()) throw DecodeError("trailing bytes after table");
    return Table(std::move(schema), std::move(cols));
}

// ---------------------------------------------------------------------------
// CSV ingestion
//
// Dialect: comma separator, \n or \r\n line ends, optional double-quote
// quoting with "" as the escape. Embedded newlines and empty fields are
// rejected (no nulls).
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line, size_t line_no) {
    std::vector<std::string> out;
    std::string cur;
    size_t i = 0;
    bool any = false;
    while (true) {
        cur.clear();
        if (i < line.size() && line[i] == '"') {
            ++i;
            bool closed = false;
            while (i < line.size()) {
                if (line[i] == '"') {
                    if (i + 1 < line.size() && line[i + 1] == '"') {
                        cur += '"';
                        i += 2;
                    } else {
                        ++i;
                        closed = true;
                        break;
                    }
                } else {
                    cur += line[i++];
                }
            }
            if (!closed)
                throw Error("csv: unterminated quote at line " + std::to_string(line_no));
            if (i < line.size() && line[i] != ',')
                throw Error("csv: garbage after closing quote at line " + std::to_string(line_no));
        } else {
            while (i < line.size() && line[i] != ',') {
                if (line[i] == '"')
                    throw Error("csv: stray quote at line " + std::to_string(line_no));
                cur += line[i++];
            }
        }
        out.push_back(cur);
        any = true;
        if (i >= line.size()) break;
        ++i;  // skip comma; a trailing comma yields a (rejected) empty field
    }
    (void)any;
    return out;
}

inline int64_t parse_i64(const std::string& tok, size_t line_no) {
    if (tok.empty())
        throw Error("csv: empty field at line " + std::to_string(line_no));
    errno = 0;
    char* end = nullptr;
    long long v = std::strtoll(tok.c_str(), &end, 10);
    if (errno == ERANGE || end != tok.c_str() + tok.size() || end == tok.c_str())
        throw Error("csv: bad int64 '" + tok + "' at line " + std::to_string(line_no));
    return static_cast<int64_t>(v);
}

inline double parse_f64(const std::string& tok, size_t line_no) {
    if (tok.empty())
        throw Error("csv: empty field at line " + std::to_string(line_no));
    errno = 0;
    char* end = nullptr;
    double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size() || end == tok.c_str())
        throw Error("csv: bad float64 '" + tok + "' at line " + std::to_string(line_no));
    return v;
}

}  // namespace detail

inline Table parse_csv(std::string_view text, const Schema& schema, bool has_header) {
    if (schema.num_fields() == 0) throw Error("csv: schema must have at least one field");

    std::vector<ColumnBuilder> builders;
    builders.reserve(schema.num_fields());
    for (const auto& f : schema.fields()) builders.emplace_back(f.dtype);

    size_t line_no = 0;
    size_t pos = 0;
    bool skipped_header = !has_header;
    while (pos <= text.size()) {
        if (pos == text.size()) break;
        size_t nl = text.find('\n', pos);
        std::string_view line =
            nl == std::string_view::npos ? text.substr(pos) : text.substr(pos, nl - pos);
        pos = nl == std::string_view::npos ? text.size() : nl + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;  // one row per non-empty data line
        if (!skipped_header) {
            skipped_header = true;
            continue;
        }
        auto fieldsv = detail::split_csv_line(line, line_no);
        if (fieldsv.size() != schema.num_fields())
            throw Error("csv: field count mismatch at line " + std::to_string(line_no) +
                        " (got " + std::to_string(fieldsv.size()) + ", want " +
                        std::to_string(schema.num_fields()) + ")");
        for (size_t c = 0; c < fieldsv.size(); ++c) {
            switch (schema.field(c).dtype) {
                case DataType::Int64: builders[c].append_i64(detail::parse_i64(fieldsv[c], line_no)); break;
                case DataType::Float64: builders[c].append_f64(detail::parse_f64(fieldsv[c], line_no)); break;
                case DataType::Utf8:
                    if (fieldsv[c].empty())
                        throw Error("csv: empty field at line " + std::to_string(line_no));
                    builders[c].append_str(fieldsv[c]);
                    break;
            }
        }
    }

    std::vector<Column> cols;
    cols.reserve(builders.size());
    for (auto& b : builders) cols.push_back(b.finish());
    return Table(schema, std::move(cols));
}

}  // namespace drc
