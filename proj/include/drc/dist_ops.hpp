#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "drc/fabric.hpp"
#include "drc/table.hpp"
#include "drc/table_io.hpp"
#include "drc/table_ops.hpp"

namespace drc {

// Distributed table operators. Partitions travel between ranks as IPC-encoded
// tables in data-plane messages; tags 0x0100-0x01FF are reserved here.

namespace dist_tags {
inline constexpr uint64_t kShuffle = 0x0100;
inline constexpr uint64_t kGather = 0x0101;
inline constexpr uint64_t kSortSamples = 0x0110;
inline constexpr uint64_t kSortSplitters = 0x0111;
inline constexpr uint64_t kSortExchange = 0x0112;
}  // namespace dist_tags

/// FNV-1a 64-bit over a byte sequence. The partitioning hash of the shuffle;
/// fixed constants make partition assignment reproducible everywhere.
inline uint64_t fnv1a64(std::string_view bytes) {
    uint64_t h = 14695981039346656037ull;  // offset basis
    for (char c : bytes) {
        h ^= static_cast<uint8_t>(c);
        h *= 1099511628211ull;  // prime
    }
    return h;
}

/// Routing rule for hash shuffles: partition = FNV-1a(canonical key bytes)
/// mod num_partitions. Equal key tuples always land together.
struct PartitionPlan {
    uint32_t num_partitions;
    std::vector<std::string> key_columns;

    uint32_t partition_of(const Table& table, size_t row,
                          std::span<const size_t> key_cols) const {
        return static_cast<uint32_t>(fnv1a64(canonical_key_bytes(table, row, key_cols)) %
                                     num_partitions);
    }
};

/// One rank's view of a logically global table: the rank-order concatenation
/// of all local partitions. Schemas are verified equal across ranks at
/// construction time.
struct GlobalTable {
    Communicator comm;
    Table local;
};

/// Collective. Checks that every rank holds the same schema and returns the
/// GlobalTable handle for this rank.
inline GlobalTable make_global_table(const Communicator& comm, Table local) {
    Bytes schema_bytes = encode_ipc(Table::empty(local.schema()));
    Bytes root_schema = comm.broadcast(0, schema_bytes);
    double ok = root_schema == schema_bytes ? 1.0 : 0.0;
    auto all_ok = comm.allreduce_f64(std::vector<double>{ok}, ReduceOp::Min);
    if (all_ok[0] < 1.0) throw Error("global table: schema mismatch across ranks");
    return GlobalTable{comm, std::move(local)};
}

namespace dist_detail {

// Table exchanges run on the dist_ops tag space (0x0100-0x01FF) with the
// same deterministic schedules as the fabric collectives.

inline std::vector<Bytes> exchange_all_to_all(const Communicator& comm,
                                              const std::vector<Bytes>& outgoing, uint64_t tag) {
    for (uint32_t dst = 0; dst < comm.size(); ++dst)
        if (dst != comm.rank()) comm.send(dst, tag, outgoing[dst]);
    std::vector<Bytes> incoming(comm.size());
    incoming[comm.rank()] = outgoing[comm.rank()];
    for (uint32_t src = 0; src < comm.size(); ++src)
        if (src != comm.rank()) incoming[src] = comm.recv(src, tag);
    return incoming;
}

inline std::optional<std::vector<Bytes>> gather_tagged(const Communicator& comm,
                                                       std::span<const uint8_t> payload,
                                                       uint32_t root, uint64_t tag) {
    if (comm.rank() != root) {
        comm.send(root, tag, payload);
        return std::nullopt;
    }
    std::vector<Bytes> out(comm.size());
    for (uint32_t r = 0; r < comm.size(); ++r)
        out[r] = r == root ? Bytes(payload.begin(), payload.end()) : comm.recv(r, tag);
    return out;
}

inline Bytes broadcast_tagged(const Communicator& comm, uint32_t root,
                              std::span<const uint8_t> payload, uint64_t tag) {
    if (comm.rank() == root) {
        for (uint32_t r = 0; r < comm.size(); ++r)
            if (r != root) comm.send(r, tag, payload);
        return Bytes(payload.begin(), payload.end());
    }
    return comm.recv(root, tag);
}

}  // namespace dist_detail

/// Splits `table` into plan.num_partitions tables by the hash rule. Row order
/// within each partition follows the input order.
inline std::vector<Table> hash_partition(const Table& table, const PartitionPlan& plan) {
    if (plan.num_partitions == 0) throw Error("hash_partition: zero partitions");
    auto key_cols = key_indices(table, plan.key_columns);
    std::vector<std::vector<uint64_t>> rows(plan.num_partitions);
    for (size_t r = 0; r < table.num_rows(); ++r)
        rows[plan.partition_of(table, r, key_cols)].push_back(r);
    std::vector<Table> out;
    out.reserve(plan.num_partitions);
    for (const auto& idx : rows) out.push_back(take_rows(table, idx));
    return out;
}

/// Collective all-to-all redistribution: rank i's new local table is the
/// concatenation of partition[i] from every source rank, in source-rank
/// order.
inline GlobalTable shuffle(const GlobalTable& gt, const PartitionPlan& plan) {
    const Communicator& comm = gt.comm;
    if (plan.num_partitions != comm.size())
        throw Error("shuffle: plan partitions != communicator size");
    auto parts = hash_partition(gt.local, plan);
    std::vector<Bytes> outgoing(comm.size());
    for (uint32_t p = 0; p < comm.size(); ++p) outgoing[p] = encode_ipc(parts[p]);
    auto incoming = dist_detail::exchange_all_to_all(comm, outgoing, dist_tags::kShuffle);
    std::vector<Table> received;
    received.reserve(incoming.size());
    for (const auto& b : incoming) received.push_back(decode_ipc(b));
    return GlobalTable{comm, concat(received)};
}

namespace dist_detail {

inline bool has_nan_keys(const Table& t, std::span<const std::string> on) {
    for (size_t c : key_indices(t, on)) {
        if (t.schema().field(c).dtype != DataType::Float64) continue;
        for (double v : t.column(c).f64_data())
            if (std::isnan(v)) return true;
    }
    return false;
}

}  // namespace dist_detail

/// Collective inner join: both sides are shuffled by the key columns so equal
/// keys co-locate, then joined locally per rank. NaN join keys are rejected
/// collectively (every rank throws).
inline GlobalTable dist_join(const GlobalTable& left, const GlobalTable& right,
                             const std::vector<std::string>& on) {
    if (left.comm.comm_id() != right.comm.comm_id())
        throw Error("dist_join: sides on different communicators");
    double ok = dist_detail::has_nan_keys(left.local, on) ||
                        dist_detail::has_nan_keys(right.local, on)
                    ? 0.0
                    : 1.0;
    if (left.comm.allreduce_f64(std::vector<double>{ok}, ReduceOp::Min)[0] < 1.0)
        throw Error("dist_join: NaN join key");
    PartitionPlan plan{left.comm.size(), on};
    GlobalTable l = shuffle(left, plan);
    GlobalTable r = shuffle(right, plan);
    return GlobalTable{left.comm, local_hash_join(l.local, r.local, on)};
}

namespace dist_detail {

/// Regular sample positions floor(k * n / s) for k = 0..s-1 of the locally
/// sorted partition, s = min(n, 32).
inline std::vector<uint64_t> sample_positions(size_t local_rows) {
    size_t s = std::min<size_t>(local_rows, 32);
    std::vector<uint64_t> pos(s);
    for (size_t k = 0; k < s; ++k) pos[k] = static_cast<uint64_t>(k * local_rows / s);
    return pos;
}

}  // namespace dist_detail

/// Collective sample sort. Each rank sorts locally, regular samples go to
/// rank 0, which sorts them and picks P-1 splitters at indices
/// ceil(k*S/P)-1; rows route to the first partition whose splitter is >= the
/// row key (last partition otherwise) via all_to_all, and each rank sorts
/// what it received. The rank-order concatenation of the outputs is globally
/// sorted and row-conserving.
inline GlobalTable dist_sort(const GlobalTable& gt, const std::vector<std::string>& keys,
                             bool ascending = true) {
    const Communicator& comm = gt.comm;
    const uint32_t P = comm.size();
    Table sorted = local_sort(gt.local, keys, ascending);
    if (P == 1) return GlobalTable{comm, std::move(sorted)};

    auto key_cols = key_indices(sorted, keys);

    // Project sampled key rows and gather them at rank 0.
    Table samples = take_rows(sorted, dist_detail::sample_positions(sorted.num_rows()));
    std::vector<Field> key_fields;
    for (size_t c : key_cols) key_fields.push_back(sorted.schema().field(c));
    std::vector<Column> key_col_data;
    for (size_t c = 0; c < key_cols.size(); ++c) key_col_data.push_back(samples.column(key_cols[c]));
    Table sample_keys(Schema(key_fields), std::move(key_col_data));

    auto gathered = dist_detail::gather_tagged(comm, encode_ipc(sample_keys), 0,
                                               dist_tags::kSortSamples);
    Bytes splitter_bytes;
    if (comm.rank() == 0) {
        std::vector<Table> parts;
        for (const auto& b : *gathered) parts.push_back(decode_ipc(b));
        Table all_samples = concat(parts);
        std::vector<std::string> key_names;
        for (const auto& f : all_samples.schema().fields()) key_names.push_back(f.name);
        Table sorted_samples = local_sort(all_samples, key_names, ascending);
        size_t S = sorted_samples.num_rows();
        std::vector<uint64_t> splitter_idx;
        if (S > 0) {
            for (uint32_t k = 1; k < P; ++k) {
                uint64_t idx = (static_cast<uint64_t>(k) * S + P - 1) / P;  // ceil(k*S/P)
                splitter_idx.push_back(idx - 1);
            }
        }
        splitter_bytes = dist_detail::broadcast_tagged(
            comm, 0, encode_ipc(take_rows(sorted_samples, splitter_idx)),
            dist_tags::kSortSplitters);
    } else {
        splitter_bytes = dist_detail::broadcast_tagged(comm, 0, {}, dist_tags::kSortSplitters);
    }
    Table splitters = decode_ipc(splitter_bytes);

    // Range partition the locally sorted rows. Ranks with no splitters (all
    // partitions empty) route everything to partition 0, conserving rows.
    std::vector<size_t> splitter_cols(splitters.num_columns());
    for (size_t i = 0; i < splitter_cols.size(); ++i) splitter_cols[i] = i;
    std::vector<std::vector<uint64_t>> route(P);
    for (size_t r = 0; r < sorted.num_rows(); ++r) {
        uint32_t dest = P - 1;
        for (uint32_t i = 0; i < splitters.num_rows(); ++i) {
            int c = compare_key_rows(sorted, r, key_cols, splitters, i, splitter_cols);
            bool within = ascending ? c <= 0 : c >= 0;
            if (within) {
                dest = i;
                break;
            }
        }
        if (splitters.num_rows() == 0) dest = 0;
        route[dest].push_back(r);
    }

    std::vector<Bytes> outgoing(P);
    for (uint32_t p = 0; p < P; ++p)
        outgoing[p] = encode_ipc(take_rows(sorted, route[p]));
    auto incoming = dist_detail::exchange_all_to_all(comm, outgoing, dist_tags::kSortExchange);
    std::vector<Table> received;
    received.reserve(P);
    for (const auto& b : incoming) received.push_back(decode_ipc(b));
    return GlobalTable{comm, local_sort(concat(received), keys, ascending)};
}

/// Collective gather of all partitions to `root`, concatenated in rank order.
/// Non-root ranks return std::nullopt.
inline std::optional<Table> dist_gather_table(const GlobalTable& gt, uint32_t root) {
    auto gathered = dist_detail::gather_tagged(gt.comm, encode_ipc(gt.local), root,
                                               dist_tags::kGather);
    if (!gathered) return std::nullopt;
    std::vector<Table> parts;
    parts.reserve(gathered->size());
    for (const auto& b : *gathered) parts.push_back(decode_ipc(b));
    return concat(parts);
}

}  // namespace drc
