#pragma once

#include <atomic>
#include <condition_variable>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "drc/rng.hpp"
#include "drc/table.hpp"

namespace drc {

// The bridge between partitioned tables and the learner: a distributed
// sampler assigns each rank a distinct index slice, and a loader turns the
// slice into (features, labels) batches that are views into the table's
// column storage. Batch construction allocates index bookkeeping only; cell
// values are never copied.

/// Float64 feature/label selection over a table. Columns must exist, be
/// Float64, and the label must not appear among the features.
struct DatasetView {
    Table table;
    std::vector<std::string> feature_columns;
    std::string label_column;

    DatasetView(Table t, std::vector<std::string> features, std::string label)
        : table(std::move(t)), feature_columns(std::move(features)), label_column(std::move(label)) {
        for (const auto& name : feature_columns) {
            if (table.schema().field(table.schema().require(name)).dtype != DataType::Float64)
                throw Error("dataset view: feature column '" + name + "' must be float64");
            if (name == label_column)
                throw Error("dataset view: '" + name + "' used as both feature and label");
        }
        if (table.schema().field(table.schema().require(label_column)).dtype != DataType::Float64)
            throw Error("dataset view: label column '" + label_column + "' must be float64");
    }
};

/// Distributed-sampler rule: which slice of [0, n_rows) this rank iterates.
struct SamplerSpec {
    uint64_t n_rows = 0;
    uint32_t world_size = 1;
    uint32_t rank = 0;
    bool shuffle = false;
    uint64_t seed = 0;
};

/// Index list for `spec.rank` at `epoch`. The base order is the identity, or
/// the Fisher-Yates permutation under SplitMix64(seed ^ epoch) when
/// shuffling; it is padded to ceil(n/P)*P by wrapping to the front (the only
/// source of duplicate indices), and rank r takes the r-th contiguous block.
inline std::vector<uint64_t> sampler_indices(const SamplerSpec& spec, uint64_t epoch = 0) {
    if (spec.n_rows == 0) throw Error("sampler: empty dataset");
    if (spec.world_size < 1 || spec.rank >= spec.world_size)
        throw Error("sampler: bad rank/world_size");
    const uint64_t n = spec.n_rows;
    const uint64_t P = spec.world_size;
    const uint64_t per_rank = (n + P - 1) / P;

    std::vector<uint64_t> base;
    if (spec.shuffle) {
        base = fisher_yates_permutation(n, spec.seed ^ epoch);
    } else {
        base.resize(n);
        std::iota(base.begin(), base.end(), uint64_t{0});
    }
    std::vector<uint64_t> mine(per_rank);
    for (uint64_t i = 0; i < per_rank; ++i)
        mine[i] = base[(uint64_t(spec.rank) * per_rank + i) % n];
    return mine;
}

/// Optional lazy per-batch transform: value * scale + offset, applied to
/// features at read time (the preprocessing hook; storage stays untouched).
struct AffineTransform {
    double scale = 1.0;
    double offset = 0.0;
};

struct LoaderConfig {
    uint32_t batch_size = 1;
    bool drop_last = false;
    uint32_t prefetch_depth = 0;
    uint32_t loader_workers = 1;
    std::optional<AffineTransform> transform;
};

/// Copy instrumentation: the loader counts bookkeeping allocations (index
/// vectors) and any column data bytes copied. The latter must stay zero.
struct LoaderStats {
    uint64_t column_bytes_copied = 0;
    uint64_t bookkeeping_bytes = 0;
};

namespace bridge_detail {

/// Column pointers + storage keepalive shared by all batches of one loader.
struct ViewCore {
    std::vector<const double*> feature_ptrs;
    const double* label_ptr = nullptr;
    std::vector<std::shared_ptr<const std::vector<double>>> keepalive;
    AffineTransform transform;  // identity unless configured
};

}  // namespace bridge_detail

/// One mini-batch: row views into the dataset's columns. feature(i, k) and
/// label(i) read through to the table storage of row global_indices()[i].
class Batch {
public:
    Batch(std::shared_ptr<const bridge_detail::ViewCore> core, std::vector<uint64_t> indices)
        : core_(std::move(core)), indices_(std::move(indices)) {}

    size_t size() const { return indices_.size(); }
    size_t feature_width() const { return core_->feature_ptrs.size(); }
    std::span<const uint64_t> global_indices() const { return indices_; }

    double feature(size_t row, size_t col) const {
        const auto& t = core_->transform;
        return core_->feature_ptrs[col][indices_[row]] * t.scale + t.offset;
    }
    double label(size_t row) const { return core_->label_ptr[indices_[row]]; }

private:
    std::shared_ptr<const bridge_detail::ViewCore> core_;
    std::vector<uint64_t> indices_;
};

/// Iterates one rank's sampler slice in batches. `loader_workers` threads
/// build batches ahead of the consumer into a bounded reorder stage; batches
/// are always released in ticket order, so the sequence is a pure function of
/// (view, spec, cfg, epoch) no matter how many workers run or how they
/// interleave.
class BatchLoader {
public:
    BatchLoader(const DatasetView& view, const SamplerSpec& spec, const LoaderConfig& cfg)
        : spec_(spec), cfg_(cfg) {
        if (cfg_.batch_size < 1) throw Error("loader: batch_size must be >= 1");
        if (cfg_.loader_workers < 1) throw Error("loader: loader_workers must be >= 1");
        if (spec_.n_rows != view.table.num_rows())
            throw Error("loader: sampler n_rows != table rows");

        auto core = std::make_shared<bridge_detail::ViewCore>();
        for (const auto& name : view.feature_columns) {
            const Column& col = view.table.column(name);
            core->feature_ptrs.push_back(col.f64_data().data());
            core->keepalive.push_back(col.f64_storage());
        }
        const Column& label = view.table.column(view.label_column);
        core->label_ptr = label.f64_data().data();
        core->keepalive.push_back(label.f64_storage());
        if (cfg_.transform) core->transform = *cfg_.transform;
        core_ = std::move(core);

        start_epoch(0);
    }

    ~BatchLoader() { stop_workers(); }

    BatchLoader(const BatchLoader&) = delete;
    BatchLoader& operator=(const BatchLoader&) = delete;

    uint64_t epoch() const { return epoch_; }
    size_t batches_per_epoch() const { return num_batches_; }

    LoaderStats stats() const {
        std::lock_guard<std::mutex> lock(mu_);
        return stats_;
    }

    /// Next batch in sampler order, or nullopt once the epoch is exhausted.
    std::optional<Batch> next_batch() {
        std::unique_lock<std::mutex> lock(mu_);
        if (next_consume_ >= num_batches_) return std::nullopt;
        cons_cv_.wait(lock, [&] { return ready_.count(next_consume_) > 0; });
        auto node = ready_.extract(next_consume_);
        Batch out = std::move(node.mapped());
        ++next_consume_;
        prod_cv_.notify_all();
        return out;
    }

    /// Restarts iteration as the next epoch; with shuffling on, the
    /// permutation is re-derived from (seed, epoch).
    void reset() {
        stop_workers();
        start_epoch(epoch_ + 1);
    }

private:
    void start_epoch(uint64_t epoch) {
        epoch_ = epoch;
        indices_ = sampler_indices(spec_, epoch_);
        {
            std::lock_guard<std::mutex> lock(mu_);
            stats_.bookkeeping_bytes += indices_.size() * sizeof(uint64_t);
        }
        size_t full = indices_.size() / cfg_.batch_size;
        size_t rem = indices_.size() % cfg_.batch_size;
        num_batches_ = full + (rem > 0 && !cfg_.drop_last ? 1 : 0);
        next_ticket_ = 0;
        next_consume_ = 0;
        ready_.clear();
        stopping_ = false;
        for (uint32_t i = 0; i < cfg_.loader_workers; ++i)
            workers_.emplace_back([this] { worker_loop(); });
    }

    void stop_workers() {
        {
            std::lock_guard<std::mutex> lock(mu_);
            stopping_ = true;
        }
        prod_cv_.notify_all();
        for (auto& w : workers_)
            if (w.joinable()) w.join();
        workers_.clear();
    }

    void worker_loop() {
        for (;;) {
            uint64_t ticket;
            {
                std::unique_lock<std::mutex> lock(mu_);
                // in-flight window: the batch being consumed plus
                // prefetch_depth staged ahead of it
                prod_cv_.wait(lock, [&] {
                    return stopping_ ||
                           (next_ticket_ < num_batches_ &&
                            next_ticket_ <= next_consume_ + cfg_.prefetch_depth);
                });
                if (stopping_ || next_ticket_ >= num_batches_) return;
                ticket = next_ticket_++;
            }

            size_t begin = ticket * cfg_.batch_size;
            size_t end = std::min(indices_.size(), begin + cfg_.batch_size);
            std::vector<uint64_t> idx(indices_.begin() + begin, indices_.begin() + end);

            {
                std::lock_guard<std::mutex> lock(mu_);
                stats_.bookkeeping_bytes += idx.size() * sizeof(uint64_t);
                ready_.emplace(ticket, Batch(core_, std::move(idx)));
            }
            cons_cv_.notify_all();
        }
    }

    SamplerSpec spec_;
    LoaderConfig cfg_;
    std::shared_ptr<const bridge_detail::ViewCore> core_;

    uint64_t epoch_ = 0;
    std::vector<uint64_t> indices_;
    size_t num_batches_ = 0;

    mutable std::mutex mu_;
    std::condition_variable prod_cv_, cons_cv_;
    std::map<uint64_t, Batch> ready_;
    uint64_t next_ticket_ = 0;
    uint64_t next_consume_ = 0;
    bool stopping_ = false;
    LoaderStats stats_;
    std::vector<std::thread> workers_;
};

}  // namespace drc
