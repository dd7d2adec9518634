#include <catch2/catch_amalgamated.hpp>

#include <numeric>
#include <set>

#include "drc/bridge.hpp"
#include "test_util.hpp"

using namespace drc;

namespace {

// n rows, one feature column x = i, second feature z = 2i, label y = 3i.
DatasetView make_view(size_t n) {
    std::vector<double> x(n), z(n), y(n);
    for (size_t i = 0; i < n; ++i) {
        x[i] = double(i);
        z[i] = 2.0 * i;
        y[i] = 3.0 * i;
    }
    Table t(Schema({{"x", DataType::Float64}, {"z", DataType::Float64}, {"y", DataType::Float64}}),
            {Column::float64(x), Column::float64(z), Column::float64(y)});
    return DatasetView(t, {"x", "z"}, "y");
}

std::vector<uint64_t> epoch_indices(BatchLoader& loader) {
    std::vector<uint64_t> all;
    while (auto b = loader.next_batch())
        all.insert(all.end(), b->global_indices().begin(), b->global_indices().end());
    return all;
}

}  // namespace

TEST_CASE("sampler: contiguous blocks without shuffle") {
    SamplerSpec s{10, 2, 0, false, 0};
    CHECK(sampler_indices(s) == std::vector<uint64_t>{0, 1, 2, 3, 4});
    s.rank = 1;
    CHECK(sampler_indices(s) == std::vector<uint64_t>{5, 6, 7, 8, 9});
}

TEST_CASE("sampler: wrap-around padding") {
    SamplerSpec s{5, 2, 0, false, 0};
    CHECK(sampler_indices(s) == std::vector<uint64_t>{0, 1, 2});
    s.rank = 1;
    CHECK(sampler_indices(s) == std::vector<uint64_t>{3, 4, 0});
}

TEST_CASE("sampler: shuffled blocks are disjoint before padding and cover everything") {
    const uint64_t n = 1000;
    const uint32_t P = 4;
    std::set<uint64_t> seen;
    size_t before_padding = 0;
    for (uint32_t r = 0; r < P; ++r) {
        auto idx = sampler_indices(SamplerSpec{n, P, r, true, 7});
        CHECK(idx.size() == 250);
        // n divisible by P: no padding, blocks are exactly a partition
        before_padding += idx.size();
        seen.insert(idx.begin(), idx.end());
    }
    CHECK(before_padding == n);
    CHECK(seen.size() == n);
    CHECK(*seen.begin() == 0);
    CHECK(*seen.rbegin() == n - 1);
}

TEST_CASE("sampler: coverage invariant over 200 random configurations") {
    SplitMix64 rng(424242);
    for (int trial = 0; trial < 200; ++trial) {
        uint64_t n = 1 + rng.next_below(500);
        uint32_t P = 1 + static_cast<uint32_t>(rng.next_below(8));
        bool shuffle = rng.next_below(2) == 1;
        uint64_t seed = rng.next();
        uint64_t per_rank = (n + P - 1) / P;

        std::set<uint64_t> uni;
        size_t unpadded_total = 0;
        std::set<uint64_t> unpadded_seen;
        for (uint32_t r = 0; r < P; ++r) {
            auto idx = sampler_indices(SamplerSpec{n, P, r, shuffle, seed});
            REQUIRE(idx.size() == per_rank);
            // entries before the padding region are pairwise disjoint
            uint64_t start = r * per_rank;
            for (size_t i = 0; i < idx.size() && start + i < n; ++i) {
                CHECK(unpadded_seen.insert(idx[i]).second);
                ++unpadded_total;
            }
            uni.insert(idx.begin(), idx.end());
        }
        CHECK(unpadded_total == n);
        CHECK(uni.size() == n);  // union covers [0, n)
    }
}

TEST_CASE("sampler: rejects empty dataset") {
    CHECK_THROWS_AS(sampler_indices(SamplerSpec{0, 1, 0, false, 0}), Error);
}

TEST_CASE("dataset view validates columns") {
    Table t(Schema({{"x", DataType::Float64}, {"k", DataType::Int64}, {"y", DataType::Float64}}),
            {Column::float64({1}), Column::int64({1}), Column::float64({1})});
    CHECK_THROWS_AS(DatasetView(t, {"k"}, "y"), Error);      // non-float feature
    CHECK_THROWS_AS(DatasetView(t, {"x"}, "k"), Error);      // non-float label
    CHECK_THROWS_AS(DatasetView(t, {"y"}, "y"), Error);      // overlap
    CHECK_THROWS_AS(DatasetView(t, {"nope"}, "y"), Error);   // unknown
    DatasetView ok(t, {"x"}, "y");
    CHECK(ok.feature_columns.size() == 1);
}

TEST_CASE("loader: batch sizing") {
    DatasetView view = make_view(5);
    SamplerSpec spec{5, 1, 0, false, 0};

    BatchLoader keep(view, spec, LoaderConfig{2, false, 0, 1, {}});
    std::vector<size_t> sizes;
    while (auto b = keep.next_batch()) sizes.push_back(b->size());
    CHECK(sizes == std::vector<size_t>{2, 2, 1});

    BatchLoader drop(view, spec, LoaderConfig{2, true, 0, 1, {}});
    sizes.clear();
    while (auto b = drop.next_batch()) sizes.push_back(b->size());
    CHECK(sizes == std::vector<size_t>{2, 2});

    BatchLoader whole(view, spec, LoaderConfig{16, false, 0, 1, {}});
    auto b = whole.next_batch();
    REQUIRE(b.has_value());
    CHECK(b->size() == 5);
    CHECK(!whole.next_batch().has_value());
}

TEST_CASE("loader: epoch concatenation equals sampler_indices") {
    DatasetView view = make_view(23);
    for (uint32_t rank : {0u, 1u, 2u}) {
        SamplerSpec spec{23, 3, rank, true, 99};
        BatchLoader loader(view, spec, LoaderConfig{4, false, 2, 2, {}});
        CHECK(epoch_indices(loader) == sampler_indices(spec, 0));
    }
}

TEST_CASE("loader: batch values read through to table cells") {
    DatasetView view = make_view(17);
    SamplerSpec spec{17, 2, 1, true, 5};
    BatchLoader loader(view, spec, LoaderConfig{3, false, 1, 2, {}});
    while (auto b = loader.next_batch()) {
        for (size_t i = 0; i < b->size(); ++i) {
            uint64_t g = b->global_indices()[i];
            CHECK(b->feature(i, 0) == view.table.column("x").f64(g));
            CHECK(b->feature(i, 1) == view.table.column("z").f64(g));
            CHECK(b->label(i) == view.table.column("y").f64(g));
        }
    }
}

TEST_CASE("loader: identical sequences for any worker/prefetch combination") {
    DatasetView view = make_view(41);
    SamplerSpec spec{41, 2, 0, true, 123};

    auto collect = [&](uint32_t workers, uint32_t depth) {
        BatchLoader loader(view, spec, LoaderConfig{4, false, depth, workers, {}});
        std::vector<std::vector<uint64_t>> seq;
        while (auto b = loader.next_batch())
            seq.emplace_back(b->global_indices().begin(), b->global_indices().end());
        return seq;
    };

    auto reference = collect(1, 0);
    for (uint32_t workers : {1u, 4u}) {
        for (uint32_t depth : {0u, 2u, 8u}) {
            CHECK(collect(workers, depth) == reference);
        }
    }
}

TEST_CASE("loader: zero column bytes copied, bounded bookkeeping") {
    DatasetView view = make_view(100);
    SamplerSpec spec{100, 1, 0, true, 1};
    LoaderConfig cfg{8, false, 2, 4, {}};
    BatchLoader loader(view, spec, cfg);
    size_t batches = 0;
    while (auto b = loader.next_batch()) ++batches;
    LoaderStats st = loader.stats();
    CHECK(st.column_bytes_copied == 0);
    // one index vector per batch plus the epoch's sampler list
    CHECK(st.bookkeeping_bytes == (100 + 100) * sizeof(uint64_t));
    CHECK(batches == 13);
}

TEST_CASE("loader: reset advances the epoch permutation but keeps coverage") {
    DatasetView view = make_view(64);
    SamplerSpec spec{64, 1, 0, true, 31};
    BatchLoader loader(view, spec, LoaderConfig{8, false, 1, 2, {}});
    auto e0 = epoch_indices(loader);
    loader.reset();
    auto e1 = epoch_indices(loader);
    CHECK(loader.epoch() == 1);
    CHECK(e0 != e1);  // different permutation
    auto sorted0 = e0, sorted1 = e1;
    std::sort(sorted0.begin(), sorted0.end());
    std::sort(sorted1.begin(), sorted1.end());
    CHECK(sorted0 == sorted1);  // same coverage
    CHECK(e1 == sampler_indices(spec, 1));
}

TEST_CASE("loader: affine transform applied lazily to features only") {
    DatasetView view = make_view(6);
    SamplerSpec spec{6, 1, 0, false, 0};
    LoaderConfig cfg{6, false, 0, 1, AffineTransform{0.5, 10.0}};
    BatchLoader loader(view, spec, cfg);
    auto b = loader.next_batch();
    REQUIRE(b);
    for (size_t i = 0; i < b->size(); ++i) {
        CHECK(b->feature(i, 0) == double(i) * 0.5 + 10.0);
        CHECK(b->label(i) == 3.0 * i);  // labels untouched
    }
    CHECK(loader.stats().column_bytes_copied == 0);
}

TEST_CASE("loader: sampler row-count mismatch") {
    DatasetView view = make_view(6);
    CHECK_THROWS_AS(BatchLoader(view, SamplerSpec{5, 1, 0, false, 0}, LoaderConfig{}), Error);
}
