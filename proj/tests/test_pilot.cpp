#include <catch2/catch_amalgamated.hpp>

#include "drc/pilot.hpp"
#include "test_util.hpp"

using namespace drc;
using drctest::mixed_schema;
using drctest::random_table;

namespace {

PilotConfig quick_cfg(uint32_t slots, ExecMode mode, Backend backend = Backend::InProcess) {
    PilotConfig cfg;
    cfg.slots = slots;
    cfg.backend = backend;
    cfg.mode = mode;
    cfg.task_timeout = std::chrono::milliseconds(2000);
    return cfg;
}

Table int_table(std::vector<int64_t> keys) {
    return Table(Schema({{"k", DataType::Int64}}), {Column::int64(std::move(keys))});
}

}  // namespace

TEST_CASE("submit_pilot: lifecycle and validation") {
    CHECK_THROWS_AS(submit_pilot(quick_cfg(0, ExecMode::Batch)), Error);

    Pilot p = submit_pilot(quick_cfg(1, ExecMode::Batch));
    CHECK(p.state() == PilotState::Active);
    CHECK(p.total_slots() == 1);
    p.shutdown();
    CHECK(p.state() == PilotState::Done);
    CHECK_THROWS_WITH(p.submit_tasks({make_sleep_task("late", 1, 1)}),
                      Catch::Matchers::ContainsSubstring("not Active"));
}

TEST_CASE("sleep task resolves with populated timings") {
    Pilot p = submit_pilot(quick_cfg(1, ExecMode::Batch));
    auto handles = p.submit_tasks({make_sleep_task("s1", 1, 50)});
    TaskResult r = handles[0].get();
    CHECK(r.ok());
    CHECK(r.uid == "s1");
    CHECK(r.timings.t_execute >= 0.050);
    CHECK(r.timings.t_execute < 0.5);
    CHECK(r.timings.t_deserialize >= 0);
    CHECK(r.timings.t_comm_build > 0);
    CHECK(r.timings.t_deliver > 0);
    CHECK(r.finished_at >= r.started_at);
    CHECK(r.timings.overhead_total() ==
          r.timings.t_deserialize + r.timings.t_comm_build + r.timings.t_deliver);
    p.shutdown();
}

TEST_CASE("oversubscription fails at validation, pilot stays usable") {
    Pilot p = submit_pilot(quick_cfg(2, ExecMode::Pipelined));
    auto handles = p.submit_tasks({make_sleep_task("big", 3, 10), make_sleep_task("ok", 2, 10)});
    TaskResult r0 = handles[0].get();
    CHECK(!r0.ok());
    CHECK(r0.failure_reason == "insufficient slots");
    CHECK(handles[1].get().ok());
    p.shutdown();  // drains the scheduler
    CHECK(p.free_slots_now() == 2);
}

TEST_CASE("duplicate uid rejected at submit") {
    Pilot p = submit_pilot(quick_cfg(1, ExecMode::Batch));
    (void)p.submit_tasks({make_sleep_task("dup", 1, 1)});
    CHECK_THROWS_WITH(p.submit_tasks({make_sleep_task("dup", 1, 1)}),
                      Catch::Matchers::ContainsSubstring("duplicate"));
    p.shutdown();
}

TEST_CASE("batch mode serializes execution intervals") {
    Pilot p = submit_pilot(quick_cfg(4, ExecMode::Batch));
    auto handles =
        p.submit_tasks({make_sleep_task("a", 2, 80), make_sleep_task("b", 2, 80)});
    TaskResult a = handles[0].get();
    TaskResult b = handles[1].get();
    CHECK(a.ok());
    CHECK(b.ok());
    // disjoint intervals: b starts after a finishes
    CHECK(b.started_at >= a.finished_at - 1e-6);
    p.shutdown();
}

TEST_CASE("pipelined mode overlaps queue-adjacent tasks that fit") {
    Pilot p = submit_pilot(quick_cfg(4, ExecMode::Pipelined));
    auto handles =
        p.submit_tasks({make_sleep_task("a", 2, 120), make_sleep_task("b", 2, 120)});
    TaskResult a = handles[0].get();
    TaskResult b = handles[1].get();
    // overlapping execution intervals
    CHECK(b.started_at < a.finished_at);
    CHECK(a.started_at < b.finished_at);
    p.shutdown();
}

TEST_CASE("pipelined FIFO never skips the head") {
    // queue = [A(3), B(2)] on 4 slots: B fits initially but must wait for A
    Pilot p = submit_pilot(quick_cfg(4, ExecMode::Pipelined));
    auto handles =
        p.submit_tasks({make_sleep_task("A", 3, 100), make_sleep_task("B", 2, 10)});
    TaskResult a = handles[0].get();
    TaskResult b = handles[1].get();
    CHECK(b.started_at >= a.finished_at - 1e-6);
    CHECK(p.consistency_violations() == 0);
    p.shutdown();
}

TEST_CASE("pipelined makespan beats batch on parallel sleeps") {
    auto run_mode = [](ExecMode mode) {
        Pilot p = submit_pilot(quick_cfg(4, mode));
        auto handles =
            p.submit_tasks({make_sleep_task("a", 2, 200), make_sleep_task("b", 2, 200)});
        std::vector<TaskResult> results{handles[0].get(), handles[1].get()};
        p.shutdown();
        return overhead_report(results).session_makespan;
    };
    double batch = run_mode(ExecMode::Batch);
    double pipelined = run_mode(ExecMode::Pipelined);
    CHECK(batch >= 0.400);
    CHECK(pipelined < batch + 0.050);
    CHECK(pipelined < 0.300);
}

TEST_CASE("sort task: distributed result matches oracle") {
    Pilot p = submit_pilot(quick_cfg(2, ExecMode::Batch));
    Table input(Schema({{"k", DataType::Int64}}), {Column::int64({3, 1, 4, 2})});
    auto handles = p.submit_tasks({make_sort_task("sort1", 2, input, {"k"})});
    TaskResult r = handles[0].get();
    REQUIRE(r.ok());
    Table out = decode_ipc(r.output);
    CHECK(out.column("k").i64_data() == std::vector<int64_t>{1, 2, 3, 4});
    p.shutdown();
}

TEST_CASE("join task: 1 rank equals local join") {
    Pilot p = submit_pilot(quick_cfg(1, ExecMode::Batch));
    Table left(Schema({{"k", DataType::Int64}, {"lv", DataType::Float64}}),
               {Column::int64({1, 2, 3}), Column::float64({0.1, 0.2, 0.3})});
    Table right(Schema({{"k", DataType::Int64}, {"rv", DataType::Float64}}),
                {Column::int64({2, 3, 4}), Column::float64({2.0, 3.0, 4.0})});
    auto handles = p.submit_tasks({make_join_task("join1", 1, left, right, {"k"})});
    TaskResult r = handles[0].get();
    REQUIRE(r.ok());
    Table out = decode_ipc(r.output);
    CHECK(out == local_hash_join(left, right, std::vector<std::string>{"k"}));
    p.shutdown();
}

TEST_CASE("join task across 4 ranks on tcp backend") {
    Pilot p = submit_pilot(quick_cfg(4, ExecMode::Pipelined, Backend::Tcp));
    Schema ls({{"k", DataType::Int64}, {"lv", DataType::Float64}});
    Schema rs({{"k", DataType::Int64}, {"rv", DataType::Float64}});
    Table left = random_table(ls, 200, 1, 40);
    Table right = random_table(rs, 150, 2, 40);
    auto handles = p.submit_tasks({make_join_task("j", 4, left, right, {"k"})});
    TaskResult r = handles[0].get();
    REQUIRE(r.ok());
    CHECK(drctest::same_rows(decode_ipc(r.output),
                             local_hash_join(left, right, std::vector<std::string>{"k"})));
    p.shutdown();
}

TEST_CASE("train then infer through the pilot") {
    SplitMix64 rng(51);
    size_t n = 400;
    std::vector<double> x0(n), x1(n), y(n);
    for (size_t i = 0; i < n; ++i) {
        x0[i] = rng.next_uniform(-1, 1);
        x1[i] = rng.next_uniform(-1, 1);
        y[i] = 2.0 * x0[i] - 0.5 * x1[i] + 1.0;
    }
    Table data(Schema({{"x0", DataType::Float64}, {"x1", DataType::Float64}, {"y", DataType::Float64}}),
               {Column::float64(x0), Column::float64(x1), Column::float64(y)});

    Pilot p = submit_pilot(quick_cfg(2, ExecMode::Batch));
    nlohmann::json train_params{{"features", {"x0", "x1"}}, {"label", "y"},
                                {"batch_size", 16},         {"shuffle", true},
                                {"sampler_seed", 9},        {"learning_rate", 0.2},
                                {"epochs", 30},             {"init_seed", 3},
                                {"hidden", 0}};
    auto th = p.submit_tasks({make_train_task("train1", 2, data, train_params)});
    TaskResult tr = th[0].get();
    REQUIRE(tr.ok());
    LinearModel model = decode_model(tr.output);
    CHECK(model.weights[0] == Catch::Approx(2.0).margin(0.05));
    CHECK(model.weights[1] == Catch::Approx(-0.5).margin(0.05));
    CHECK(model.bias == Catch::Approx(1.0).margin(0.05));

    nlohmann::json infer_params{{"features", {"x0", "x1"}}, {"label", "y"}};
    auto ih = p.submit_tasks({make_infer_task("infer1", 2, data, tr.output, infer_params)});
    TaskResult ir = ih[0].get();
    REQUIRE(ir.ok());
    auto metrics = nlohmann::json::parse(std::string(ir.output.begin(), ir.output.end()));
    CHECK(metrics["mse"].get<double>() < 0.01);
    CHECK(metrics["nnse"].get<double>() > 0.9);
    p.shutdown();
}

TEST_CASE("corrupt payload fails cleanly without leaking slots") {
    Pilot p = submit_pilot(quick_cfg(2, ExecMode::Pipelined));
    TaskDescription bad;
    bad.uid = "bad";
    bad.kind = TaskKind::Sort;
    bad.ranks_required = 1;
    bad.payload = Bytes{0xDE, 0xAD, 0xBE, 0xEF};
    auto handles = p.submit_tasks({bad, make_sleep_task("after", 2, 10)});
    TaskResult r = handles[0].get();
    CHECK(!r.ok());
    CHECK(r.failure_reason.find("decode") != std::string::npos);
    CHECK(handles[1].get().ok());  // fault containment
    p.shutdown();
    CHECK(p.free_slots_now() == 2);
    CHECK(p.consistency_violations() == 0);
}

TEST_CASE("corrupt inner table fails on the executor without wedging the pilot") {
    Pilot p = submit_pilot(quick_cfg(1, ExecMode::Batch));
    TaskPayload payload;
    payload.params_json = nlohmann::json{{"keys", {"k"}}}.dump();
    payload.rank_inputs.push_back({Bytes{'X', 'X', 'X', 'X', 1, 2, 3}});
    TaskDescription bad;
    bad.uid = "badipc";
    bad.kind = TaskKind::Sort;
    bad.ranks_required = 1;
    bad.payload = payload.encode();
    auto handles = p.submit_tasks({bad, make_sleep_task("after", 1, 5)});
    TaskResult r = handles[0].get();
    CHECK(!r.ok());
    CHECK(r.failure_reason.find("decode") != std::string::npos);
    CHECK(handles[1].get().ok());
    p.shutdown();
}

TEST_CASE("task body errors surface as Failed with reason") {
    Pilot p = submit_pilot(quick_cfg(1, ExecMode::Batch));
    Table t = int_table({1, 2});
    // unknown sort key column
    auto handles = p.submit_tasks({make_sort_task("badkey", 1, t, {"nope"})});
    TaskResult r = handles[0].get();
    CHECK(!r.ok());
    CHECK(r.failure_reason.find("unknown column") != std::string::npos);
    p.shutdown();
}

TEST_CASE("slot conservation across a mixed workload") {
    Pilot p = submit_pilot(quick_cfg(4, ExecMode::Pipelined));
    std::vector<TaskDescription> tasks;
    SplitMix64 rng(8);
    for (int i = 0; i < 12; ++i) {
        tasks.push_back(make_sleep_task("t" + std::to_string(i),
                                        1 + static_cast<uint32_t>(rng.next_below(4)),
                                        5 + rng.next_below(20)));
    }
    auto handles = p.submit_tasks(tasks);
    for (auto& h : handles) CHECK(h.get().ok());
    p.shutdown();
    CHECK(p.free_slots_now() == 4);
    CHECK(p.consistency_violations() == 0);
}

TEST_CASE("FIFO dispatch order: starts follow submission order when all are dispatchable") {
    Pilot p = submit_pilot(quick_cfg(1, ExecMode::Pipelined));
    std::vector<TaskDescription> tasks;
    for (int i = 0; i < 5; ++i)
        tasks.push_back(make_sleep_task("f" + std::to_string(i), 1, 10));
    auto handles = p.submit_tasks(tasks);
    std::vector<TaskResult> results;
    for (auto& h : handles) results.push_back(h.get());
    for (size_t i = 1; i < results.size(); ++i)
        CHECK(results[i].started_at >= results[i - 1].started_at);
    p.shutdown();
}

TEST_CASE("every task communicator appears once in the build log") {
    Pilot p = submit_pilot(quick_cfg(2, ExecMode::Batch));
    auto handles = p.submit_tasks({make_sleep_task("one", 2, 5), make_sleep_task("two", 1, 5)});
    for (auto& h : handles) (void)h.get();
    auto log = p.comm_build_log();
    // world + 2 task communicators
    CHECK(log.size() == 3);
    p.shutdown();
}

TEST_CASE("overhead report: csv shape and session makespan") {
    Pilot p = submit_pilot(quick_cfg(2, ExecMode::Batch));
    std::vector<TaskDescription> descs{make_sleep_task("r1", 1, 60), make_sleep_task("r2", 2, 20)};
    auto handles = p.submit_tasks(descs);
    std::vector<TaskResult> results;
    for (auto& h : handles) results.push_back(h.get());
    OverheadReport rep = overhead_report(results, descs);
    CHECK(rep.session_makespan >= 0.080);
    REQUIRE(rep.rows.size() == 2);
    CHECK(rep.rows[0].timings.overhead_total() ==
          rep.rows[0].timings.t_deserialize + rep.rows[0].timings.t_comm_build +
              rep.rows[0].timings.t_deliver);
    std::string csv = rep.to_csv();
    CHECK(csv.rfind("uid,kind,ranks,t_deserialize,t_comm_build,t_deliver,overhead_total,t_execute\n",
                    0) == 0);
    CHECK(csv.find("r1,sleep,1,") != std::string::npos);
    CHECK(csv.find("r2,sleep,2,") != std::string::npos);
    p.shutdown();
}
