#pragma once

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "drc/pilot.hpp"

namespace drc {

// Config-driven pipeline driver: datasets are CSV files, tasks form a DAG
// wired by name (upstream task outputs feed downstream payloads), and the
// whole list runs on one pilot in batch or pipelined mode. Reports carry the
// per-task overhead breakdown plus metrics where a task produced them.

struct ConfigError : Error {
    using Error::Error;
};

struct DatasetConfig {
    std::string name;
    std::string csv_path;
    Schema schema;
    bool has_header = true;
};

struct TaskConfig {
    std::string uid;
    TaskKind kind = TaskKind::Sleep;
    uint32_t ranks = 1;
    nlohmann::json params;
    std::vector<std::string> inputs;  // "dataset:<name>" or "task:<uid>"
};

struct PipelineConfig {
    uint32_t slots = 1;
    Backend backend = Backend::InProcess;
    ExecMode mode = ExecMode::Batch;
    uint64_t seed = 0;
    std::string report_path;
    std::vector<DatasetConfig> datasets;
    std::vector<TaskConfig> tasks;
};

namespace pipeline_detail {

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, std::string_view content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write file: " + path);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

inline Backend parse_backend(const std::string& s) {
    if (s == "inproc") return Backend::InProcess;
    if (s == "tcp") return Backend::Tcp;
    throw ConfigError("unknown backend '" + s + "' (want inproc|tcp)");
}

inline ExecMode parse_mode(const std::string& s) {
    if (s == "batch") return ExecMode::Batch;
    if (s == "pipelined") return ExecMode::Pipelined;
    throw ConfigError("unknown mode '" + s + "' (want batch|pipelined)");
}

inline Schema parse_schema(const nlohmann::json& j) {
    std::vector<Field> fields;
    for (const auto& f : j) {
        std::string dtype = f.at("dtype").get<std::string>();
        auto dt = dtype_from_name(dtype);
        if (!dt) throw ConfigError("unknown dtype '" + dtype + "'");
        fields.push_back({f.at("name").get<std::string>(), *dt});
    }
    try {
        return Schema(std::move(fields));
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
}

}  // namespace pipeline_detail

inline PipelineConfig parse_pipeline_config(const nlohmann::json& j) {
    using pipeline_detail::parse_backend;
    using pipeline_detail::parse_mode;
    PipelineConfig cfg;
    try {
        const auto& pilot = j.at("pilot");
        cfg.slots = pilot.at("slots").get<uint32_t>();
        cfg.backend = parse_backend(pilot.value("backend", std::string("inproc")));
        cfg.mode = parse_mode(pilot.value("mode", std::string("batch")));
        cfg.seed = j.value("seed", uint64_t{0});
        cfg.report_path = j.value("report_path", std::string{});

        std::unordered_map<std::string, bool> dataset_names;
        for (const auto& d : j.value("datasets", nlohmann::json::array())) {
            DatasetConfig dc;
            dc.name = d.at("name").get<std::string>();
            dc.csv_path = d.at("csv_path").get<std::string>();
            dc.schema = pipeline_detail::parse_schema(d.at("schema"));
            dc.has_header = d.value("has_header", true);
            if (dataset_names.count(dc.name))
                throw ConfigError("duplicate dataset name '" + dc.name + "'");
            dataset_names[dc.name] = true;
            cfg.datasets.push_back(std::move(dc));
        }

        std::unordered_map<std::string, bool> uids;
        for (const auto& t : j.at("tasks")) {
            TaskConfig tc;
            tc.uid = t.at("uid").get<std::string>();
            std::string kind = t.at("kind").get<std::string>();
            auto k = task_kind_from_name(kind);
            if (!k) throw ConfigError("unknown kind '" + kind + "'");
            tc.kind = *k;
            tc.ranks = t.value("ranks", 1u);
            if (tc.ranks < 1) throw ConfigError("task " + tc.uid + ": ranks must be >= 1");
            tc.params = t.value("params", nlohmann::json::object());
            tc.inputs = t.value("inputs", std::vector<std::string>{});
            if (uids.count(tc.uid)) throw ConfigError("duplicate task uid '" + tc.uid + "'");
            // references must point at datasets or earlier tasks only
            for (const auto& ref : tc.inputs) {
                if (ref.rfind("dataset:", 0) == 0) {
                    if (!dataset_names.count(ref.substr(8)))
                        throw ConfigError("task " + tc.uid + ": unknown dataset '" +
                                          ref.substr(8) + "'");
                } else if (ref.rfind("task:", 0) == 0) {
                    if (!uids.count(ref.substr(5)))
                        throw ConfigError("task " + tc.uid + ": reference to '" + ref.substr(5) +
                                          "' is not an earlier task");
                } else {
                    throw ConfigError("task " + tc.uid + ": bad input reference '" + ref +
                                      "' (want dataset:<name> or task:<uid>)");
                }
            }
            uids[tc.uid] = true;
            cfg.tasks.push_back(std::move(tc));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return cfg;
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(pipeline_detail::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config parse: ") + e.what());
    }
    return parse_pipeline_config(j);
}

// ---------------------------------------------------------------------------
// Pipeline execution
// ---------------------------------------------------------------------------

struct TaskReportRow {
    std::string uid;
    std::string kind;
    uint32_t ranks = 0;
    std::string status;  // "done" | "failed"
    std::string failure_reason;
    OverheadBreakdown timings;
    double makespan_contribution = 0;
    std::optional<nlohmann::json> metrics;
};

struct RunReport {
    std::string mode;
    uint32_t slots = 0;
    uint64_t seed = 0;
    double makespan_s = 0;
    std::vector<TaskReportRow> tasks;

    bool all_done() const {
        for (const auto& t : tasks)
            if (t.status != "done") return false;
        return true;
    }

    /// 0 when everything resolved Done, 3 when any task failed.
    int exit_code() const { return all_done() ? 0 : 3; }

    nlohmann::json to_json() const {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& t : tasks) {
            nlohmann::json row{{"uid", t.uid},
                               {"kind", t.kind},
                               {"ranks", t.ranks},
                               {"status", t.status},
                               {"t_deserialize", t.timings.t_deserialize},
                               {"t_comm_build", t.timings.t_comm_build},
                               {"t_deliver", t.timings.t_deliver},
                               {"overhead_total", t.timings.overhead_total()},
                               {"t_execute", t.timings.t_execute}};
            if (!t.failure_reason.empty()) row["failure_reason"] = t.failure_reason;
            if (t.metrics) row["metrics"] = *t.metrics;
            rows.push_back(std::move(row));
        }
        return nlohmann::json{{"mode", mode},
                              {"slots", slots},
                              {"seed", seed},
                              {"makespan_s", makespan_s},
                              {"tasks", std::move(rows)}};
    }

    std::string overhead_csv() const {
        std::string out =
            "uid,kind,ranks,t_deserialize,t_comm_build,t_deliver,overhead_total,t_execute\n";
        char line[512];
        for (const auto& t : tasks) {
            std::snprintf(line, sizeof line, "%s,%s,%u,%.9f,%.9f,%.9f,%.9f,%.9f\n", t.uid.c_str(),
                          t.kind.c_str(), t.ranks, t.timings.t_deserialize,
                          t.timings.t_comm_build, t.timings.t_deliver,
                          t.timings.overhead_total(), t.timings.t_execute);
            out += line;
        }
        return out;
    }
};

namespace pipeline_detail {

/// Output of an upstream task, interpreted by downstream consumers.
struct Produced {
    TaskKind kind;
    Bytes output;
    bool ok = false;
};

inline std::string csv_report_path(const std::string& json_path) {
    auto dot = json_path.rfind(".json");
    if (dot != std::string::npos && dot == json_path.size() - 5)
        return json_path.substr(0, dot) + ".csv";
    return json_path + ".csv";
}

}  // namespace pipeline_detail

/// Runs the configured task list on a fresh pilot. Datasets load from CSV,
/// upstream outputs wire into downstream payloads, and the report (JSON plus
/// the overhead CSV) is written to report_path when one is configured.
inline RunReport run_pipeline(const PipelineConfig& cfg,
                              std::optional<std::string> report_override = {},
                              std::optional<ExecMode> mode_override = {}) {
    using pipeline_detail::Produced;
    ExecMode mode = mode_override.value_or(cfg.mode);

    std::unordered_map<std::string, Table> datasets;
    for (const auto& d : cfg.datasets) {
        std::string text = pipeline_detail::read_file(d.csv_path);
        datasets.emplace(d.name, parse_csv(text, d.schema, d.has_header));
    }

    PilotConfig pcfg;
    pcfg.slots = cfg.slots;
    pcfg.backend = cfg.backend;
    pcfg.mode = mode;
    Pilot pilot = submit_pilot(pcfg);

    std::unordered_map<std::string, Produced> produced;
    std::unordered_map<std::string, ResultHandle> pending;
    std::unordered_map<std::string, TaskKind> kinds;
    std::vector<TaskReportRow> rows(cfg.tasks.size());
    std::vector<TaskResult> results;

    // Waits for an upstream task the first time its output is needed;
    // independent tasks stay queued without blocking submission order.
    auto await_task = [&](const std::string& uid) -> const Produced& {
        auto it = produced.find(uid);
        if (it != produced.end()) return it->second;
        TaskResult res = pending.at(uid).get();
        auto [pit, inserted] =
            produced.emplace(uid, Produced{kinds.at(uid), res.output, res.ok()});
        (void)inserted;
        results.push_back(std::move(res));
        return pit->second;
    };
    auto table_ref = [&](const std::string& ref) -> Table {
        if (ref.rfind("dataset:", 0) == 0) return datasets.at(ref.substr(8));
        const Produced& p = await_task(ref.substr(5));
        if (!p.ok) throw Error("upstream task failed");
        if (p.kind == TaskKind::Train) throw Error("reference is a model, not a table");
        return decode_ipc(p.output);
    };

    for (size_t i = 0; i < cfg.tasks.size(); ++i) {
        const TaskConfig& tc = cfg.tasks[i];
        TaskReportRow& row = rows[i];
        row.uid = tc.uid;
        row.kind = task_kind_name(tc.kind);
        row.ranks = tc.ranks;
        kinds[tc.uid] = tc.kind;

        TaskDescription desc;
        try {
            switch (tc.kind) {
                case TaskKind::Sleep: {
                    desc = make_sleep_task(tc.uid, tc.ranks, tc.params.value("duration_ms", 0.0));
                    break;
                }
                case TaskKind::Sort: {
                    if (tc.inputs.size() != 1) throw Error("sort: expected 1 input");
                    Table t = table_ref(tc.inputs[0]);
                    desc = make_sort_task(tc.uid, tc.ranks, t,
                                          tc.params.at("keys").get<std::vector<std::string>>(),
                                          tc.params.value("ascending", true));
                    break;
                }
                case TaskKind::Join: {
                    if (tc.inputs.size() != 2) throw Error("join: expected 2 inputs");
                    Table l = table_ref(tc.inputs[0]);
                    Table r = table_ref(tc.inputs[1]);
                    desc = make_join_task(tc.uid, tc.ranks, l, r,
                                          tc.params.at("on").get<std::vector<std::string>>());
                    break;
                }
                case TaskKind::Train: {
                    if (tc.inputs.size() != 1) throw Error("train: expected 1 input");
                    Table t = table_ref(tc.inputs[0]);
                    nlohmann::json params = tc.params;
                    if (!params.contains("sampler_seed")) params["sampler_seed"] = cfg.seed;
                    if (!params.contains("init_seed")) params["init_seed"] = cfg.seed ^ 0x5EED;
                    desc = make_train_task(tc.uid, tc.ranks, t, params);
                    break;
                }
                case TaskKind::Infer: {
                    if (tc.inputs.size() != 2)
                        throw Error("infer: expected table and model inputs");
                    Table t = table_ref(tc.inputs[0]);
                    if (tc.inputs[1].rfind("task:", 0) != 0)
                        throw Error("infer: second input must be a task reference");
                    const Produced& m = await_task(tc.inputs[1].substr(5));
                    if (!m.ok) throw Error("upstream task failed");
                    desc = make_infer_task(tc.uid, tc.ranks, t, m.output, tc.params);
                    break;
                }
            }
        } catch (const std::exception& e) {
            row.status = "failed";
            row.failure_reason = e.what();
            produced[tc.uid] = Produced{tc.kind, {}, false};
            continue;
        }
        pending[tc.uid] = pilot.submit_tasks({desc})[0];
    }

    for (size_t i = 0; i < cfg.tasks.size(); ++i) {
        const TaskConfig& tc = cfg.tasks[i];
        if (!pending.count(tc.uid)) continue;  // failed before submission
        (void)await_task(tc.uid);
    }
    pilot.shutdown();

    // fill rows from resolved results
    std::unordered_map<std::string, const TaskResult*> by_uid;
    for (const auto& r : results) by_uid[r.uid] = &r;
    for (auto& row : rows) {
        auto it = by_uid.find(row.uid);
        if (it == by_uid.end()) continue;
        const TaskResult& res = *it->second;
        row.status = res.ok() ? "done" : "failed";
        row.failure_reason = res.failure_reason;
        row.timings = res.timings;
        row.makespan_contribution = res.finished_at - res.started_at;
        if (kinds.at(row.uid) == TaskKind::Infer && res.ok()) {
            try {
                row.metrics =
                    nlohmann::json::parse(std::string(res.output.begin(), res.output.end()));
            } catch (const nlohmann::json::exception&) {
                row.metrics = std::nullopt;
            }
        }
    }

    RunReport report;
    report.mode = mode == ExecMode::Batch ? "batch" : "pipelined";
    report.slots = cfg.slots;
    report.seed = cfg.seed;
    report.makespan_s = overhead_report(results).session_makespan;
    report.tasks = std::move(rows);

    std::string path = report_override.value_or(cfg.report_path);
    if (!path.empty()) {
        pipeline_detail::write_file(path, report.to_json().dump(2) + "\n");
        pipeline_detail::write_file(pipeline_detail::csv_report_path(path),
                                    report.overhead_csv());
    }
    return report;
}

// ---------------------------------------------------------------------------
// Benchmarks
// ---------------------------------------------------------------------------

struct BenchScalingRow {
    std::string op;
    std::string mode;  // "strong" | "weak"
    uint32_t parallelism = 0;
    uint64_t rows_total = 0;
    uint64_t rows_per_rank = 0;
    uint32_t rep = 0;
    double total_s = 0;
    double overhead_s = 0;
};

inline std::string bench_scaling_csv(std::span<const BenchScalingRow> rows) {
    std::string out = "op,mode,parallelism,rows_total,rows_per_rank,rep,total_s,overhead_s\n";
    char line[256];
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%s,%s,%u,%llu,%llu,%u,%.9f,%.9f\n", r.op.c_str(),
                      r.mode.c_str(), r.parallelism,
                      static_cast<unsigned long long>(r.rows_total),
                      static_cast<unsigned long long>(r.rows_per_rank), r.rep, r.total_s,
                      r.overhead_s);
        out += line;
    }
    return out;
}

namespace pipeline_detail {

/// Synthetic benchmark table: uniform Int64 keys in [0, rows) and one
/// Float64 value column.
inline Table synthetic_table(uint64_t rows, uint64_t seed) {
    SplitMix64 rng(seed);
    std::vector<int64_t> keys(rows);
    std::vector<double> vals(rows);
    for (uint64_t i = 0; i < rows; ++i) {
        keys[i] = rows == 0 ? 0 : static_cast<int64_t>(rng.next_below(rows));
        vals[i] = rng.next_unit();
    }
    return Table(Schema({{"k", DataType::Int64}, {"v", DataType::Float64}}),
                 {Column::int64(std::move(keys)), Column::float64(std::move(vals))});
}

inline void verify_sorted_conserving(const Table& output, const Table& input) {
    if (output.num_rows() != input.num_rows()) throw Error("bench oracle: row count changed");
    std::vector<size_t> kcol{input.schema().require("k")};
    for (size_t r = 1; r < output.num_rows(); ++r)
        if (compare_key_rows(output, r - 1, kcol, output, r, kcol) > 0)
            throw Error("bench oracle: output not sorted");
    std::map<std::string, size_t> a, b;
    for (size_t r = 0; r < input.num_rows(); ++r) ++a[canonical_row_bytes(input, r)];
    for (size_t r = 0; r < output.num_rows(); ++r) ++b[canonical_row_bytes(output, r)];
    if (a != b) throw Error("bench oracle: row multiset changed");
}

inline void verify_join_matches_local(const Table& output, const Table& left,
                                      const Table& right) {
    Table expect = local_hash_join(left, right, std::vector<std::string>{"k"});
    std::map<std::string, size_t> a, b;
    for (size_t r = 0; r < expect.num_rows(); ++r) ++a[canonical_row_bytes(expect, r)];
    for (size_t r = 0; r < output.num_rows(); ++r) ++b[canonical_row_bytes(output, r)];
    if (a != b) throw Error("bench oracle: join result mismatch");
}

}  // namespace pipeline_detail

/// Strong/weak scaling of the distributed sort or join. Every repetition's
/// output must pass the correctness oracle before its timing is recorded.
inline std::vector<BenchScalingRow> bench_scaling(const std::string& op, const std::string& mode,
                                                  uint64_t base_rows,
                                                  std::span<const uint32_t> parallelisms,
                                                  uint32_t reps, uint64_t seed, Backend backend) {
    if (op != "sort" && op != "join") throw ConfigError("bench op must be sort|join");
    if (mode != "strong" && mode != "weak") throw ConfigError("bench mode must be strong|weak");
    if (parallelisms.empty()) throw ConfigError("no parallelisms given");

    uint32_t max_p = *std::max_element(parallelisms.begin(), parallelisms.end());
    PilotConfig pcfg;
    pcfg.slots = max_p;
    pcfg.backend = backend;
    pcfg.mode = ExecMode::Batch;
    Pilot pilot = submit_pilot(pcfg);

    std::vector<BenchScalingRow> rows;
    for (uint32_t P : parallelisms) {
        if (P < 1 || P > max_p) throw ConfigError("parallelism out of range");
        uint64_t rows_total = mode == "strong" ? base_rows : base_rows * P;
        for (uint32_t rep = 0; rep < reps; ++rep) {
            uint64_t case_seed = seed ^ (uint64_t(P) << 32) ^ rep;
            std::string uid = op + "-p" + std::to_string(P) + "-r" + std::to_string(rep);
            Table input = pipeline_detail::synthetic_table(rows_total, case_seed);
            TaskResult res;
            Table right;
            if (op == "sort") {
                res = pilot.submit_tasks({make_sort_task(uid, P, input, {"k"})})[0].get();
            } else {
                right = pipeline_detail::synthetic_table(rows_total, case_seed ^ 0xBEEF);
                // drop the value column name clash: rename right's value
                right = Table(Schema({{"k", DataType::Int64}, {"w", DataType::Float64}}),
                              {right.column(0), right.column(1)});
                res = pilot.submit_tasks({make_join_task(uid, P, input, right, {"k"})})[0].get();
            }
            if (!res.ok()) throw Error("bench task failed: " + res.failure_reason);
            Table output = decode_ipc(res.output);
            if (op == "sort") {
                pipeline_detail::verify_sorted_conserving(output, input);
            } else {
                pipeline_detail::verify_join_matches_local(output, input, right);
            }
            BenchScalingRow row;
            row.op = op;
            row.mode = mode;
            row.parallelism = P;
            row.rows_total = rows_total;
            row.rows_per_rank = rows_total / P;
            row.rep = rep;
            row.total_s = res.finished_at - res.started_at;
            row.overhead_s = res.timings.overhead_total();
            rows.push_back(row);
        }
    }
    pilot.shutdown();
    return rows;
}

struct BenchModesReport {
    double batch_makespan_s = 0;
    double pipelined_makespan_s = 0;
    double improvement_percent = 0;
    uint32_t slots = 0;
    size_t task_count = 0;

    nlohmann::json to_json() const {
        return nlohmann::json{{"batch_makespan_s", batch_makespan_s},
                              {"pipelined_makespan_s", pipelined_makespan_s},
                              {"improvement_percent", improvement_percent},
                              {"slots", slots},
                              {"tasks", task_count}};
    }
};

/// Runs the identical task list once in batch and once in pipelined mode on
/// fresh pilots with the same seed, and reports both makespans.
inline BenchModesReport bench_modes(const PipelineConfig& cfg) {
    for (const auto& t : cfg.tasks)
        if (t.ranks > cfg.slots)
            throw ConfigError("task " + t.uid + " needs more ranks than the pilot has slots");
    RunReport batch = run_pipeline(cfg, std::string{}, ExecMode::Batch);
    RunReport pipelined = run_pipeline(cfg, std::string{}, ExecMode::Pipelined);
    BenchModesReport rep;
    rep.batch_makespan_s = batch.makespan_s;
    rep.pipelined_makespan_s = pipelined.makespan_s;
    rep.improvement_percent =
        batch.makespan_s > 0
            ? 100.0 * (batch.makespan_s - pipelined.makespan_s) / batch.makespan_s
            : 0.0;
    rep.slots = cfg.slots;
    rep.task_count = cfg.tasks.size();
    return rep;
}

}  // namespace drc
