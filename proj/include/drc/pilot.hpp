#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "drc/bridge.hpp"
#include "drc/dist_ops.hpp"
#include "drc/fabric.hpp"
#include "drc/learner.hpp"
#include "drc/table_io.hpp"

namespace drc {

// Pilot-style execution runtime. submit_pilot() acquires a slot pool (one
// executor daemon per slot plus a master on an extra world rank); tasks are
// queued FIFO and dispatched to the lowest free slots, one at a time in Batch
// mode or whenever the head fits in Pipelined mode. Each task gets its own
// communicator, built on the allocated executors and registered with the
// master before the role (parameters + shared inputs) is broadcast to the
// group.

enum class TaskKind : uint8_t { Join = 0, Sort = 1, Train = 2, Infer = 3, Sleep = 4 };
enum class ExecMode : uint8_t { Batch = 0, Pipelined = 1 };
enum class PilotState : uint8_t { Pending = 0, Active = 1, Done = 2 };
enum class TaskStatus : uint8_t { Done = 0, Failed = 1 };

inline const char* task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::Join: return "join";
        case TaskKind::Sort: return "sort";
        case TaskKind::Train: return "train";
        case TaskKind::Infer: return "infer";
        case TaskKind::Sleep: return "sleep";
    }
    return "?";
}

inline std::optional<TaskKind> task_kind_from_name(std::string_view name) {
    if (name == "join") return TaskKind::Join;
    if (name == "sort") return TaskKind::Sort;
    if (name == "train") return TaskKind::Train;
    if (name == "infer") return TaskKind::Infer;
    if (name == "sleep") return TaskKind::Sleep;
    return std::nullopt;
}

struct OverheadBreakdown {
    double t_deserialize = 0;
    double t_comm_build = 0;
    double t_deliver = 0;
    double t_execute = 0;

    double overhead_total() const { return t_deserialize + t_comm_build + t_deliver; }
};

struct TaskDescription {
    std::string uid;
    TaskKind kind = TaskKind::Sleep;
    uint32_t ranks_required = 1;
    Bytes payload;           // encoded TaskPayload
    double submitted_at = 0; // filled at submission
};

struct TaskResult {
    std::string uid;
    TaskStatus status = TaskStatus::Failed;
    std::string failure_reason;
    Bytes output;  // IPC table, model bytes, or metrics JSON, by kind
    OverheadBreakdown timings;
    double started_at = 0;
    double finished_at = 0;

    bool ok() const { return status == TaskStatus::Done; }
};

/// Task input envelope carried in TaskDescription::payload.
///   - rank_inputs: per-rank blobs handed to each executor with its DISPATCH
///     (IPC table slices for Join/Sort)
///   - shared_inputs: blobs broadcast from task rank 0 at role delivery
///     (the full dataset for Train/Infer, the model for Infer)
///   - params_json: kind-specific parameters
struct TaskPayload {
    std::string params_json = "{}";
    std::vector<Bytes> shared_inputs;
    std::vector<std::vector<Bytes>> rank_inputs;

    Bytes encode() const {
        ByteWriter w;
        w.u32(static_cast<uint32_t>(shared_inputs.size()));
        for (const auto& b : shared_inputs) w.blob(b);
        w.u32(static_cast<uint32_t>(rank_inputs.size()));
        for (const auto& blobs : rank_inputs) {
            w.u32(static_cast<uint32_t>(blobs.size()));
            for (const auto& b : blobs) w.blob(b);
        }
        w.u64(params_json.size());
        w.str(params_json);
        return w.take();
    }

    static TaskPayload decode(std::span<const uint8_t> bytes) {
        ByteReader r(bytes);
        TaskPayload p;
        uint32_t nshared = r.u32();
        for (uint32_t i = 0; i < nshared; ++i) p.shared_inputs.push_back(r.blob());
        uint32_t nranks = r.u32();
        p.rank_inputs.resize(nranks);
        for (auto& blobs : p.rank_inputs) {
            uint32_t n = r.u32();
            for (uint32_t i = 0; i < n; ++i) blobs.push_back(r.blob());
        }
        uint64_t plen = r.u64();
        p.params_json = r.str(plen);
        if (!r.done()) throw DecodeError("trailing bytes after task payload");
        return p;
    }
};

struct PilotConfig {
    uint32_t slots = 1;
    Backend backend = Backend::InProcess;
    ExecMode mode = ExecMode::Batch;
    /// Deadline for fabric operations inside tasks (comm build, collectives).
    std::chrono::nanoseconds task_timeout = std::chrono::seconds(30);
};

struct Pilot;

namespace pilot_detail {

inline constexpr uint64_t kTagMaster = 0x0010;  // executor/driver -> master
inline constexpr uint64_t kTagWorker = 0x0011;  // master -> executor

enum class Msg : uint8_t {
    Submit = 1,
    Ready = 2,
    Done = 3,
    Result = 4,
    Stop = 5,
    Dispatch = 6,
    Go = 7,
    Shutdown = 8,
};

inline void put_str(ByteWriter& w, std::string_view s) {
    w.u16(static_cast<uint16_t>(s.size()));
    w.str(s);
}
inline std::string get_str(ByteReader& r) {
    uint16_t n = r.u16();
    return r.str(n);
}

struct TaskHandleState {
    std::mutex mu;
    std::condition_variable cv;
    std::optional<TaskResult> result;

    void resolve(TaskResult r) {
        {
            std::lock_guard<std::mutex> lock(mu);
            result = std::move(r);
        }
        cv.notify_all();
    }
};

}  // namespace pilot_detail

/// Pending outcome of a submitted task.
class ResultHandle {
public:
    ResultHandle() = default;
    explicit ResultHandle(std::shared_ptr<pilot_detail::TaskHandleState> state)
        : state_(std::move(state)) {}

    bool ready() const {
        std::lock_guard<std::mutex> lock(state_->mu);
        return state_->result.has_value();
    }

    /// Blocks until the task resolves.
    TaskResult get() const {
        std::unique_lock<std::mutex> lock(state_->mu);
        state_->cv.wait(lock, [&] { return state_->result.has_value(); });
        return *state_->result;
    }

private:
    std::shared_ptr<pilot_detail::TaskHandleState> state_;
};

namespace pilot_detail {

struct PilotCore : std::enable_shared_from_this<PilotCore> {
    PilotConfig cfg;
    uint64_t pilot_id = 0;
    World world;  // ranks 0..slots-1 = executors, rank slots = master
    std::atomic<PilotState> state{PilotState::Pending};

    std::mutex registry_mu;
    std::unordered_map<std::string, std::shared_ptr<TaskHandleState>> handles;
    std::unordered_set<std::string> seen_uids;
    size_t unresolved = 0;
    std::condition_variable registry_cv;

    std::atomic<uint64_t> task_comm_seq{0};
    std::atomic<uint32_t> consistency_violations{0};
    std::atomic<uint32_t> free_slots_mirror{0};

    std::vector<std::thread> executor_threads;
    std::thread master_thread;

    const Communicator& master_comm() const { return world.comms[cfg.slots]; }

    // ---- lifecycle ---------------------------------------------------------

    void start() {
        FabricOptions opts;
        opts.timeout = cfg.task_timeout;
        world = create_world(cfg.backend, cfg.slots + 1, opts);
        static std::atomic<uint64_t> next_pilot_id{1};
        pilot_id = next_pilot_id.fetch_add(1);
        free_slots_mirror = cfg.slots;
        for (uint32_t s = 0; s < cfg.slots; ++s)
            executor_threads.emplace_back([this, s] { executor_loop(s); });
        master_thread = std::thread([this] { master_loop(); });
        state = PilotState::Active;
    }

    void shutdown() {
        PilotState expect = PilotState::Active;
        if (!state.compare_exchange_strong(expect, PilotState::Done)) return;
        {
            // wait for every submitted task to resolve before stopping
            std::unique_lock<std::mutex> lock(registry_mu);
            registry_cv.wait(lock, [&] { return unresolved == 0; });
        }
        ByteWriter w;
        w.u8(static_cast<uint8_t>(Msg::Stop));
        master_comm().self_post(kTagMaster, w.take());
        if (master_thread.joinable()) master_thread.join();
        for (auto& t : executor_threads)
            if (t.joinable()) t.join();
    }

    ~PilotCore() { shutdown(); }

    // ---- submission --------------------------------------------------------

    std::vector<ResultHandle> submit(std::vector<TaskDescription> tasks) {
        std::vector<ResultHandle> out;
        out.reserve(tasks.size());
        {
            // state checked under the registry lock: shutdown() waits on the
            // same lock, so tasks registered here are always drained
            std::lock_guard<std::mutex> lock(registry_mu);
            if (state != PilotState::Active) throw Error("pilot not Active");
            for (const auto& t : tasks) {
                if (t.uid.empty()) throw Error("task uid must not be empty");
                if (t.ranks_required < 1) throw Error("task " + t.uid + ": ranks_required >= 1");
                if (!seen_uids.insert(t.uid).second)
                    throw Error("duplicate task uid '" + t.uid + "'");
            }
            for (auto& t : tasks) {
                auto hs = std::make_shared<TaskHandleState>();
                handles[t.uid] = hs;
                ++unresolved;
                out.emplace_back(hs);
            }
        }
        for (auto& t : tasks) {
            t.submitted_at = monotonic_seconds();
            ByteWriter w;
            w.u8(static_cast<uint8_t>(Msg::Submit));
            put_str(w, t.uid);
            w.u8(static_cast<uint8_t>(t.kind));
            w.u32(t.ranks_required);
            w.f64(t.submitted_at);
            w.blob(t.payload);
            master_comm().self_post(kTagMaster, w.take());
        }
        return out;
    }

    void resolve(const std::string& uid, TaskResult result) {
        std::shared_ptr<TaskHandleState> hs;
        {
            std::lock_guard<std::mutex> lock(registry_mu);
            auto it = handles.find(uid);
            if (it == handles.end()) {
                log_error("resolve: unknown task uid '" + uid + "'");
                return;
            }
            hs = it->second;
            --unresolved;
        }
        hs->resolve(std::move(result));
        registry_cv.notify_all();
    }

    // ---- master: scheduler + result collection -----------------------------

    struct PendingTask {
        std::string uid;
        TaskKind kind;
        uint32_t ranks;
        double submitted_at;
        Bytes payload;
    };

    struct RunningTask {
        TaskKind kind;
        std::vector<uint32_t> members;  // world ranks, ascending
        uint32_t terminals_left;
        double started_at;
    };

    /// Scheduler/agent state: FIFO queue, free slot pool, running set.
    struct AgentState {
        std::deque<PendingTask> queue;
        std::set<uint32_t> free_slots;
        std::map<std::string, RunningTask> running;
    };

    void check_slot_conservation(const AgentState& st) {
        size_t allocated = 0;
        for (const auto& [uid, rt] : st.running) allocated += rt.members.size();
        if (allocated + st.free_slots.size() != cfg.slots) {
            consistency_violations.fetch_add(1);
            log_error("slot conservation violated: " + std::to_string(allocated) + " allocated, " +
                      std::to_string(st.free_slots.size()) + " free of " +
                      std::to_string(cfg.slots));
        }
        free_slots_mirror = static_cast<uint32_t>(st.free_slots.size());
    }

    void master_loop() {
        const Communicator& comm = master_comm();
        AgentState st;
        for (uint32_t s = 0; s < cfg.slots; ++s) st.free_slots.insert(s);
        bool stopping = false;

        while (!(stopping && st.queue.empty() && st.running.empty())) {
            auto [src, bytes] = comm.recv_any(kTagMaster, std::chrono::nanoseconds::max());
            ByteReader r(bytes);
            switch (static_cast<Msg>(r.u8())) {
                case Msg::Submit: {
                    PendingTask p;
                    p.uid = get_str(r);
                    p.kind = static_cast<TaskKind>(r.u8());
                    p.ranks = r.u32();
                    p.submitted_at = r.f64();
                    p.payload = r.blob();
                    if (p.ranks > cfg.slots) {
                        TaskResult res;
                        res.uid = p.uid;
                        res.status = TaskStatus::Failed;
                        res.failure_reason = "insufficient slots";
                        res.started_at = res.finished_at = monotonic_seconds();
                        resolve(p.uid, std::move(res));
                    } else {
                        st.queue.push_back(std::move(p));
                    }
                    break;
                }
                case Msg::Ready: {
                    std::string uid = get_str(r);
                    ByteWriter w;
                    w.u8(static_cast<uint8_t>(Msg::Go));
                    put_str(w, uid);
                    comm.send(src, kTagWorker, w.data(), Plane::Control);
                    break;
                }
                case Msg::Result: {
                    std::string uid = get_str(r);
                    TaskResult res;
                    res.uid = uid;
                    res.status = static_cast<TaskStatus>(r.u8());
                    res.failure_reason = get_str(r);
                    res.timings.t_deserialize = r.f64();
                    res.timings.t_comm_build = r.f64();
                    res.timings.t_deliver = r.f64();
                    res.timings.t_execute = r.f64();
                    res.output = r.blob();
                    auto it = st.running.find(uid);
                    res.started_at = it != st.running.end() ? it->second.started_at
                                                            : monotonic_seconds();
                    res.finished_at = monotonic_seconds();
                    resolve(uid, std::move(res));
                    task_terminal(st, uid, src);
                    break;
                }
                case Msg::Done: {
                    std::string uid = get_str(r);
                    (void)r.u8();  // failed flag; rank 0's RESULT decides the status
                    task_terminal(st, uid, src);
                    break;
                }
                case Msg::Stop:
                    stopping = true;
                    break;
                default:
                    log_error("master: unexpected message kind");
            }
            schedule_step(st);
            check_slot_conservation(st);
        }

        ByteWriter w;
        w.u8(static_cast<uint8_t>(Msg::Shutdown));
        for (uint32_t s = 0; s < cfg.slots; ++s)
            comm.send(s, kTagWorker, w.data(), Plane::Control);
    }

    /// A task's allocation is released as one unit, once every rank's
    /// terminal message (RESULT or DONE) has arrived.
    void task_terminal(AgentState& st, const std::string& uid, uint32_t) {
        auto it = st.running.find(uid);
        if (it == st.running.end()) return;
        if (--it->second.terminals_left == 0) {
            for (uint32_t m : it->second.members) st.free_slots.insert(m);
            st.running.erase(it);
        }
    }

    /// Strict-FIFO first-fit dispatch: Batch runs one task at a time,
    /// Pipelined keeps dispatching the head while it fits. No skipping.
    void schedule_step(AgentState& st) {
        for (;;) {
            if (st.queue.empty()) return;
            if (cfg.mode == ExecMode::Batch && !st.running.empty()) return;
            PendingTask& head = st.queue.front();
            if (head.ranks > st.free_slots.size()) return;
            dispatch(st, head);
            st.queue.pop_front();
            if (cfg.mode == ExecMode::Batch) return;
        }
    }

    void dispatch(AgentState& st, PendingTask& task) {
        TaskPayload payload;
        try {
            payload = TaskPayload::decode(task.payload);
            if (!payload.rank_inputs.empty() && payload.rank_inputs.size() != task.ranks)
                throw Error("rank input slices != ranks_required");
        } catch (const std::exception& e) {
            TaskResult res;
            res.uid = task.uid;
            res.status = TaskStatus::Failed;
            res.failure_reason = std::string("decode: ") + e.what();
            res.started_at = res.finished_at = monotonic_seconds();
            resolve(task.uid, std::move(res));
            return;
        }

        std::vector<uint32_t> members;
        auto slot = st.free_slots.begin();
        for (uint32_t i = 0; i < task.ranks; ++i) members.push_back(*slot++);
        for (uint32_t m : members) st.free_slots.erase(m);

        uint64_t comm_id =
            fabric_detail::derive_comm_id(world.comms[0].comm_id() ^ 0xA5A5A5A5A5A5A5A5ull,
                                          task_comm_seq.fetch_add(1) + 1);
        st.running[task.uid] =
            RunningTask{task.kind, members, task.ranks, monotonic_seconds()};

        // Task rank 0's DISPATCH goes out last so its communicator build does
        // not sit waiting for peers that have not been dispatched yet.
        for (uint32_t i = task.ranks; i-- > 0;) {
            ByteWriter w;
            w.u8(static_cast<uint8_t>(Msg::Dispatch));
            put_str(w, task.uid);
            w.u8(static_cast<uint8_t>(task.kind));
            w.u64(comm_id);
            w.u32(task.ranks);
            for (uint32_t m : members) w.u32(m);
            w.u32(i);  // task rank
            const std::vector<Bytes>* blobs =
                payload.rank_inputs.empty() ? nullptr : &payload.rank_inputs[i];
            w.u32(blobs ? static_cast<uint32_t>(blobs->size()) : 0);
            if (blobs)
                for (const auto& b : *blobs) w.blob(b);
            w.u8(i == 0 ? 1 : 0);
            if (i == 0) {
                w.u64(payload.params_json.size());
                w.str(payload.params_json);
                w.u32(static_cast<uint32_t>(payload.shared_inputs.size()));
                for (const auto& b : payload.shared_inputs) w.blob(b);
            }
            master_comm().send(members[i], kTagWorker, w.data(), Plane::Control);
        }
    }

    // ---- executor ----------------------------------------------------------

    struct DispatchInfo {
        std::string uid;
        TaskKind kind;
        uint64_t comm_id;
        std::vector<uint32_t> members;
        uint32_t task_rank;
        std::vector<Table> local_inputs;
        std::string params_json;           // rank 0 only (until delivery)
        std::vector<Bytes> shared_inputs;  // rank 0 only (until delivery)
    };

    void executor_loop(uint32_t slot) {
        const Communicator& comm = world.comms[slot];
        for (;;) {
            auto [src, bytes] = comm.recv_any(kTagWorker, std::chrono::nanoseconds::max());
            ByteReader r(bytes);
            Msg msg = static_cast<Msg>(r.u8());
            if (msg == Msg::Shutdown) return;
            if (msg != Msg::Dispatch) {
                log_warn("executor: unexpected message, dropping");
                continue;
            }
            run_task(comm, r);
        }
    }

    void run_task(const Communicator& world_comm, ByteReader& r) {
        OverheadBreakdown times;
        StopWatch phase;

        // deserialize: envelope fields plus this rank's input tables
        DispatchInfo info;
        bool deser_ok = true;
        std::string error;
        try {
            info.uid = get_str(r);
            info.kind = static_cast<TaskKind>(r.u8());
            info.comm_id = r.u64();
            uint32_t nmembers = r.u32();
            info.members.resize(nmembers);
            for (auto& m : info.members) m = r.u32();
            info.task_rank = r.u32();
            uint32_t nblobs = r.u32();
            for (uint32_t i = 0; i < nblobs; ++i) {
                Bytes blob = r.blob();
                info.local_inputs.push_back(decode_ipc(blob));
            }
            if (r.u8() == 1) {
                uint64_t plen = r.u64();
                info.params_json = r.str(plen);
                uint32_t nshared = r.u32();
                for (uint32_t i = 0; i < nshared; ++i) info.shared_inputs.push_back(r.blob());
            }
        } catch (const std::exception& e) {
            deser_ok = false;
            error = std::string("decode: ") + e.what();
        }
        times.t_deserialize = phase.elapsed_s();

        const Communicator& comm = world_comm;
        uint32_t master_rank = cfg.slots;

        if (!deser_ok) {
            report_failure(comm, master_rank, info, times, error);
            return;
        }

        // comm build: group construction, then rank 0 registers the
        // communicator with the master and waits for the go-ahead
        phase.restart();
        std::optional<Communicator> task_comm;
        try {
            auto [built, timing] =
                Communicator::build_group(comm, info.comm_id, info.members, info.task_rank);
            task_comm = std::move(built);
            if (info.task_rank == 0) {
                ByteWriter w;
                w.u8(static_cast<uint8_t>(Msg::Ready));
                put_str(w, info.uid);
                comm.send(master_rank, kTagMaster, w.data(), Plane::Control);
                auto [gsrc, go] = comm.recv_any(kTagWorker);
                ByteReader gr(go);
                if (static_cast<Msg>(gr.u8()) != Msg::Go) throw Error("expected GO");
            }
        } catch (const std::exception& e) {
            times.t_comm_build = phase.elapsed_s();
            report_failure(comm, master_rank, info, times,
                           std::string("comm build: ") + e.what());
            return;
        }
        times.t_comm_build = phase.elapsed_s();

        // role delivery: parameters and shared inputs broadcast from rank 0
        phase.restart();
        try {
            ByteWriter role;
            if (info.task_rank == 0) {
                role.u64(info.params_json.size());
                role.str(info.params_json);
                role.u32(static_cast<uint32_t>(info.shared_inputs.size()));
                for (const auto& b : info.shared_inputs) role.blob(b);
            }
            Bytes delivered = task_comm->broadcast(0, role.data());
            ByteReader dr(delivered);
            uint64_t plen = dr.u64();
            info.params_json = dr.str(plen);
            info.shared_inputs.clear();
            uint32_t nshared = dr.u32();
            for (uint32_t i = 0; i < nshared; ++i) info.shared_inputs.push_back(dr.blob());
        } catch (const std::exception& e) {
            times.t_deliver = phase.elapsed_s();
            report_failure(comm, master_rank, info, times, std::string("deliver: ") + e.what());
            return;
        }
        times.t_deliver = phase.elapsed_s();

        // execute
        phase.restart();
        Bytes output;
        bool ok = true;
        try {
            output = run_kind_body(*task_comm, info);
        } catch (const std::exception& e) {
            ok = false;
            error = e.what();
        }
        times.t_execute = phase.elapsed_s();

        if (!ok) {
            report_failure(comm, master_rank, info, times, error);
            return;
        }
        if (info.task_rank == 0) {
            send_result(comm, master_rank, info.uid, TaskStatus::Done, "", times, output);
        } else {
            send_done(comm, master_rank, info.uid, false, "");
        }
    }

    void report_failure(const Communicator& comm, uint32_t master_rank, const DispatchInfo& info,
                        const OverheadBreakdown& times, const std::string& reason) {
        log_info("task " + info.uid + " rank " + std::to_string(info.task_rank) +
                 " failed: " + reason);
        if (info.task_rank == 0) {
            send_result(comm, master_rank, info.uid, TaskStatus::Failed, reason, times, {});
        } else {
            send_done(comm, master_rank, info.uid, true, reason);
        }
    }

    void send_result(const Communicator& comm, uint32_t master_rank, const std::string& uid,
                     TaskStatus status, const std::string& reason, const OverheadBreakdown& times,
                     const Bytes& output) {
        ByteWriter w;
        w.u8(static_cast<uint8_t>(Msg::Result));
        put_str(w, uid);
        w.u8(static_cast<uint8_t>(status));
        put_str(w, reason);
        w.f64(times.t_deserialize);
        w.f64(times.t_comm_build);
        w.f64(times.t_deliver);
        w.f64(times.t_execute);
        w.blob(output);
        comm.send(master_rank, kTagMaster, w.data(), Plane::Control);
    }

    void send_done(const Communicator& comm, uint32_t master_rank, const std::string& uid,
                   bool failed, const std::string& reason) {
        ByteWriter w;
        w.u8(static_cast<uint8_t>(Msg::Done));
        put_str(w, uid);
        w.u8(failed ? 1 : 0);
        put_str(w, reason);
        comm.send(master_rank, kTagMaster, w.data(), Plane::Control);
    }

    // ---- task bodies -------------------------------------------------------

    Bytes run_kind_body(const Communicator& tc, DispatchInfo& info) {
        nlohmann::json params = nlohmann::json::parse(info.params_json);
        switch (info.kind) {
            case TaskKind::Sleep: {
                double ms = params.value("duration_ms", 0.0);
                std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
                return {};
            }
            case TaskKind::Sort: {
                if (info.local_inputs.size() != 1) throw Error("sort: expected 1 input table");
                std::vector<std::string> keys = params.at("keys").get<std::vector<std::string>>();
                bool ascending = params.value("ascending", true);
                GlobalTable gt = make_global_table(tc, info.local_inputs[0]);
                GlobalTable sorted = dist_sort(gt, keys, ascending);
                auto gathered = dist_gather_table(sorted, 0);
                return gathered ? encode_ipc(*gathered) : Bytes{};
            }
            case TaskKind::Join: {
                if (info.local_inputs.size() != 2) throw Error("join: expected 2 input tables");
                std::vector<std::string> on = params.at("on").get<std::vector<std::string>>();
                GlobalTable left = make_global_table(tc, info.local_inputs[0]);
                GlobalTable right = make_global_table(tc, info.local_inputs[1]);
                GlobalTable joined = dist_join(left, right, on);
                auto gathered = dist_gather_table(joined, 0);
                return gathered ? encode_ipc(*gathered) : Bytes{};
            }
            case TaskKind::Train: {
                if (info.shared_inputs.size() != 1) throw Error("train: expected 1 shared table");
                Table table = decode_ipc(info.shared_inputs[0]);
                auto features = params.at("features").get<std::vector<std::string>>();
                std::string label = params.at("label").get<std::string>();
                DatasetView view(table, features, label);

                SamplerSpec spec;
                spec.n_rows = table.num_rows();
                spec.world_size = tc.size();
                spec.rank = tc.rank();
                spec.shuffle = params.value("shuffle", true);
                spec.seed = params.value("sampler_seed", uint64_t{0});

                LoaderConfig lcfg;
                lcfg.batch_size = params.value("batch_size", 32u);
                lcfg.drop_last = params.value("drop_last", false);
                lcfg.prefetch_depth = params.value("prefetch_depth", 2u);
                lcfg.loader_workers = params.value("loader_workers", 1u);

                TrainConfig tcfg;
                tcfg.learning_rate = params.value("learning_rate", 0.01);
                tcfg.epochs = params.value("epochs", 1u);
                tcfg.init_seed = params.value("init_seed", uint64_t{0});
                tcfg.hidden_units = params.value("hidden", 0u);

                BatchLoader loader(view, spec, lcfg);
                LinearModel model = data_parallel_train(tc, loader, features.size(), tcfg);
                return tc.rank() == 0 ? encode_model(model) : Bytes{};
            }
            case TaskKind::Infer: {
                if (info.shared_inputs.size() != 2)
                    throw Error("infer: expected shared table + model");
                Table table = decode_ipc(info.shared_inputs[0]);
                LinearModel model = decode_model(info.shared_inputs[1]);
                auto features = params.at("features").get<std::vector<std::string>>();
                std::string label = params.at("label").get<std::string>();
                DatasetView view(table, features, label);

                // contiguous block of rows for this rank
                size_t n = table.num_rows();
                uint32_t P = tc.size();
                size_t begin = tc.rank() * n / P;
                size_t end = (tc.rank() + 1ull) * n / P;
                std::vector<double> flat((end - begin) * features.size());
                for (size_t i = begin; i < end; ++i)
                    for (size_t k = 0; k < features.size(); ++k)
                        flat[(i - begin) * features.size() + k] =
                            table.column(features[k]).f64(i);
                std::vector<double> y_hat = predict(model, flat, end - begin);

                ByteWriter w;
                for (double v : y_hat) w.f64(v);
                auto gathered = tc.gather(w.data(), 0);
                if (!gathered) return {};

                std::vector<double> all_pred;
                for (const auto& part : *gathered) {
                    ByteReader pr(part);
                    while (pr.remaining() >= 8) all_pred.push_back(pr.f64());
                }
                const auto& y_col = table.column(label).f64_data();
                MetricsReport rep = evaluate(y_col, all_pred);
                nlohmann::json out{{"mae", rep.mae},
                                   {"mse", rep.mse},
                                   {"mape_percent", rep.mape_percent},
                                   {"nnse", rep.nnse},
                                   {"mape_excluded", rep.mape_excluded},
                                   {"rows", n}};
                std::string s = out.dump();
                return Bytes(s.begin(), s.end());
            }
        }
        throw Error("unknown task kind");
    }
};

}  // namespace pilot_detail

/// Handle to a running pilot. The last copy shuts the runtime down.
struct Pilot {
    std::shared_ptr<pilot_detail::PilotCore> core;

    uint64_t pilot_id() const { return core->pilot_id; }
    uint32_t total_slots() const { return core->cfg.slots; }
    Backend backend() const { return core->cfg.backend; }
    ExecMode mode() const { return core->cfg.mode; }
    PilotState state() const { return core->state.load(); }

    /// Enqueues tasks FIFO, in list order. Handles resolve to TaskResults.
    std::vector<ResultHandle> submit_tasks(std::vector<TaskDescription> tasks) {
        return core->submit(std::move(tasks));
    }

    /// Waits for all submitted tasks, then stops the daemons. Idempotent.
    void shutdown() { core->shutdown(); }

    /// Diagnostics for scheduler-invariant tests.
    uint32_t consistency_violations() const { return core->consistency_violations.load(); }
    uint32_t free_slots_now() const { return core->free_slots_mirror.load(); }

    /// Communicator-build log of the pilot's world (world + per-task comms).
    std::vector<CommBuildTiming> comm_build_log() const {
        return core->world.comms[0].build_log();
    }
};

/// Acquires a slot pool and starts the scheduler and executor daemons.
inline Pilot submit_pilot(const PilotConfig& cfg) {
    if (cfg.slots < 1) throw Error("submit_pilot: slots must be >= 1");
    auto core = std::make_shared<pilot_detail::PilotCore>();
    core->cfg = cfg;
    core->start();
    return Pilot{std::move(core)};
}

// ---------------------------------------------------------------------------
// Task builders
// ---------------------------------------------------------------------------

inline TaskDescription make_sleep_task(std::string uid, uint32_t ranks, double duration_ms) {
    TaskPayload p;
    p.params_json = nlohmann::json{{"duration_ms", duration_ms}}.dump();
    TaskDescription d;
    d.uid = std::move(uid);
    d.kind = TaskKind::Sleep;
    d.ranks_required = ranks;
    d.payload = p.encode();
    return d;
}

inline TaskDescription make_sort_task(std::string uid, uint32_t ranks, const Table& table,
                                      std::vector<std::string> keys, bool ascending = true) {
    TaskPayload p;
    p.params_json = nlohmann::json{{"keys", keys}, {"ascending", ascending}}.dump();
    for (const auto& chunk : split_rows(table, ranks))
        p.rank_inputs.push_back({encode_ipc(chunk)});
    TaskDescription d;
    d.uid = std::move(uid);
    d.kind = TaskKind::Sort;
    d.ranks_required = ranks;
    d.payload = p.encode();
    return d;
}

inline TaskDescription make_join_task(std::string uid, uint32_t ranks, const Table& left,
                                      const Table& right, std::vector<std::string> on) {
    TaskPayload p;
    p.params_json = nlohmann::json{{"on", on}}.dump();
    auto lchunks = split_rows(left, ranks);
    auto rchunks = split_rows(right, ranks);
    for (uint32_t i = 0; i < ranks; ++i)
        p.rank_inputs.push_back({encode_ipc(lchunks[i]), encode_ipc(rchunks[i])});
    TaskDescription d;
    d.uid = std::move(uid);
    d.kind = TaskKind::Join;
    d.ranks_required = ranks;
    d.payload = p.encode();
    return d;
}

inline TaskDescription make_train_task(std::string uid, uint32_t ranks, const Table& table,
                                       const nlohmann::json& params) {
    TaskPayload p;
    p.params_json = params.dump();
    p.shared_inputs.push_back(encode_ipc(table));
    TaskDescription d;
    d.uid = std::move(uid);
    d.kind = TaskKind::Train;
    d.ranks_required = ranks;
    d.payload = p.encode();
    return d;
}

inline TaskDescription make_infer_task(std::string uid, uint32_t ranks, const Table& table,
                                       Bytes model, const nlohmann::json& params) {
    TaskPayload p;
    p.params_json = params.dump();
    p.shared_inputs.push_back(encode_ipc(table));
    p.shared_inputs.push_back(std::move(model));
    TaskDescription d;
    d.uid = std::move(uid);
    d.kind = TaskKind::Infer;
    d.ranks_required = ranks;
    d.payload = p.encode();
    return d;
}

// ---------------------------------------------------------------------------
// Overhead reporting
// ---------------------------------------------------------------------------

struct OverheadRow {
    std::string uid;
    std::string kind;
    uint32_t ranks = 0;
    OverheadBreakdown timings;
    double makespan_contribution = 0;
    bool ok = false;
};

struct OverheadReport {
    std::vector<OverheadRow> rows;
    double session_makespan = 0;

    /// CSV with the canonical column set.
    std::string to_csv() const {
        std::string out = "uid,kind,ranks,t_deserialize,t_comm_build,t_deliver,overhead_total,t_execute\n";
        char line[512];
        for (const auto& r : rows) {
            std::snprintf(line, sizeof line, "%s,%s,%u,%.9f,%.9f,%.9f,%.9f,%.9f\n", r.uid.c_str(),
                          r.kind.c_str(), r.ranks, r.timings.t_deserialize, r.timings.t_comm_build,
                          r.timings.t_deliver, r.timings.overhead_total(), r.timings.t_execute);
            out += line;
        }
        return out;
    }
};

inline OverheadReport overhead_report(std::span<const TaskResult> results,
                                      std::span<const TaskDescription> descs = {}) {
    OverheadReport rep;
    double min_start = 0, max_finish = 0;
    bool any = false;
    for (size_t i = 0; i < results.size(); ++i) {
        const TaskResult& r = results[i];
        OverheadRow row;
        row.uid = r.uid;
        row.kind = i < descs.size() ? task_kind_name(descs[i].kind) : "?";
        row.ranks = i < descs.size() ? descs[i].ranks_required : 0;
        row.timings = r.timings;
        row.makespan_contribution = r.finished_at - r.started_at;
        row.ok = r.ok();
        rep.rows.push_back(std::move(row));
        if (!any || r.started_at < min_start) min_start = r.started_at;
        if (!any || r.finished_at > max_finish) max_finish = r.finished_at;
        any = true;
    }
    rep.session_makespan = any ? max_finish - min_start : 0;
    return rep;
}

}  // namespace drc
