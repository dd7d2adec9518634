#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "drc/common.hpp"
#include "drc/rng.hpp"
#include "drc/wire.hpp"

namespace drc {

enum class Backend : uint8_t { InProcess = 0, Tcp = 1 };

inline const char* backend_name(Backend b) {
    return b == Backend::InProcess ? "inproc" : "tcp";
}

/// Control-plane vs data-plane marker. Both planes share the fabric; the
/// marker travels in the wire frame's msg_type byte.
enum class Plane : uint8_t { Data = 0, Control = 1 };

enum class ReduceOp : uint8_t { Sum = 0, Max = 1, Min = 2 };

class Communicator;
struct SplitOutcome;

struct Message {
    Plane plane = Plane::Data;
    uint64_t comm_id = 0;
    uint32_t src = 0;
    uint32_t dst = 0;
    uint64_t tag = 0;
    Bytes payload;
};

/// Wall time spent constructing one communicator (world creation or split).
struct CommBuildTiming {
    uint64_t comm_id = 0;
    uint32_t size = 0;
    double wall_time = 0.0;
};

/// Tags at or above this value are reserved for the fabric's own collective
/// schedules; user and runtime traffic must stay below it.
inline constexpr uint64_t kInternalTagBase = 0xF000'0000'0000'0000ull;

namespace fabric_detail {

inline constexpr uint64_t kTagBroadcast = kInternalTagBase + 1;
inline constexpr uint64_t kTagGather = kInternalTagBase + 2;
inline constexpr uint64_t kTagAllToAll = kInternalTagBase + 3;
inline constexpr uint64_t kTagBarrier = kInternalTagBase + 4;

/// Mixes a parent communicator id and a per-parent sequence number into a
/// fresh child id. Deterministic, so repeated runs allocate identical ids.
inline uint64_t derive_comm_id(uint64_t parent_id, uint64_t seq) {
    SplitMix64 rng(parent_id ^ (seq * 0xD6E8FEB86659FD93ull));
    return rng.next() | 1ull;  // never 0
}

}  // namespace fabric_detail

/// Per-rank inbox. Messages are matched on (comm_id, src, tag); unmatched
/// messages stay queued, and arrival order gives per-(src,dst,tag) FIFO.
class Mailbox {
public:
    void push(Message&& msg) {
        {
            std::lock_guard<std::mutex> lock(mu_);
            if (closed_) return;
            queue_.push_back(std::move(msg));
        }
        cv_.notify_all();
    }

    /// Blocks until a matching message arrives. `src` empty means any source.
    /// A short yield loop runs before the condition-variable wait so that hot
    /// collective exchanges stay in the microsecond range.
    Message take(uint64_t comm_id, std::optional<uint32_t> src, uint64_t tag,
                 std::chrono::nanoseconds timeout) {
        bool infinite = timeout == std::chrono::nanoseconds::max();
        auto deadline = infinite ? std::chrono::steady_clock::time_point::max()
                                 : std::chrono::steady_clock::now() + timeout;
        for (int spin = 0; spin < 256; ++spin) {
            {
                std::lock_guard<std::mutex> lock(mu_);
                if (auto m = try_pop(comm_id, src, tag)) return std::move(*m);
                if (closed_) throw Error("fabric shut down");
            }
            std::this_thread::yield();
        }
        std::unique_lock<std::mutex> lock(mu_);
        for (;;) {
            if (auto m = try_pop(comm_id, src, tag)) return std::move(*m);
            if (closed_) throw Error("fabric shut down");
            if (infinite) {
                cv_.wait(lock);
                continue;
            }
            auto now = std::chrono::steady_clock::now();
            if (now >= deadline) {
                throw TimeoutError("recv timeout (comm " + std::to_string(comm_id) + ", tag " +
                                   std::to_string(tag) + ")");
            }
            // The deadline decision stays on the monotonic clock; the wait
            // slice converts to system_clock so it runs through
            // pthread_cond_timedwait (pthread_cond_clockwait is invisible to
            // gcc 11's thread sanitizer).
            cv_.wait_until(lock, std::chrono::system_clock::now() + (deadline - now));
        }
    }

    void close() {
        {
            std::lock_guard<std::mutex> lock(mu_);
            closed_ = true;
        }
        cv_.notify_all();
    }

private:
    std::optional<Message> try_pop(uint64_t comm_id, std::optional<uint32_t> src, uint64_t tag) {
        for (auto it = queue_.begin(); it != queue_.end(); ++it) {
            if (it->comm_id != comm_id || it->tag != tag) continue;
            if (src && it->src != *src) continue;
            Message m = std::move(*it);
            queue_.erase(it);
            return m;
        }
        return std::nullopt;
    }

    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Message> queue_;
    bool closed_ = false;
};

/// One fabric world: routing between world ranks plus shared bookkeeping
/// (communicator-build log). Lives as long as any Communicator handle.
class Transport {
public:
    virtual ~Transport() = default;

    virtual Backend backend() const = 0;
    virtual uint32_t world_size() const = 0;

    /// Delivers `msg` to `dst_world`'s mailbox. Thread safe. Sends never
    /// block on the receiver making progress.
    virtual void send(uint32_t src_world, uint32_t dst_world, Message&& msg) = 0;

    virtual Mailbox& mailbox(uint32_t world_rank) = 0;

    void record_build(const CommBuildTiming& t) {
        std::lock_guard<std::mutex> lock(log_mu_);
        build_log_.push_back(t);
    }
    std::vector<CommBuildTiming> build_log() const {
        std::lock_guard<std::mutex> lock(log_mu_);
        return build_log_;
    }

private:
    mutable std::mutex log_mu_;
    std::vector<CommBuildTiming> build_log_;
};

class InProcessTransport final : public Transport {
public:
    explicit InProcessTransport(uint32_t size) : boxes_(size) {
        for (auto& b : boxes_) b = std::make_unique<Mailbox>();
    }
    ~InProcessTransport() override {
        for (auto& b : boxes_) b->close();
    }

    Backend backend() const override { return Backend::InProcess; }
    uint32_t world_size() const override { return static_cast<uint32_t>(boxes_.size()); }

    void send(uint32_t, uint32_t dst_world, Message&& msg) override {
        boxes_.at(dst_world)->push(std::move(msg));
    }

    Mailbox& mailbox(uint32_t world_rank) override { return *boxes_.at(world_rank); }

private:
    std::vector<std::unique_ptr<Mailbox>> boxes_;
};

struct FabricOptions {
    /// Per-operation receive timeout. nanoseconds::max() disables the
    /// deadline entirely.
    std::chrono::nanoseconds timeout = std::chrono::seconds(30);
};

/// Ranked handle onto a communicator. One handle is driven by one logical
/// thread at a time; distinct handles (other ranks, other communicators) are
/// fully concurrent. Copies share the underlying transport.
class Communicator {
public:
    Communicator() = default;

    uint64_t comm_id() const { return comm_id_; }
    uint32_t rank() const { return rank_; }
    uint32_t size() const { return size_; }
    Backend backend() const { return transport_->backend(); }
    uint32_t world_rank_of(uint32_t comm_rank) const { return world_ranks_.at(comm_rank); }

    std::chrono::nanoseconds timeout() const { return timeout_; }
    void set_timeout(std::chrono::nanoseconds t) { timeout_ = t; }

    // -- point to point -----------------------------------------------------

    void send(uint32_t dst, uint64_t tag, std::span<const uint8_t> payload,
              Plane plane = Plane::Data) const {
        check_rank(dst);
        Message m;
        m.plane = plane;
        m.comm_id = comm_id_;
        m.src = rank_;
        m.dst = dst;
        m.tag = tag;
        m.payload.assign(payload.begin(), payload.end());
        transport_->send(world_ranks_[rank_], world_ranks_[dst], std::move(m));
    }

    Bytes recv(uint32_t src, uint64_t tag) const {
        check_rank(src);
        return transport_->mailbox(world_ranks_[rank_]).take(comm_id_, src, tag, timeout_).payload;
    }

    /// Receives the next message with `tag` from any source rank.
    std::pair<uint32_t, Bytes> recv_any(uint64_t tag,
                                        std::optional<std::chrono::nanoseconds> timeout = {}) const {
        Message m = transport_->mailbox(world_ranks_[rank_])
                        .take(comm_id_, std::nullopt, tag, timeout.value_or(timeout_));
        return {m.src, std::move(m.payload)};
    }

    /// Thread-safe self-post into this rank's own mailbox; the one fabric
    /// entry point that may be called from a foreign thread (used to inject
    /// local control traffic such as task submissions).
    void self_post(uint64_t tag, Bytes payload, Plane plane = Plane::Control) const {
        Message m;
        m.plane = plane;
        m.comm_id = comm_id_;
        m.src = rank_;
        m.dst = rank_;
        m.tag = tag;
        m.payload = std::move(payload);
        transport_->send(world_ranks_[rank_], world_ranks_[rank_], std::move(m));
    }

    // -- collectives ----------------------------------------------------------
    //
    // All collectives run fixed point-to-point schedules (root-fanout
    // broadcast, all-to-root gather, gather+reduce+broadcast allreduce) so
    // results and float rounding are identical across runs and backends.

    Bytes broadcast(uint32_t root, std::span<const uint8_t> payload = {}) const {
        check_rank(root);
        using namespace fabric_detail;
        if (rank_ == root) {
            for (uint32_t r = 0; r < size_; ++r)
                if (r != root) send(r, kTagBroadcast, payload);
            return Bytes(payload.begin(), payload.end());
        }
        return recv(root, kTagBroadcast);
    }

    std::optional<std::vector<Bytes>> gather(std::span<const uint8_t> payload, uint32_t root) const {
        check_rank(root);
        using namespace fabric_detail;
        if (rank_ != root) {
            send(root, kTagGather, payload);
            return std::nullopt;
        }
        std::vector<Bytes> out(size_);
        for (uint32_t r = 0; r < size_; ++r)
            out[r] = r == root ? Bytes(payload.begin(), payload.end()) : recv(r, kTagGather);
        return out;
    }

    std::vector<Bytes> all_to_all(const std::vector<Bytes>& outgoing) const {
        using namespace fabric_detail;
        if (outgoing.size() != size_)
            throw Error("all_to_all: outgoing length " + std::to_string(outgoing.size()) +
                        " != size " + std::to_string(size_));
        for (uint32_t dst = 0; dst < size_; ++dst)
            if (dst != rank_) send(dst, kTagAllToAll, outgoing[dst]);
        std::vector<Bytes> incoming(size_);
        incoming[rank_] = outgoing[rank_];
        for (uint32_t src = 0; src < size_; ++src)
            if (src != rank_) incoming[src] = recv(src, kTagAllToAll);
        return incoming;
    }

    std::vector<double> allreduce_f64(std::span<const double> vec, ReduceOp op) const {
        using namespace fabric_detail;
        ByteWriter w;
        for (double v : vec) w.f64(v);
        auto gathered = gather(w.data(), 0);

        Bytes reply;
        if (rank_ == 0) {
            std::string err;
            std::vector<double> acc(vec.begin(), vec.end());
            for (uint32_t r = 1; r < size_ && err.empty(); ++r) {
                const Bytes& b = (*gathered)[r];
                if (b.size() != vec.size() * 8) {
                    err = "allreduce: vector length mismatch at rank " + std::to_string(r);
                    break;
                }
                ByteReader rd(b);
                for (size_t i = 0; i < acc.size(); ++i) {
                    double v = rd.f64();
                    switch (op) {
                        case ReduceOp::Sum: acc[i] += v; break;
                        case ReduceOp::Max: acc[i] = v > acc[i] ? v : acc[i]; break;
                        case ReduceOp::Min: acc[i] = v < acc[i] ? v : acc[i]; break;
                    }
                }
            }
            ByteWriter out;
            if (err.empty()) {
                out.u8(0);
                for (double v : acc) out.f64(v);
            } else {
                out.u8(1);
                out.str(err);
            }
            reply = broadcast(0, out.data());
        } else {
            reply = broadcast(0);
        }

        ByteReader rd(reply);
        if (rd.u8() != 0) {
            throw Error(std::string(reinterpret_cast<const char*>(reply.data()) + 1,
                                    reply.size() - 1));
        }
        std::vector<double> out(vec.size());
        for (auto& v : out) v = rd.f64();
        return out;
    }

    void barrier() const {
        using namespace fabric_detail;
        if (rank_ == 0) {
            for (uint32_t r = 1; r < size_; ++r) (void)recv(r, kTagBarrier);
            for (uint32_t r = 1; r < size_; ++r) send(r, kTagBarrier, {});
        } else {
            send(0, kTagBarrier, {});
            (void)recv(0, kTagBarrier);
        }
    }

    // -- dynamic communicator construction ------------------------------------

    /// Collective over all ranks of this communicator. Members get a fresh
    /// communicator whose rank is their position in `member_ranks`;
    /// non-members participate in the id agreement only. The chosen child id
    /// is proposed by member_ranks[0] and broadcast so every rank agrees.
    /// Defined after SplitOutcome below.
    SplitOutcome split(std::span<const uint32_t> member_ranks) const;

    /// Builds a communicator from an externally agreed id and member list;
    /// only the members call this (the runtime path where a master hands out
    /// the id and membership, then the group synchronizes). Returns the
    /// communicator plus this rank's build wall time.
    static std::pair<Communicator, CommBuildTiming> build_group(
        const Communicator& any_member_handle, uint64_t comm_id,
        std::vector<uint32_t> member_world_ranks, uint32_t my_rank);

    /// Communicator-build log of the whole world (one entry per communicator
    /// created on this transport).
    std::vector<CommBuildTiming> build_log() const { return transport_->build_log(); }

private:
    friend struct WorldFactory;

    struct CommState {
        std::atomic<uint64_t> split_seq{0};
    };

    Communicator derive(uint64_t comm_id, std::vector<uint32_t> world_ranks, uint32_t rank) const {
        Communicator c;
        c.transport_ = transport_;
        c.comm_id_ = comm_id;
        c.rank_ = rank;
        c.size_ = static_cast<uint32_t>(world_ranks.size());
        c.world_ranks_ = std::move(world_ranks);
        c.timeout_ = timeout_;
        c.state_ = std::make_shared<CommState>();
        return c;
    }

    void check_rank(uint32_t r) const {
        if (r >= size_) throw Error("rank " + std::to_string(r) + " out of range");
    }

    std::shared_ptr<Transport> transport_;
    uint64_t comm_id_ = 0;
    uint32_t rank_ = 0;
    uint32_t size_ = 1;
    std::vector<uint32_t> world_ranks_;
    std::chrono::nanoseconds timeout_ = std::chrono::seconds(30);
    std::shared_ptr<CommState> state_;
};

struct SplitOutcome {
    std::optional<Communicator> comm;  // empty for non-members
    CommBuildTiming timing;            // this rank's local build wall time
};

inline SplitOutcome Communicator::split(std::span<const uint32_t> member_ranks) const {
    using namespace fabric_detail;
    StopWatch watch;
    if (member_ranks.empty()) throw Error("split: invalid subset (empty)");
    for (size_t i = 0; i < member_ranks.size(); ++i) {
        if (member_ranks[i] >= size_) throw Error("split: invalid subset (rank out of range)");
        if (i > 0 && member_ranks[i] <= member_ranks[i - 1])
            throw Error("split: invalid subset (not strictly increasing)");
    }

    uint64_t child_id;
    uint32_t proposer = member_ranks[0];
    if (rank_ == proposer) {
        uint64_t seq = state_->split_seq.fetch_add(1) + 1;
        child_id = derive_comm_id(comm_id_, seq);
        ByteWriter w;
        w.u64(child_id);
        (void)broadcast(proposer, w.data());
    } else {
        state_->split_seq.fetch_add(1);
        Bytes agreed = broadcast(proposer);
        ByteReader rd(agreed);
        child_id = rd.u64();
    }

    auto it = std::find(member_ranks.begin(), member_ranks.end(), rank_);
    if (it == member_ranks.end()) {
        CommBuildTiming t{child_id, static_cast<uint32_t>(member_ranks.size()), watch.elapsed_s()};
        return {std::nullopt, t};
    }

    std::vector<uint32_t> member_world;
    member_world.reserve(member_ranks.size());
    for (uint32_t r : member_ranks) member_world.push_back(world_ranks_[r]);
    uint32_t child_rank = static_cast<uint32_t>(it - member_ranks.begin());

    Communicator child = derive(child_id, std::move(member_world), child_rank);
    child.barrier();

    CommBuildTiming t{child_id, child.size(), watch.elapsed_s()};
    if (child_rank == 0) transport_->record_build(t);
    return {std::move(child), t};
}

inline std::pair<Communicator, CommBuildTiming> Communicator::build_group(
    const Communicator& any_member_handle, uint64_t comm_id,
    std::vector<uint32_t> member_world_ranks, uint32_t my_rank) {
    StopWatch watch;
    Communicator child =
        any_member_handle.derive(comm_id, std::move(member_world_ranks), my_rank);
    // No barrier here: the id and membership come from one authority, and
    // mailboxes buffer by comm_id, so traffic sent before a member constructs
    // its handle is simply waiting for it. The first collective on the child
    // synchronizes the group.
    CommBuildTiming t{comm_id, child.size(), watch.elapsed_s()};
    if (my_rank == 0) child.transport_->record_build(t);
    return {std::move(child), t};
}

struct World {
    std::vector<Communicator> comms;  // one handle per rank
    CommBuildTiming build_timing;
};

struct WorldFactory {
    static World from_transport(std::shared_ptr<Transport> transport, const FabricOptions& opts,
                                double build_seconds) {
        uint32_t size = transport->world_size();
        World world;
        world.comms.reserve(size);
        for (uint32_t r = 0; r < size; ++r) {
            Communicator c;
            c.transport_ = transport;
            c.comm_id_ = fabric_detail::derive_comm_id(0, 1);
            c.rank_ = r;
            c.size_ = size;
            c.world_ranks_.resize(size);
            for (uint32_t i = 0; i < size; ++i) c.world_ranks_[i] = i;
            c.timeout_ = opts.timeout;
            c.state_ = std::make_shared<Communicator::CommState>();
            world.comms.push_back(std::move(c));
        }
        world.build_timing = {world.comms[0].comm_id(), size, build_seconds};
        transport->record_build(world.build_timing);
        return world;
    }
};

// ---------------------------------------------------------------------------
// TCP fabric over loopback. One persistent connection per ordered rank pair,
// established rank-low-connects-to-rank-high. Each rank runs a reader thread
// that demultiplexes frames into its mailbox.
//
// Wire frame (little-endian):
//   u32 frame length (of the remainder)
//   u8  msg_type (0 = data, 1 = control)
//   u64 comm_id | u32 src_rank | u32 dst_rank | u64 tag | payload bytes
// ---------------------------------------------------------------------------

namespace tcp_detail {

inline constexpr size_t kFrameHeader = 1 + 8 + 4 + 4 + 8;
inline constexpr uint32_t kMaxFrame = 1u << 30;

inline void throw_errno(const std::string& what) {
    throw Error(what + ": " + std::strerror(errno));
}

inline void write_all(int fd, const uint8_t* data, size_t n) {
    size_t off = 0;
    while (off < n) {
        ssize_t w = ::send(fd, data + off, n - off, MSG_NOSIGNAL);
        if (w < 0) {
            if (errno == EINTR) continue;
            throw_errno("tcp send");
        }
        off += static_cast<size_t>(w);
    }
}

inline Bytes encode_frame(const Message& m) {
    ByteWriter w;
    w.u32(static_cast<uint32_t>(kFrameHeader + m.payload.size()));
    w.u8(static_cast<uint8_t>(m.plane));
    w.u64(m.comm_id);
    w.u32(m.src);
    w.u32(m.dst);
    w.u64(m.tag);
    w.bytes(m.payload);
    return w.take();
}

}  // namespace tcp_detail

class TcpTransport final : public Transport {
public:
    explicit TcpTransport(uint32_t size) : size_(size), boxes_(size), links_(size) {
        for (auto& b : boxes_) b = std::make_unique<Mailbox>();
        for (auto& row : links_) row = std::vector<Link>(size);
        connect_mesh();
        start_readers();
    }

    ~TcpTransport() override {
        for (auto& b : boxes_) b->close();
        for (uint32_t r = 0; r < size_; ++r)
            if (wake_fds_[r][1] >= 0) (void)!::write(wake_fds_[r][1], "x", 1);
        for (auto& t : readers_)
            if (t.joinable()) t.join();
        for (auto& row : links_)
            for (auto& l : row)
                if (l.fd >= 0) ::close(l.fd);
        for (auto& w : wake_fds_) {
            if (w[0] >= 0) ::close(w[0]);
            if (w[1] >= 0) ::close(w[1]);
        }
    }

    Backend backend() const override { return Backend::Tcp; }
    uint32_t world_size() const override { return size_; }

    void send(uint32_t src_world, uint32_t dst_world, Message&& msg) override {
        if (src_world == dst_world) {
            boxes_.at(dst_world)->push(std::move(msg));
            return;
        }
        Link& link = links_.at(src_world).at(dst_world);
        Bytes frame = tcp_detail::encode_frame(msg);
        std::lock_guard<std::mutex> lock(link.write_mu);
        if (link.fd < 0) throw Error("tcp send: peer disconnected");
        tcp_detail::write_all(link.fd, frame.data(), frame.size());
    }

    Mailbox& mailbox(uint32_t world_rank) override { return *boxes_.at(world_rank); }

    /// Listen addresses per rank, e.g. "127.0.0.1:41712".
    const std::vector<std::string>& peer_addresses() const { return peer_addrs_; }

private:
    struct Link {
        Link() = default;
        Link(Link&& other) noexcept : fd(other.fd) { other.fd = -1; }
        int fd = -1;
        std::mutex write_mu;
    };

    void connect_mesh() {
        std::vector<int> listeners(size_, -1);
        std::vector<uint16_t> ports(size_, 0);
        peer_addrs_.resize(size_);
        wake_fds_.assign(size_, {-1, -1});

        for (uint32_t r = 0; r < size_; ++r) {
            int fd = ::socket(AF_INET, SOCK_STREAM, 0);
            if (fd < 0) tcp_detail::throw_errno("tcp socket");
            sockaddr_in addr{};
            addr.sin_family = AF_INET;
            addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
            addr.sin_port = 0;
            if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
                tcp_detail::throw_errno("tcp bind");
            if (::listen(fd, static_cast<int>(size_)) != 0) tcp_detail::throw_errno("tcp listen");
            socklen_t len = sizeof addr;
            ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
            listeners[r] = fd;
            ports[r] = ntohs(addr.sin_port);
            peer_addrs_[r] = "127.0.0.1:" + std::to_string(ports[r]);
        }

        // Low rank connects to high rank's listener; a 4-byte hello carrying
        // the connector's rank pairs the accepted socket with its peer.
        for (uint32_t lo = 0; lo < size_; ++lo) {
            for (uint32_t hi = lo + 1; hi < size_; ++hi) {
                int cfd = ::socket(AF_INET, SOCK_STREAM, 0);
                if (cfd < 0) tcp_detail::throw_errno("tcp socket");
                sockaddr_in addr{};
                addr.sin_family = AF_INET;
                addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
                addr.sin_port = htons(ports[hi]);
                if (::connect(cfd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
                    tcp_detail::throw_errno("tcp connect");
                set_nodelay(cfd);
                uint8_t hello[4];
                for (int i = 0; i < 4; ++i) hello[i] = static_cast<uint8_t>((lo >> (8 * i)) & 0xFF);
                tcp_detail::write_all(cfd, hello, 4);

                int afd = ::accept(listeners[hi], nullptr, nullptr);
                if (afd < 0) tcp_detail::throw_errno("tcp accept");
                set_nodelay(afd);
                uint8_t peer[4];
                read_exact(afd, peer, 4);
                uint32_t peer_rank = 0;
                for (int i = 0; i < 4; ++i) peer_rank |= static_cast<uint32_t>(peer[i]) << (8 * i);
                if (peer_rank != lo) throw Error("tcp mesh: unexpected peer hello");

                links_[lo][hi].fd = cfd;
                links_[hi][lo].fd = afd;
            }
        }

        for (int fd : listeners) ::close(fd);

        for (uint32_t r = 0; r < size_; ++r) {
            int pipefd[2];
            if (::pipe(pipefd) != 0) tcp_detail::throw_errno("pipe");
            wake_fds_[r] = {pipefd[0], pipefd[1]};
        }
    }

    static void set_nodelay(int fd) {
        int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    }

    static void read_exact(int fd, uint8_t* out, size_t n) {
        size_t off = 0;
        while (off < n) {
            ssize_t r = ::read(fd, out + off, n - off);
            if (r < 0) {
                if (errno == EINTR) continue;
                tcp_detail::throw_errno("tcp read");
            }
            if (r == 0) throw Error("tcp read: peer closed");
            off += static_cast<size_t>(r);
        }
    }

    void start_readers() {
        readers_.reserve(size_);
        for (uint32_t r = 0; r < size_; ++r)
            readers_.emplace_back([this, r] { reader_loop(r); });
    }

    void reader_loop(uint32_t rank) {
        struct Stream {
            int fd;
            Bytes buf;
        };
        std::vector<Stream> streams;
        for (uint32_t peer = 0; peer < size_; ++peer)
            if (peer != rank) streams.push_back({links_[rank][peer].fd, {}});

        std::vector<pollfd> pfds(streams.size() + 1);
        for (;;) {
            for (size_t i = 0; i < streams.size(); ++i)
                pfds[i] = {streams[i].fd, static_cast<short>(streams[i].fd >= 0 ? POLLIN : 0), 0};
            pfds.back() = {wake_fds_[rank][0], POLLIN, 0};
            if (::poll(pfds.data(), static_cast<nfds_t>(pfds.size()), -1) < 0) {
                if (errno == EINTR) continue;
                break;
            }
            if (pfds.back().revents & POLLIN) break;  // shutdown

            for (size_t i = 0; i < streams.size(); ++i) {
                if (!(pfds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
                uint8_t chunk[65536];
                ssize_t n = ::read(streams[i].fd, chunk, sizeof chunk);
                if (n <= 0) {
                    streams[i].fd = -1;  // peer closed; pending recvs time out
                    continue;
                }
                auto& buf = streams[i].buf;
                buf.insert(buf.end(), chunk, chunk + n);
                drain_frames(rank, buf);
            }
        }
    }

    void drain_frames(uint32_t rank, Bytes& buf) {
        size_t pos = 0;
        while (buf.size() - pos >= 4) {
            uint32_t len = 0;
            for (int i = 0; i < 4; ++i) len |= static_cast<uint32_t>(buf[pos + i]) << (8 * i);
            if (len < tcp_detail::kFrameHeader || len > tcp_detail::kMaxFrame) {
                log_error("tcp frame: bad length " + std::to_string(len));
                buf.clear();
                return;
            }
            if (buf.size() - pos - 4 < len) break;
            ByteReader r(std::span<const uint8_t>(buf.data() + pos + 4, len));
            Message m;
            m.plane = static_cast<Plane>(r.u8());
            m.comm_id = r.u64();
            m.src = r.u32();
            m.dst = r.u32();
            m.tag = r.u64();
            auto payload = r.raw(len - tcp_detail::kFrameHeader);
            m.payload.assign(payload.begin(), payload.end());
            boxes_[rank]->push(std::move(m));
            pos += 4 + len;
        }
        buf.erase(buf.begin(), buf.begin() + pos);
    }

    uint32_t size_;
    std::vector<std::unique_ptr<Mailbox>> boxes_;
    std::vector<std::vector<Link>> links_;
    std::vector<std::array<int, 2>> wake_fds_;
    std::vector<std::thread> readers_;
    std::vector<std::string> peer_addrs_;
};

/// Creates a fully connected world of `size` ranks and returns one handle per
/// rank.
inline World create_world(Backend backend, uint32_t size, const FabricOptions& opts = {}) {
    if (size < 1) throw Error("create_world: size must be >= 1");
    StopWatch watch;
    std::shared_ptr<Transport> transport;
    if (backend == Backend::InProcess) {
        transport = std::make_shared<InProcessTransport>(size);
    } else {
        transport = std::make_shared<TcpTransport>(size);
    }
    return WorldFactory::from_transport(std::move(transport), opts, watch.elapsed_s());
}

}  // namespace drc
