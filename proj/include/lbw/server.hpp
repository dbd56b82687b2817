// SPDX-License-Identifier: Apache-2.0
#pragma once

// Session host. One TCP port carries two transports:
//   raw      the framed protocol stream as is
//   browser  a WebSocket upgrade (first bytes "GET "); each binary message
//            carries protocol bytes, server messages go one per WebSocket frame
// Per connection: the calling thread reads and decodes, a generation thread
// owns the session, a writer thread drains the egress queue.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <thread>
#include <variant>

#include "lbw/inference.hpp"
#include "lbw/log.hpp"
#include "lbw/protocol.hpp"

namespace lbw::net {

class Socket {
public:
    explicit Socket(int fd = -1) : fd_(fd) {}
    ~Socket() { close(); }
    Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    Socket& operator=(Socket&& o) noexcept {
        if (this != &o) {
            close();
            fd_ = std::exchange(o.fd_, -1);
        }
        return *this;
    }
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;

    int fd() const { return fd_; }
    bool valid() const { return fd_ >= 0; }
    void close() {
        if (fd_ >= 0) ::close(fd_);
        fd_ = -1;
    }
    void shutdown_both() {
        if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
    }

    bool send_all(std::span<const std::uint8_t> b) {
        size_t off = 0;
        while (off < b.size()) {
            const ssize_t n = ::send(fd_, b.data() + off, b.size() - off, MSG_NOSIGNAL);
            if (n < 0 && errno == EINTR) continue;
            if (n <= 0) return false;
            off += static_cast<size_t>(n);
        }
        return true;
    }

    static constexpr long kClosed = 0, kFailed = -1, kTimeout = -2;

    /// >0 bytes read, kClosed, kFailed or kTimeout. timeout_ms < 0 blocks.
    long recv_some(std::uint8_t* buf, size_t cap, int timeout_ms = -1) {
        if (timeout_ms >= 0) {
            pollfd p{fd_, POLLIN, 0};
            const int r = ::poll(&p, 1, timeout_ms);
            if (r == 0) return kTimeout;
            if (r < 0) return errno == EINTR ? kTimeout : kFailed;
        }
        for (;;) {
            const ssize_t n = ::recv(fd_, buf, cap, 0);
            if (n < 0 && errno == EINTR) continue;
            if (n < 0) return kFailed;
            return static_cast<long>(n);
        }
    }

private:
    int fd_;
};

inline Socket listen_tcp(const std::string& host, int port, int backlog = 4) {
    Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    LBW_REQUIRE(s.valid(), ErrorCode::io_error, "socket() failed");
    const int one = 1;
    ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in a{};
    a.sin_family = AF_INET;
    a.sin_port = htons(static_cast<std::uint16_t>(port));
    LBW_REQUIRE(::inet_pton(AF_INET, host.c_str(), &a.sin_addr) == 1, ErrorCode::invalid_argument, "bad IPv4 address " + host);
    LBW_REQUIRE(::bind(s.fd(), reinterpret_cast<sockaddr*>(&a), sizeof a) == 0, ErrorCode::io_error,
                "cannot bind " + host + ":" + std::to_string(port));
    LBW_REQUIRE(::listen(s.fd(), backlog) == 0, ErrorCode::io_error, "listen() failed");
    return s;
}

inline int bound_port(const Socket& s) {
    sockaddr_in a{};
    socklen_t len = sizeof a;
    ::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&a), &len);
    return ntohs(a.sin_port);
}

inline Socket connect_tcp(const std::string& host, int port) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    LBW_REQUIRE(::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) == 0, ErrorCode::io_error,
                "cannot resolve " + host);
    Socket s(::socket(res->ai_family, res->ai_socktype, res->ai_protocol));
    const int rc = s.valid() ? ::connect(s.fd(), res->ai_addr, res->ai_addrlen) : -1;
    ::freeaddrinfo(res);
    LBW_REQUIRE(rc == 0, ErrorCode::io_error, "cannot connect to " + host + ":" + std::to_string(port));
    const int one = 1;
    ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    return s;
}

// ---- WebSocket framing

inline std::string base64(std::span<const std::uint8_t> b) {
    std::string out(4 * ((b.size() + 2) / 3) + 1, '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), b.data(), static_cast<int>(b.size()));
    out.resize(static_cast<size_t>(n));
    return out;
}

inline std::string websocket_accept(std::string_view key) {
    const std::string s = std::string(key) + "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";
    std::array<std::uint8_t, EVP_MAX_MD_SIZE> md{};
    unsigned len = 0;
    EVP_Digest(s.data(), s.size(), md.data(), &len, EVP_sha1(), nullptr);
    return base64(std::span<const std::uint8_t>(md.data(), len));
}

enum class WsOp : std::uint8_t { cont = 0, text = 1, binary = 2, close = 8, ping = 9, pong = 10 };

inline std::vector<std::uint8_t> ws_frame(WsOp op, std::span<const std::uint8_t> payload,
                                          const std::array<std::uint8_t, 4>* mask = nullptr) {
    std::vector<std::uint8_t> f;
    f.push_back(static_cast<std::uint8_t>(0x80 | static_cast<int>(op)));
    const std::uint8_t mbit = mask ? 0x80 : 0;
    const size_t n = payload.size();
    if (n < 126) {
        f.push_back(static_cast<std::uint8_t>(mbit | n));
    } else if (n <= 0xFFFF) {
        f.push_back(mbit | 126);
        f.push_back(static_cast<std::uint8_t>(n >> 8));
        f.push_back(static_cast<std::uint8_t>(n));
    } else {
        f.push_back(mbit | 127);
        for (int i = 7; i >= 0; --i) f.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(n) >> (8 * i)));
    }
    if (mask) f.insert(f.end(), mask->begin(), mask->end());
    const size_t start = f.size();
    f.insert(f.end(), payload.begin(), payload.end());
    if (mask)
        for (size_t i = 0; i < n; ++i) f[start + i] ^= (*mask)[i % 4];
    return f;
}

struct WsFrame {
    bool fin = true;
    WsOp op = WsOp::binary;
    std::vector<std::uint8_t> payload;
};

enum class WsParse { frame, need_more, error };

/// Parses one frame at buf[pos..]; advances pos on success.
inline WsParse parse_ws_frame(const std::vector<std::uint8_t>& buf, size_t& pos, WsFrame& out, bool require_mask,
                              std::uint64_t max_payload) {
    const size_t avail = buf.size() - pos;
    const std::uint8_t* p = buf.data() + pos;
    if (avail < 2) return WsParse::need_more;
    if (p[0] & 0x70) return WsParse::error;
    const bool masked = p[1] & 0x80;
    if (masked != require_mask) return WsParse::error;
    std::uint64_t n = p[1] & 0x7F;
    size_t h = 2;
    if (n == 126) {
        if (avail < 4) return WsParse::need_more;
        n = (std::uint64_t{p[2]} << 8) | p[3];
        h = 4;
    } else if (n == 127) {
        if (avail < 10) return WsParse::need_more;
        n = 0;
        for (int i = 0; i < 8; ++i) n = (n << 8) | p[2 + i];
        h = 10;
    }
    if (n > max_payload) return WsParse::error;
    const size_t mh = masked ? 4 : 0;
    if (avail < h + mh + n) return WsParse::need_more;
    out.fin = p[0] & 0x80;
    out.op = static_cast<WsOp>(p[0] & 0x0F);
    out.payload.assign(p + h + mh, p + h + mh + n);
    if (masked)
        for (size_t i = 0; i < n; ++i) out.payload[i] ^= p[h + (i % 4)];
    pos += h + mh + static_cast<size_t>(n);
    return WsParse::frame;
}

inline std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

/// Value of an HTTP header, case-insensitive name; empty when absent.
inline std::string http_header(const std::string& head, const std::string& name) {
    const std::string h = lower(head), key = "\r\n" + lower(name) + ":";
    const size_t at = h.find(key);
    if (at == std::string::npos) return {};
    size_t b = at + key.size();
    const size_t e = head.find("\r\n", b);
    while (b < e && (head[b] == ' ' || head[b] == '\t')) ++b;
    size_t end = e;
    while (end > b && (head[end - 1] == ' ' || head[end - 1] == '\t')) --end;
    return head.substr(b, end - b);
}

/// A protocol byte stream over raw TCP or a WebSocket.
class Stream {
public:
    static constexpr size_t kMaxHandshake = 8192;

    /// Server side: sniffs the transport and completes a WebSocket upgrade.
    /// A client silent for sniff_ms is taken to be a raw stream client.
    static std::unique_ptr<Stream> accept(Socket s, int sniff_ms = 250, int timeout_ms = 5000) {
        auto st = std::unique_ptr<Stream>(new Stream(std::move(s), false));
        st->sniff(sniff_ms, timeout_ms);
        return st;
    }

    /// Client side. With websocket the HTTP upgrade runs first.
    static std::unique_ptr<Stream> connect(const std::string& host, int port, bool websocket, int timeout_ms = 5000) {
        auto st = std::unique_ptr<Stream>(new Stream(connect_tcp(host, port), true));
        if (websocket) st->client_handshake(host, timeout_ms);
        return st;
    }

    bool websocket() const { return ws_; }

    /// Appends protocol bytes to out. Returns bytes appended, or a Socket status.
    long read(std::vector<std::uint8_t>& out, int timeout_ms) {
        if (!pending_.empty()) {
            const long n = static_cast<long>(pending_.size());
            out.insert(out.end(), pending_.begin(), pending_.end());
            pending_.clear();
            return n;
        }
        std::array<std::uint8_t, 65536> buf{};
        if (!ws_) {
            const long n = sock_.recv_some(buf.data(), buf.size(), timeout_ms);
            if (n > 0) out.insert(out.end(), buf.begin(), buf.begin() + n);
            return n;
        }
        for (;;) {
            long got = 0;
            for (;;) {
                WsFrame f;
                const WsParse r = parse_ws_frame(raw_, raw_pos_, f, !client_, proto::kMaxPayload + proto::kHeaderSize + 4096);
                if (r == WsParse::error) return Socket::kFailed;
                if (r == WsParse::need_more) break;
                switch (f.op) {
                case WsOp::cont:
                case WsOp::binary:
                case WsOp::text:
                    out.insert(out.end(), f.payload.begin(), f.payload.end());
                    got += static_cast<long>(f.payload.size());
                    break;
                case WsOp::ping: send_ws(WsOp::pong, f.payload); break;
                case WsOp::close:
                    send_ws(WsOp::close, f.payload);
                    return got > 0 ? got : Socket::kClosed;
                default: break;
                }
            }
            if (raw_pos_ == raw_.size()) raw_.clear(), raw_pos_ = 0;
            if (got > 0) return got;
            const long n = sock_.recv_some(buf.data(), buf.size(), timeout_ms);
            if (n <= 0) return n;
            raw_.insert(raw_.end(), buf.begin(), buf.begin() + n);
        }
    }

    /// One protocol message (or any protocol bytes). Thread-safe.
    bool write(std::span<const std::uint8_t> bytes) {
        if (!ws_) {
            std::lock_guard lock(wmu_);
            return sock_.send_all(bytes);
        }
        return send_ws(WsOp::binary, bytes);
    }

    void shutdown() { sock_.shutdown_both(); }

private:
    Stream(Socket s, bool client) : sock_(std::move(s)), client_(client) {}

    bool send_ws(WsOp op, std::span<const std::uint8_t> payload) {
        std::lock_guard lock(wmu_);
        if (!client_) return sock_.send_all(ws_frame(op, payload));
        std::array<std::uint8_t, 4> mask{};
        for (auto& m : mask) m = static_cast<std::uint8_t>(mask_rng_());
        return sock_.send_all(ws_frame(op, payload, &mask));
    }

    std::string read_http_head(int timeout_ms, std::vector<std::uint8_t>& buffer) {
        std::array<std::uint8_t, 4096> buf{};
        for (;;) {
            const std::string s(buffer.begin(), buffer.end());
            const size_t end = s.find("\r\n\r\n");
            if (end != std::string::npos) {
                buffer.erase(buffer.begin(), buffer.begin() + static_cast<std::ptrdiff_t>(end + 4));
                return s.substr(0, end + 2);
            }
            LBW_REQUIRE(buffer.size() < kMaxHandshake, ErrorCode::parse_error, "HTTP head too large");
            const long n = sock_.recv_some(buf.data(), buf.size(), timeout_ms);
            LBW_REQUIRE(n > 0, ErrorCode::io_error, "connection closed during handshake");
            buffer.insert(buffer.end(), buf.begin(), buf.begin() + n);
        }
    }

    void sniff(int sniff_ms, int timeout_ms) {
        std::array<std::uint8_t, 4096> buf{};
        const long n = sock_.recv_some(buf.data(), buf.size(), sniff_ms);
        if (n == Socket::kTimeout) return;
        LBW_REQUIRE(n > 0, ErrorCode::io_error, "client left before sending");
        std::vector<std::uint8_t> first(buf.begin(), buf.begin() + n);
        if (first[0] != 'G') {
            pending_ = std::move(first);
            return;
        }
        const std::string head = read_http_head(timeout_ms, first);
        const std::string key = http_header(head, "Sec-WebSocket-Key");
        if (head.rfind("GET ", 0) != 0 || lower(http_header(head, "Upgrade")) != "websocket" || key.empty()) {
            const std::string resp = "HTTP/1.1 400 Bad Request\r\nContent-Length: 0\r\nConnection: close\r\n\r\n";
            sock_.send_all(std::span(reinterpret_cast<const std::uint8_t*>(resp.data()), resp.size()));
            throw Error(ErrorCode::parse_error, "HTTP request is not a WebSocket upgrade");
        }
        const std::string resp = "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n"
                                 "Sec-WebSocket-Accept: " + websocket_accept(key) + "\r\n\r\n";
        LBW_REQUIRE(sock_.send_all(std::span(reinterpret_cast<const std::uint8_t*>(resp.data()), resp.size())),
                    ErrorCode::io_error, "handshake write failed");
        ws_ = true;
        raw_ = std::move(first);
    }

    void client_handshake(const std::string& host, int timeout_ms) {
        std::array<std::uint8_t, 16> nonce{};
        for (auto& b : nonce) b = static_cast<std::uint8_t>(mask_rng_());
        const std::string key = base64(nonce);
        const std::string req = "GET / HTTP/1.1\r\nHost: " + host + "\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n"
                                "Sec-WebSocket-Key: " + key + "\r\nSec-WebSocket-Version: 13\r\n\r\n";
        LBW_REQUIRE(sock_.send_all(std::span(reinterpret_cast<const std::uint8_t*>(req.data()), req.size())),
                    ErrorCode::io_error, "handshake write failed");
        std::vector<std::uint8_t> buffer;
        const std::string head = read_http_head(timeout_ms, buffer);
        LBW_REQUIRE(head.rfind("HTTP/1.1 101", 0) == 0, ErrorCode::parse_error, "upgrade refused");
        LBW_REQUIRE(http_header(head, "Sec-WebSocket-Accept") == websocket_accept(key), ErrorCode::parse_error,
                    "bad Sec-WebSocket-Accept");
        ws_ = true;
        raw_ = std::move(buffer);
    }

    Socket sock_;
    bool client_ = false, ws_ = false;
    std::vector<std::uint8_t> pending_, raw_;
    size_t raw_pos_ = 0;
    std::mutex wmu_;
    std::minstd_rand mask_rng_{std::random_device{}()};
};

/// Minimal protocol client; the UI's counterpart, used by tests and the CLI.
class Client {
public:
    Client(const std::string& host, int port, bool websocket = false)
        : stream_(Stream::connect(host, port, websocket)) {}

    bool send(const proto::Message& m) { return stream_->write(proto::encode(m)); }
    bool send_bytes(std::span<const std::uint8_t> b) { return stream_->write(b); }

    /// Next decoded message or error; need_more on timeout, error/truncated when the server hung up.
    proto::DecodeResult next(int timeout_ms = 10000) {
        const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
        for (;;) {
            auto r = decoder_.next();
            if (r.status != proto::DecodeStatus::need_more) return r;
            if (closed_) {
                r.status = proto::DecodeStatus::error;
                r.error = proto::ProtoError::truncated;
                return r;
            }
            const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
            if (left.count() <= 0) return r;
            std::vector<std::uint8_t> buf;
            const long n = stream_->read(buf, static_cast<int>(left.count()));
            if (n > 0) decoder_.feed(buf);
            else if (n == Socket::kClosed || n == Socket::kFailed) closed_ = true;
        }
    }

    /// Next message of type M, skipping others; throws io_error on timeout or hang-up.
    template <class M>
    M expect(int timeout_ms = 10000) {
        for (;;) {
            auto r = next(timeout_ms);
            LBW_REQUIRE(r.status != proto::DecodeStatus::need_more, ErrorCode::io_error, "timed out waiting for message");
            if (r.status == proto::DecodeStatus::error && r.error == proto::ProtoError::truncated && closed_)
                throw Error(ErrorCode::io_error, "server closed the connection");
            if (r.status == proto::DecodeStatus::message)
                if (auto* m = std::get_if<M>(&r.message)) return *m;
        }
    }

    bool closed() const { return closed_; }
    void shutdown() { stream_->shutdown(); }

private:
    std::unique_ptr<Stream> stream_;
    proto::Decoder decoder_;
    bool closed_ = false;
};

/// Outgoing messages. FRAMEs beyond the budget push out the oldest unsent
/// FRAME; other messages are never dropped.
class EgressQueue {
public:
    struct Item {
        std::vector<std::uint8_t> bytes;
        bool frame = false;
    };

    explicit EgressQueue(size_t frame_budget) : budget_(frame_budget) {}

    /// Returns the number of frames dropped to make room.
    int push(std::vector<std::uint8_t> bytes, bool frame) {
        int dropped = 0;
        {
            std::lock_guard lock(mu_);
            if (frame) {
                while (frames_ >= budget_ && frames_ > 0) {
                    const auto it = std::find_if(items_.begin(), items_.end(), [](const Item& i) { return i.frame; });
                    items_.erase(it);
                    --frames_;
                    ++dropped;
                }
                ++frames_;
            }
            items_.push_back({std::move(bytes), frame});
        }
        cv_.notify_all();
        return dropped;
    }

    /// Blocks for the next item; empty once closed and drained.
    std::optional<Item> pop() {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return closed_ || !items_.empty(); });
        if (items_.empty()) return std::nullopt;
        Item i = std::move(items_.front());
        items_.pop_front();
        if (i.frame) --frames_;
        return i;
    }

    void drop_frames() {
        std::lock_guard lock(mu_);
        std::erase_if(items_, [](const Item& i) { return i.frame; });
        frames_ = 0;
    }

    void close() {
        {
            std::lock_guard lock(mu_);
            closed_ = true;
        }
        cv_.notify_all();
    }

    size_t frames() const {
        std::lock_guard lock(mu_);
        return frames_;
    }
    size_t size() const {
        std::lock_guard lock(mu_);
        return items_.size();
    }

private:
    size_t budget_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Item> items_;
    size_t frames_ = 0;
    bool closed_ = false;
};

// ---- session host

enum class Pacing {
    realtime,  // generate continuously at the target fps; missing actions hold the last one
    lockstep,  // generate a chunk only once chunk_len actions are queued
};

struct ServerConfig {
    std::string host = "127.0.0.1";
    int port = 0;  // 0 picks a free port
    double fps = 16;  // target frame rate; 0 runs as fast as the model allows
    Pacing pacing = Pacing::realtime;
    size_t egress_budget = 64;  // unsent FRAME messages kept before the oldest is dropped
    double error_burst = 16;    // ERROR replies allowed in a burst
    double error_refill_per_s = 4;
    long flood_disconnect = 4096;  // consecutive suppressed errors before the connection is closed
    std::string prompt;
    std::uint64_t seed = 0;
};

template <class T>
using SessionFactory = std::function<std::unique_ptr<Session<T>>(const std::string& prompt, std::uint64_t seed)>;

struct ConnectionStats {
    long actions_received = 0, prompts = 0, resets = 0, errors_sent = 0, errors_suppressed = 0, frames_sent = 0;
    double last_action_client_ts = 0, last_action_recv_s = 0;
};

inline double wall_seconds() {
    return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

template <class T>
class Connection {
public:
    Connection(Stream& stream, const ServerConfig& cfg, const SessionFactory<T>& factory)
        : stream_(stream), cfg_(cfg), factory_(factory), prompt_(cfg.prompt), egress_(cfg.egress_budget),
          tokens_(cfg.error_burst) {}

    /// Runs until the client leaves, a fatal protocol error, or stop().
    void run() {
        {
            std::lock_guard lock(session_mu_);
            session_ = factory_(prompt_, cfg_.seed);
        }
        std::thread gen([this] { generate_loop(); });
        std::thread writer([this] { write_loop(); });
        read_loop();
        stop();
        gen.join();
        writer.join();
    }

    void stop() {
        stop_ = true;
        in_cv_.notify_all();
        egress_.close();
    }

    ConnectionStats stats() const {
        std::lock_guard lock(stats_mu_);
        return cs_;
    }

private:
    struct Reset {};
    using Event = std::variant<ActionState, std::string, Reset>;

    std::shared_ptr<Session<T>> session() const {
        std::lock_guard lock(session_mu_);
        return session_;
    }

    void read_loop() {
        proto::Decoder dec;
        std::vector<std::uint8_t> buf;
        while (!stop_) {
            buf.clear();
            const long n = stream_.read(buf, 100);
            if (n == Socket::kTimeout) continue;
            if (n <= 0) {
                log::info("client disconnected");
                return;
            }
            dec.feed(buf);
            for (;;) {
                const proto::DecodeResult r = dec.next();
                if (r.status == proto::DecodeStatus::need_more) break;
                if (r.status == proto::DecodeStatus::message) {
                    dispatch(r.message);
                    continue;
                }
                if (!report(r.error, std::string("rejected input: ") + proto::to_string(r.error)) ||
                    proto::is_fatal(r.error))
                    return;
            }
        }
    }

    void dispatch(const proto::Message& m) {
        using namespace proto;
        if (const auto* a = std::get_if<ActionMsg>(&m)) {
            {
                std::lock_guard lock(stats_mu_);
                cs_.actions_received += 1;
                cs_.last_action_client_ts = a->timestamp;
                cs_.last_action_recv_s = wall_seconds();
            }
            push_event(to_action(*a));
        } else if (const auto* p = std::get_if<PromptMsg>(&m)) {
            log::info("prompt: " + p->text);
            {
                std::lock_guard lock(stats_mu_);
                cs_.prompts += 1;
            }
            push_event(p->text);
            enqueue(encode(*p), false);  // echo acknowledges
        } else if (std::holds_alternative<ResetMsg>(m)) {
            push_event(Reset{});
        } else if (std::holds_alternative<StatsReqMsg>(m)) {
            enqueue(encode(StatsMsg{stats_json().dump()}), false);
        } else if (const auto* e = std::get_if<ErrorMsg>(&m)) {
            log::warn("client error " + std::string(to_string(e->code)) + ": " + e->message);
        } else {
            report(ProtoError::bad_payload, std::string("server does not accept ") + type_name(type_of(m)));
        }
    }

    nlohmann::json stats_json() const {
        nlohmann::json j = session()->stats().to_json();
        const ConnectionStats c = stats();
        j["chunk"] = chunk_index_.load();
        j["transport"] = stream_.websocket() ? "websocket" : "tcp";
        j["actions_received"] = c.actions_received;
        j["last_action_client_ts"] = c.last_action_client_ts;
        j["last_action_recv_s"] = c.last_action_recv_s;
        j["resets"] = c.resets;
        j["errors_sent"] = c.errors_sent;
        j["errors_suppressed"] = c.errors_suppressed;
        j["frames_sent"] = c.frames_sent;
        j["egress_queued"] = egress_.frames();
        return j;
    }

    /// Answers a protocol error unless the token bucket is empty. False ends the connection.
    bool report(proto::ProtoError code, const std::string& text) {
        const auto now = std::chrono::steady_clock::now();
        if (last_refill_) {
            const double dt = std::chrono::duration<double>(now - *last_refill_).count();
            tokens_ = std::min(cfg_.error_burst, tokens_ + dt * cfg_.error_refill_per_s);
        }
        last_refill_ = now;
        if (tokens_ >= 1 || proto::is_fatal(code)) {
            tokens_ = std::max(0.0, tokens_ - 1);
            limited_ = false;
            suppressed_run_ = 0;
            {
                std::lock_guard lock(stats_mu_);
                cs_.errors_sent += 1;
            }
            log::debug(text);
            enqueue(proto::encode(proto::ErrorMsg{code, text}), false);
            return true;
        }
        {
            std::lock_guard lock(stats_mu_);
            cs_.errors_suppressed += 1;
        }
        if (!limited_) {
            limited_ = true;
            log::warn("malformed input flood, suppressing ERROR replies");
            enqueue(proto::encode(proto::ErrorMsg{proto::ProtoError::rate_limited, "too many malformed messages"}), false);
        }
        if (++suppressed_run_ > cfg_.flood_disconnect) {
            log::warn("closing flooding connection");
            return false;
        }
        return true;
    }

    void push_event(Event e) {
        {
            std::lock_guard lock(in_mu_);
            ingress_.push_back(std::move(e));
        }
        in_cv_.notify_all();
    }

    void enqueue(std::vector<std::uint8_t> bytes, bool frame) {
        const int dropped = egress_.push(std::move(bytes), frame);
        if (dropped > 0) session()->count_egress_drop(dropped);
    }

    /// Moves ingress events into the session in arrival order.
    void drain(std::deque<Event>& events) {
        for (auto& e : events) {
            if (auto* a = std::get_if<ActionState>(&e)) {
                session_->push_action(*a);
            } else if (auto* p = std::get_if<std::string>(&e)) {
                prompt_ = *p;
                session_->swap_prompt(*p);
            } else {
                log::info("reset");
                auto fresh = std::shared_ptr<Session<T>>(factory_(prompt_, cfg_.seed));
                {
                    std::lock_guard lock(session_mu_);
                    session_ = std::move(fresh);
                }
                {
                    std::lock_guard lock(stats_mu_);
                    cs_.resets += 1;
                }
                egress_.drop_frames();
                chunk_index_ = 0;
                pace_start_ = std::chrono::steady_clock::now();
                paced_frames_ = 0;
            }
        }
        events.clear();
    }

    void generate_loop() {
        try {
            const int L = session_->model().chunk_len;
            pace_start_ = std::chrono::steady_clock::now();
            while (!stop_) {
                std::deque<Event> events;
                {
                    std::unique_lock lock(in_mu_);
                    events.swap(ingress_);
                }
                drain(events);
                if (cfg_.pacing == Pacing::lockstep && session_->queued() < L) {
                    std::unique_lock lock(in_mu_);
                    in_cv_.wait(lock, [&] { return stop_ || !ingress_.empty(); });
                    continue;
                }
                if (stop_) break;
                const std::vector<Frame> frames = session_->stream_next();
                const auto chunk = static_cast<std::uint32_t>(chunk_index_++);
                for (size_t i = 0; i < frames.size(); ++i) {
                    const Frame& f = frames[i];
                    enqueue(proto::encode(proto::FrameMsg{chunk, static_cast<std::uint8_t>(i), static_cast<std::uint16_t>(f.height),
                                                          static_cast<std::uint16_t>(f.width), f.rgb}),
                            true);
                }
                paced_frames_ += static_cast<long>(frames.size());
                if (cfg_.fps > 0 && cfg_.pacing == Pacing::realtime) {
                    const auto due = pace_start_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                                       std::chrono::duration<double>(static_cast<double>(paced_frames_) / cfg_.fps));
                    std::unique_lock lock(in_mu_);
                    in_cv_.wait_until(lock, due, [&] { return stop_.load(); });
                }
            }
        } catch (const std::exception& e) {
            log::error(std::string("generation failed: ") + e.what());
            enqueue(proto::encode(proto::ErrorMsg{proto::ProtoError::server_error, e.what()}), false);
            stop();
            stream_.shutdown();
        }
    }

    void write_loop() {
        while (auto item = egress_.pop()) {
            if (!stream_.write(item->bytes)) {
                stop();
                return;
            }
            if (item->frame) {
                std::lock_guard lock(stats_mu_);
                cs_.frames_sent += 1;
            }
        }
    }

    Stream& stream_;
    const ServerConfig& cfg_;
    const SessionFactory<T>& factory_;
    std::string prompt_;
    std::atomic<bool> stop_{false};

    mutable std::mutex session_mu_;
    std::shared_ptr<Session<T>> session_;
    std::atomic<long> chunk_index_{0};
    std::chrono::steady_clock::time_point pace_start_;
    long paced_frames_ = 0;

    std::mutex in_mu_;
    std::condition_variable in_cv_;
    std::deque<Event> ingress_;

    EgressQueue egress_;

    mutable std::mutex stats_mu_;
    ConnectionStats cs_;

    double tokens_;
    std::optional<std::chrono::steady_clock::time_point> last_refill_;
    bool limited_ = false;
    long suppressed_run_ = 0;
};

/// Accepts one client at a time; each connection gets a fresh session.
template <class T>
class Server {
public:
    Server(ServerConfig cfg, SessionFactory<T> factory) : cfg_(std::move(cfg)), factory_(std::move(factory)) {}

    /// Binds the listening socket; returns the port.
    int bind() {
        listener_ = listen_tcp(cfg_.host, cfg_.port);
        port_ = bound_port(listener_);
        log::info("listening on " + cfg_.host + ":" + std::to_string(port_));
        return port_;
    }

    int port() const { return port_; }
    long connections() const { return connections_; }

    /// Serves until stop(). Binds first if needed.
    void run() {
        if (!listener_.valid()) bind();
        while (!stop_) {
            pollfd p{listener_.fd(), POLLIN, 0};
            if (::poll(&p, 1, 100) <= 0) continue;
            Socket s(::accept(listener_.fd(), nullptr, nullptr));
            if (!s.valid()) continue;
            const int one = 1;
            ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
            ++connections_;
            try {
                auto stream = Stream::accept(std::move(s));
                log::info(std::string("client connected over ") + (stream->websocket() ? "websocket" : "tcp"));
                Connection<T> conn(*stream, cfg_, factory_);
                {
                    std::lock_guard lock(mu_);
                    active_ = &conn;
                    active_stream_ = stream.get();
                }
                conn.run();
                {
                    std::lock_guard lock(mu_);
                    active_ = nullptr;
                    active_stream_ = nullptr;
                }
                const auto st = conn.stats();
                log::info("connection closed: " + std::to_string(st.frames_sent) + " frames sent, " +
                          std::to_string(st.errors_sent) + " errors");
            } catch (const std::exception& e) {
                log::warn(std::string("connection dropped: ") + e.what());
            }
        }
    }

    void stop() {
        stop_ = true;
        std::lock_guard lock(mu_);
        if (active_) active_->stop();
        if (active_stream_) active_stream_->shutdown();
    }

private:
    ServerConfig cfg_;
    SessionFactory<T> factory_;
    Socket listener_;
    int port_ = 0;
    std::atomic<bool> stop_{false};
    std::atomic<long> connections_{0};
    std::mutex mu_;
    Connection<T>* active_ = nullptr;
    Stream* active_stream_ = nullptr;
};

/// Session factory over a checkpoint on disk; the file is read once.
template <class T>
SessionFactory<T> checkpoint_factory(const std::string& path, SessionConfig session) {
    auto ckpt = std::make_shared<CheckpointData>(read_checkpoint(path));
    const ModelConfig model = ModelConfig::from_kv(ckpt->config);
    return [ckpt, model, session](const std::string& prompt, std::uint64_t seed) {
        return std::make_unique<Session<T>>(model, *ckpt, prompt, seed, session);
    };
}

}  // namespace lbw::net
