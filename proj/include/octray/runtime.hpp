#pragma once

// In-process multi-rank harness. Every logical rank runs the same function
// on its own thread and talks to the others only through Comm: buffered
// point-to-point messages matched by (sender, tag) in send order, plus
// allgather and barrier collectives.
//
// Backend::threads lets ranks run concurrently. Backend::roundrobin hands a
// single baton from rank to rank, switching only when the holder blocks or
// finishes, so a run is fully deterministic.

#include <algorithm>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <type_traits>
#include <utility>
#include <vector>

#include "octray/bytes.hpp"

namespace octray {

using Tag = std::uint16_t;

enum class Backend { threads, roundrobin };

inline const char* backend_name(Backend b) { return b == Backend::threads ? "threads" : "roundrobin"; }

inline std::optional<Backend> parse_backend(const std::string& s) {
  if (s == "threads") return Backend::threads;
  if (s == "roundrobin" || s == "round-robin") return Backend::roundrobin;
  return std::nullopt;
}

/// Deadlock, mismatched collective participation, or invalid peer.
class HarnessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised inside a rank when another rank has already failed.
class HarnessAborted : public std::runtime_error {
 public:
  HarnessAborted() : std::runtime_error("harness aborted by another rank") {}
};

struct MessageEvent {
  int from = 0, to = 0;
  Tag tag = 0;
  std::size_t bytes = 0;
  std::uint64_t seq = 0;  ///< index among messages of this (from, to, tag)
  friend bool operator==(const MessageEvent&, const MessageEvent&) = default;
};

struct TagStats {
  std::uint64_t messages = 0;
  std::uint64_t bytes = 0;
};

struct SendHandle {
  int to = -1;
  Tag tag = 0;
  std::uint64_t seq = 0;
};

struct RecvHandle {
  int from = -1;
  Tag tag = 0;
  std::uint64_t seq = 0;
  bool done = false;
  Bytes data;
};

class Harness;

class Comm {
 public:
  Comm(Harness& h, int rank) : h_(&h), rank_(rank) {}

  int rank() const { return rank_; }
  int size() const;

  /// Buffered send; never blocks.
  SendHandle post_send(int to, Tag tag, Bytes data);
  RecvHandle post_recv(int from, Tag tag);

  /// Completes the handle if its message has arrived.
  bool test(RecvHandle& h);
  void wait(RecvHandle& h);
  void wait_all(std::span<RecvHandle> hs);
  /// Blocks until some incomplete handle completes; returns its index.
  std::size_t wait_any(std::span<RecvHandle> hs);

  /// Every rank's contribution, in rank order, on every rank.
  std::vector<Bytes> allgather(Bytes mine);
  void barrier();

 private:
  Harness* h_;
  int rank_;
};

class Harness {
 public:
  explicit Harness(int num_ranks, Backend backend = Backend::threads)
      : P_(num_ranks), backend_(backend) {
    if (num_ranks < 1) throw std::invalid_argument("harness needs at least one rank");
  }

  int size() const { return P_; }
  Backend backend() const { return backend_; }

  /// Runs fn(comm) on every rank and rethrows the first rank failure.
  void run(const std::function<void(Comm&)>& fn) {
    reset();
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(P_));
    for (int r = 0; r < P_; ++r)
      threads.emplace_back([this, r, &fn] { rank_main(r, fn); });
    for (auto& t : threads) t.join();
    if (first_error_) std::rethrow_exception(first_error_);
  }

  /// All messages in global send order (deterministic for roundrobin).
  const std::vector<MessageEvent>& trace() const { return trace_; }
  /// Messages sent by one rank, in its program order.
  const std::vector<MessageEvent>& rank_trace(int r) const { return rank_trace_.at(static_cast<std::size_t>(r)); }
  const std::map<Tag, TagStats>& tag_stats() const { return stats_; }

 private:
  friend class Comm;

  enum class Status { running, blocked, finished };

  struct Channel {
    std::uint64_t sent = 0;
    std::uint64_t posted = 0;
    std::map<std::uint64_t, Bytes> pending;
  };

  struct Collective {
    std::string kind;
    int arrived = 0;
    int consumed = 0;
    std::vector<Bytes> contrib;
  };

  struct RankState {
    Status status = Status::running;
    std::function<bool()> ready;
    std::uint64_t collectives = 0;
    std::map<std::pair<int, Tag>, Channel> inbox;  // keyed by (from, tag)
  };

  void reset() {
    ranks_.assign(static_cast<std::size_t>(P_), RankState{});
    cvs_ = std::vector<std::condition_variable>(static_cast<std::size_t>(P_));
    collectives_.clear();
    trace_.clear();
    rank_trace_.assign(static_cast<std::size_t>(P_), {});
    stats_.clear();
    first_error_ = nullptr;
    aborted_ = false;
    baton_ = 0;
  }

  void rank_main(int r, const std::function<void(Comm&)>& fn) {
    Comm comm(*this, r);
    try {
      if (backend_ == Backend::roundrobin) {
        std::unique_lock lk(mu_);
        cvs_[idx(r)].wait(lk, [&] { return baton_ == r || aborted_; });
        if (aborted_) throw HarnessAborted();
      }
      fn(comm);
    } catch (const HarnessAborted&) {
      // the original failure is already recorded
    } catch (...) {
      std::lock_guard lk(mu_);
      if (!first_error_) first_error_ = std::current_exception();
      aborted_ = true;
    }
    std::lock_guard lk(mu_);
    ranks_[idx(r)].status = Status::finished;
    ranks_[idx(r)].ready = nullptr;
    if (backend_ == Backend::roundrobin) {
      if (baton_ == r && !aborted_) pass_baton(r);
    } else if (!aborted_) {
      bool any_unfinished = false, any_runnable = false;
      for (int q = 0; q < P_; ++q) {
        any_unfinished = any_unfinished || ranks_[idx(q)].status != Status::finished;
        any_runnable = any_runnable || runnable(q);
      }
      if (any_unfinished && !any_runnable)
        fail_locked(HarnessError("deadlock: every unfinished rank is blocked"));
    }
    notify_all();
  }

  static std::size_t idx(int r) { return static_cast<std::size_t>(r); }

  void notify_all() {
    for (auto& cv : cvs_) cv.notify_all();
  }

  bool runnable(int r) const {
    const auto& s = ranks_[idx(r)];
    if (s.status == Status::finished) return false;
    if (s.status == Status::running) return true;
    return s.ready && s.ready();
  }

  /// Hands the baton to the next runnable rank after `from`; caller holds mu_.
  void pass_baton(int from) {
    for (int k = 1; k <= P_; ++k) {
      const int r = (from + k) % P_;
      if (runnable(r)) {
        baton_ = r;
        notify_all();
        return;
      }
    }
    bool all_done = true;
    for (const auto& s : ranks_) all_done = all_done && s.status == Status::finished;
    if (!all_done) fail_locked(HarnessError("deadlock: every unfinished rank is blocked"));
  }

  void fail_locked(const std::exception& e) {
    if (!first_error_) first_error_ = std::make_exception_ptr(HarnessError(e.what()));
    aborted_ = true;
    notify_all();
  }

  /// Blocks rank r until pred() holds; caller holds lk on mu_.
  void block_until(int r, std::unique_lock<std::mutex>& lk, const std::function<bool()>& pred) {
    if (aborted_) throw HarnessAborted();
    if (pred()) return;
    auto& me = ranks_[idx(r)];
    me.status = Status::blocked;
    me.ready = pred;
    if (backend_ == Backend::roundrobin) {
      pass_baton(r);
      cvs_[idx(r)].wait(lk, [&] { return aborted_ || (baton_ == r && pred()); });
    } else {
      bool any_runnable = false;
      for (int q = 0; q < P_; ++q) any_runnable = any_runnable || runnable(q);
      if (!any_runnable) fail_locked(HarnessError("deadlock: every unfinished rank is blocked"));
      cvs_[idx(r)].wait(lk, [&] { return aborted_ || pred(); });
    }
    me.status = Status::running;
    me.ready = nullptr;
    if (aborted_) throw HarnessAborted();
  }

  void check_peer(int p) const {
    if (p < 0 || p >= P_) throw HarnessError("unknown rank " + std::to_string(p));
  }

  SendHandle send(int from, int to, Tag tag, Bytes data) {
    check_peer(to);
    std::lock_guard lk(mu_);
    if (aborted_) throw HarnessAborted();
    auto& ch = ranks_[idx(to)].inbox[{from, tag}];
    const std::uint64_t seq = ch.sent++;
    const MessageEvent ev{from, to, tag, data.size(), seq};
    trace_.push_back(ev);
    rank_trace_[idx(from)].push_back(ev);
    auto& st = stats_[tag];
    ++st.messages;
    st.bytes += data.size();
    ch.pending.emplace(seq, std::move(data));
    if (backend_ == Backend::threads) cvs_[idx(to)].notify_all();
    return {to, tag, seq};
  }

  RecvHandle post(int r, int from, Tag tag) {
    check_peer(from);
    std::lock_guard lk(mu_);
    if (aborted_) throw HarnessAborted();
    auto& ch = ranks_[idx(r)].inbox[{from, tag}];
    RecvHandle h;
    h.from = from;
    h.tag = tag;
    h.seq = ch.posted++;
    return h;
  }

  bool arrived_locked(int r, const RecvHandle& h) {
    if (h.done) return true;
    auto& ch = ranks_[idx(r)].inbox[{h.from, h.tag}];
    return ch.pending.count(h.seq) > 0;
  }

  void take_locked(int r, RecvHandle& h) {
    auto& ch = ranks_[idx(r)].inbox[{h.from, h.tag}];
    auto it = ch.pending.find(h.seq);
    h.data = std::move(it->second);
    ch.pending.erase(it);
    h.done = true;
  }

  // A receive can never complete if its sender finished without sending.
  void check_orphan_locked(int r, const RecvHandle& h) {
    if (h.done || ranks_[idx(h.from)].status != Status::finished) return;
    if (!arrived_locked(r, h))
      throw HarnessError("rank " + std::to_string(r) + " waits for a message (tag " +
                         std::to_string(h.tag) + ") from finished rank " + std::to_string(h.from));
  }

  bool test(int r, RecvHandle& h) {
    std::lock_guard lk(mu_);
    if (h.done) return true;
    if (!arrived_locked(r, h)) return false;
    take_locked(r, h);
    return true;
  }

  std::size_t wait_any(int r, std::span<RecvHandle> hs) {
    std::unique_lock lk(mu_);
    auto find = [&]() -> std::optional<std::size_t> {
      for (std::size_t k = 0; k < hs.size(); ++k)
        if (!hs[k].done && arrived_locked(r, hs[k])) return k;
      return std::nullopt;
    };
    bool any_open = false;
    for (const auto& h : hs) any_open = any_open || !h.done;
    if (!any_open) throw std::logic_error("wait_any: no incomplete handle");
    auto orphaned = [&] {
      for (const auto& h : hs)
        if (!h.done && ranks_[idx(h.from)].status == Status::finished && !arrived_locked(r, h)) return true;
      return false;
    };
    block_until(r, lk, [&] { return find().has_value() || orphaned(); });
    auto k = find();
    if (!k) {
      for (const auto& h : hs) check_orphan_locked(r, h);
    }
    take_locked(r, hs[*k]);
    return *k;
  }

  std::vector<Bytes> collective(int r, const std::string& kind, Bytes mine) {
    std::unique_lock lk(mu_);
    if (aborted_) throw HarnessAborted();
    const std::uint64_t gen = ranks_[idx(r)].collectives++;
    auto& c = collectives_[gen];
    if (c.contrib.empty()) {
      c.kind = kind;
      c.contrib.resize(idx(P_));
    } else if (c.kind != kind) {
      fail_locked(HarnessError("mismatched collective participation: rank " + std::to_string(r) +
                               " called " + kind + " while others called " + c.kind));
      throw HarnessAborted();
    }
    c.contrib[idx(r)] = std::move(mine);
    ++c.arrived;
    if (c.arrived == P_) notify_all();
    auto absent = [&] {
      for (int q = 0; q < P_; ++q)
        if (ranks_[idx(q)].status == Status::finished && ranks_[idx(q)].collectives <= gen) return true;
      return false;
    };
    block_until(r, lk, [&] { return collectives_[gen].arrived == P_ || absent(); });
    auto& done = collectives_[gen];
    if (done.arrived != P_)
      throw HarnessError("mismatched collective participation: a rank finished without joining " + kind);
    std::vector<Bytes> out = done.contrib;
    if (++done.consumed == P_) collectives_.erase(gen);
    return out;
  }

  int P_;
  Backend backend_;
  std::mutex mu_;
  std::vector<std::condition_variable> cvs_;
  std::vector<RankState> ranks_;
  std::map<std::uint64_t, Collective> collectives_;
  std::vector<MessageEvent> trace_;
  std::vector<std::vector<MessageEvent>> rank_trace_;
  std::map<Tag, TagStats> stats_;
  std::exception_ptr first_error_;
  bool aborted_ = false;
  int baton_ = 0;
};

inline int Comm::size() const { return h_->size(); }

inline SendHandle Comm::post_send(int to, Tag tag, Bytes data) {
  return h_->send(rank_, to, tag, std::move(data));
}

inline RecvHandle Comm::post_recv(int from, Tag tag) { return h_->post(rank_, from, tag); }

inline bool Comm::test(RecvHandle& h) { return h_->test(rank_, h); }

inline void Comm::wait(RecvHandle& h) {
  if (!h.done) h_->wait_any(rank_, std::span<RecvHandle>(&h, 1));
}

inline void Comm::wait_all(std::span<RecvHandle> hs) {
  for (;;) {
    bool open = false;
    for (const auto& h : hs) open = open || !h.done;
    if (!open) return;
    h_->wait_any(rank_, hs);
  }
}

inline std::size_t Comm::wait_any(std::span<RecvHandle> hs) { return h_->wait_any(rank_, hs); }

inline std::vector<Bytes> Comm::allgather(Bytes mine) {
  return h_->collective(rank_, "allgather", std::move(mine));
}

inline void Comm::barrier() { h_->collective(rank_, "barrier", {}); }

/// Gathers one trivially copyable value per rank onto every rank.
template <class T>
  requires std::is_trivially_copyable_v<T>
std::vector<T> replicate_markers(Comm& comm, const T& local) {
  ByteWriter w;
  w.put(local);
  const auto all = comm.allgather(w.take());
  std::vector<T> out;
  out.reserve(all.size());
  for (const auto& b : all) {
    ByteReader r(b);
    out.push_back(r.get<T>());
  }
  return out;
}

}  // namespace octray
