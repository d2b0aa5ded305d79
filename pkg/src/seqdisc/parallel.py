"""Ring-allreduce data parallelism over local worker processes or threads.

Workers form a ring of byte-stream links (socket pairs between forked
processes, or queues between threads).  Every step each worker computes a
local gradient, the ring averages the flattened gradients, and every worker
applies the same optimizer step, so all model replicas stay identical.
"""

from __future__ import annotations

import multiprocessing as mp
import os
import queue
import socket
import threading
import time
import traceback
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, WorkerError

RECV_POLL_S = 0.1


class PeerLost(WorkerError):
    """A neighbour vanished mid-collective; the root cause lies elsewhere."""


# transports --------------------------------------------------------------------

class SocketLink:
    """One direction of the ring: send to the next rank, receive from the previous."""

    def __init__(self, rank: int, send_sock: socket.socket, recv_sock: socket.socket):
        self.rank = rank
        self.send_sock = send_sock
        self.recv_sock = recv_sock

    def send(self, data: bytes) -> None:
        self.send_sock.sendall(data)

    def recv(self, nbytes: int) -> bytes:
        buf = bytearray(nbytes)
        view = memoryview(buf)
        got = 0
        while got < nbytes:
            n = self.recv_sock.recv_into(view[got:])
            if n == 0:
                raise PeerLost(self.rank, "previous rank closed the connection")
            got += n
        return bytes(buf)

    def close(self) -> None:
        for s in (self.send_sock, self.recv_sock):
            try:
                s.close()
            except OSError:
                pass


class QueueLink:
    def __init__(self, rank: int, send_q: queue.Queue, recv_q: queue.Queue,
                 abort: threading.Event):
        self.rank = rank
        self.send_q = send_q
        self.recv_q = recv_q
        self.abort = abort

    def send(self, data: bytes) -> None:
        self.send_q.put(data)

    def recv(self, nbytes: int) -> bytes:
        while True:
            try:
                data = self.recv_q.get(timeout=RECV_POLL_S)
            except queue.Empty:
                if self.abort.is_set():
                    raise PeerLost(self.rank, "group aborted") from None
                continue
            if len(data) != nbytes:
                raise WorkerError(self.rank, f"expected {nbytes} bytes, got {len(data)}")
            return data

    def close(self) -> None:
        pass


def socket_ring(world_size: int) -> list[tuple[socket.socket, socket.socket]]:
    """Socket pair k carries rank k -> rank k+1 (mod W); returns (send, recv) per rank."""
    pairs = [socket.socketpair() for _ in range(world_size)]
    return [(pairs[r][0], pairs[(r - 1) % world_size][1]) for r in range(world_size)]


# allreduce --------------------------------------------------------------------------

@dataclass
class WorkerGroup:
    world_size: int
    rank: int
    link: SocketLink | QueueLink | None = None

    def __post_init__(self):
        if not 0 <= self.rank < self.world_size:
            raise ValueError(f"rank {self.rank} outside 0..{self.world_size - 1}")

    def segments(self, length: int) -> np.ndarray:
        """Offsets splitting a buffer into W near-equal segments."""
        return np.linspace(0, length, self.world_size + 1).round().astype(np.int64)


def ring_allreduce(group: WorkerGroup, buffer: np.ndarray, average: bool = True) -> np.ndarray:
    """Sum (or mean) of every rank's buffer, via scatter-reduce then allgather.

    Segment k is accumulated starting at rank k+1 and travelling round the
    ring, so the addition order depends only on ranks and the result is
    reproducible bit for bit.
    """
    buf = np.array(buffer, dtype=np.float64, copy=True).ravel()
    W, r = group.world_size, group.rank
    if W == 1:
        return buf
    off = group.segments(len(buf))
    seg = lambda k: slice(off[k % W], off[k % W + 1])  # noqa: E731

    def exchange(send_k: int, recv_k: int) -> np.ndarray:
        out = np.ascontiguousarray(buf[seg(send_k)]).tobytes()
        err: list[BaseException] = []

        def sender():
            try:
                group.link.send(out)
            except BaseException as exc:  # surfaced after recv
                err.append(exc)

        th = threading.Thread(target=sender, daemon=True)
        th.start()
        n = (off[recv_k % W + 1] - off[recv_k % W]) * 8
        data = group.link.recv(int(n))
        th.join()
        if err:
            raise PeerLost(r, f"send failed: {err[0]}")
        return np.frombuffer(data, dtype=np.float64)

    for s in range(W - 1):
        incoming = exchange(r - s, r - s - 1)
        buf[seg(r - s - 1)] += incoming
    for s in range(W - 1):
        incoming = exchange(r - s + 1, r - s)
        buf[seg(r - s)] = incoming
    if average:
        buf /= W
    return buf


def check_lengths(buffers: Sequence[np.ndarray]) -> None:
    if len({np.asarray(b).size for b in buffers}) > 1:
        raise DataError("allreduce buffers differ in length")


def allreduce_threads(buffers: Sequence[np.ndarray], average: bool = True) -> list[np.ndarray]:
    """Run ``ring_allreduce`` across W threads, one per buffer; results in rank order."""
    check_lengths(buffers)
    W = len(buffers)

    def body(group: WorkerGroup):
        return ring_allreduce(group, buffers[group.rank], average)

    return run_group(W, body, mode="thread")


def allreduce_processes(buffers: Sequence[np.ndarray], average: bool = True) -> list[np.ndarray]:
    check_lengths(buffers)
    W = len(buffers)

    def body(group: WorkerGroup):
        return ring_allreduce(group, buffers[group.rank], average)

    return run_group(W, body, mode="process")


# worker groups --------------------------------------------------------------------

def run_group(world_size: int, body: Callable[[WorkerGroup], object],
              mode: str = "process") -> list:
    """Run ``body(group)`` on every rank and return the results in rank order.

    ``mode`` is ``"process"`` (forked workers over socket pairs) or
    ``"thread"``.  Any failure raises ``WorkerError`` naming the rank that
    failed first-hand rather than a neighbour that merely lost its peer.
    """
    if world_size < 1:
        raise ValueError("world_size must be >= 1")
    if world_size == 1:
        return [body(WorkerGroup(1, 0))]
    if mode == "thread":
        return _run_threads(world_size, body)
    if mode == "process":
        return _run_processes(world_size, body)
    raise ValueError(f"unknown worker mode {mode!r}")


def _pick_error(errors: dict[int, tuple[bool, str]], world_size: int):
    primary = [r for r, (lost, _) in sorted(errors.items()) if not lost]
    rank = primary[0] if primary else min(errors)
    raise WorkerError(rank, errors[rank][1])


def _run_threads(W: int, body) -> list:
    queues = [queue.Queue() for _ in range(W)]
    abort = threading.Event()
    results: list = [None] * W
    errors: dict[int, tuple[bool, str]] = {}

    def run(rank):
        link = QueueLink(rank, queues[rank], queues[(rank - 1) % W], abort)
        try:
            results[rank] = body(WorkerGroup(W, rank, link))
        except BaseException as exc:
            errors[rank] = (isinstance(exc, PeerLost), f"{type(exc).__name__}: {exc}")
            abort.set()

    threads = [threading.Thread(target=run, args=(r,), daemon=True) for r in range(W)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        _pick_error(errors, W)
    return results


def _run_processes(W: int, body) -> list:
    ctx = mp.get_context("fork")
    ends = socket_ring(W)
    result_q = ctx.SimpleQueue()
    procs = []
    for rank in range(W):
        p = ctx.Process(target=_process_main, args=(rank, W, ends, body, result_q), daemon=True)
        p.start()
        procs.append(p)
    for s, rcv in ends:
        s.close()
        rcv.close()
    results: list = [None] * W
    errors: dict[int, tuple[bool, str]] = {}
    pending = set(range(W))
    while pending:
        msg = _next_message(result_q, procs, pending)
        if msg is None:
            dead = [r for r in pending if not procs[r].is_alive()]
            for r in dead:
                errors[r] = (False, f"worker exited with code {procs[r].exitcode}")
                pending.discard(r)
            continue
        rank, ok, payload, lost = msg
        pending.discard(rank)
        if ok:
            results[rank] = payload
        else:
            errors[rank] = (lost, payload)
    for p in procs:
        p.join(timeout=5)
    if errors:
        _pick_error(errors, W)
    return results


def _next_message(q, procs, pending):
    deadline = time.monotonic() + RECV_POLL_S
    while time.monotonic() < deadline:
        if not q.empty():
            return q.get()
        time.sleep(0.002)
    if not q.empty():
        return q.get()
    if any(not procs[r].is_alive() for r in pending):
        # give a just-exited worker's final message a moment to arrive
        time.sleep(RECV_POLL_S)
        return q.get() if not q.empty() else None
    return None


def _process_main(rank, W, ends, body, result_q):
    for r, (s, rcv) in enumerate(ends):
        if r != rank:
            # keep only our own ends so a dead neighbour shows up as EOF
            s.close()
            rcv.close()
    link = SocketLink(rank, *ends[rank])
    _limit_threads()
    try:
        out = body(WorkerGroup(W, rank, link))
        result_q.put((rank, True, out, False))
    except BaseException as exc:
        result_q.put((rank, False, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}",
                      isinstance(exc, PeerLost)))
    finally:
        link.close()
        os._exit(0)


def _limit_threads():
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(1)
    except ImportError:  # pragma: no cover
        pass


# data-parallel training -----------------------------------------------------------

@dataclass
class TrainingStats:
    utterances: int = 0
    audio_seconds: float = 0.0
    wall_seconds: float = 0.0
    steps: int = 0
    loss_sum: float = 0.0
    loss_count: int = 0
    skipped: int = 0
    step_loss: float = 0.0
    phases: dict[str, float] = field(default_factory=dict)

    @property
    def irtf(self) -> float:
        """Hours of audio processed per hour of wall clock."""
        return (self.audio_seconds / 3600.0) / (self.wall_seconds / 3600.0)

    @property
    def mean_loss(self) -> float:
        return self.loss_sum / max(1, self.loss_count)

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("utterances", "audio_seconds", "wall_seconds", "steps",
                                           "loss_sum", "loss_count", "skipped", "step_loss")}
        d["irtf"] = self.irtf if self.wall_seconds > 0 else None
        d["phases"] = dict(self.phases)
        return d


def plan_batches(items: Sequence, world_size: int, batch_size: int, steps: int,
                 seed: int = 0) -> np.ndarray:
    """Sample order for ``steps`` steps as an array [steps, W, b] of item indices.

    Each epoch shuffles the items, shards them by position mod W, pads short
    shards by wrapping round, and hands each worker consecutive batches of its
    shard.  A new epoch begins only when every shard is used up.
    """
    n = len(items)
    if n == 0:
        raise DataError("no items to plan batches over")
    W, b = world_size, batch_size
    out = []
    epoch = 0
    while len(out) < steps:
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        shards = [perm[k::W] for k in range(W)]
        per = -(-max(len(s) for s in shards) // b) * b
        shards = [np.resize(s, per) if len(s) else np.resize(perm, per) for s in shards]
        for k in range(per // b):
            out.append(np.stack([s[k * b:(k + 1) * b] for s in shards]))
        epoch += 1
    return np.stack(out[:steps])


def flatten_grads(grads: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads])


def unflatten_like(flat: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    out, k = [], 0
    for p in like:
        out.append(flat[k:k + p.size].reshape(p.shape))
        k += p.size
    return out


# grad_fn(model, item_indices) -> (grads, info dict with loss/utts/audio/skipped/phases)
GradFn = Callable[[object, Sequence[int]], tuple[list[np.ndarray], dict]]


def train_parallel(model, make_optimizer: Callable[[], object], grad_fn: GradFn,
                   plan: np.ndarray, mode: str = "process",
                   on_step: Callable[[int, TrainingStats, object], None] | None = None):
    """Synchronous data-parallel SGD following ``plan`` [steps, W, b].

    Every rank starts from the same parameters and applies the same averaged
    gradient, so replicas stay identical; rank 0's model and the group-wide
    statistics are returned.  ``on_step(step, stats, model)`` runs on rank 0 only.
    """
    steps, W = plan.shape[0], plan.shape[1]
    # forked workers get private copies for free; threads need explicit replicas
    replicas = [model] * W if mode == "process" else [model] + [model.copy() for _ in range(W - 1)]

    def body(group: WorkerGroup):
        model = replicas[group.rank]
        opt = make_optimizer()
        stats = TrainingStats()
        t_start = time.perf_counter()
        for step in range(steps):
            grads, info = grad_fn(model, plan[step, group.rank])
            t0 = time.perf_counter()
            local = np.array([info["loss_sum"], info["loss_count"], info["utterances"],
                              info["audio_seconds"], info.get("skipped", 0)], dtype=np.float64)
            flat = ring_allreduce(group, np.concatenate([flatten_grads(grads), local]),
                                  average=False)
            t1 = time.perf_counter()
            avg, tot = flat[:-len(local)] / W, flat[-len(local):]
            opt.step(model.params, unflatten_like(avg, model.params))
            stats.steps += 1
            stats.loss_sum += float(tot[0])
            stats.loss_count += int(round(tot[1]))
            stats.step_loss = float(tot[0] / tot[1]) if tot[1] else float("nan")
            stats.utterances += int(round(tot[2]))
            stats.audio_seconds += float(tot[3])
            stats.skipped += int(round(tot[4]))
            for k, v in info.get("phases", {}).items():
                stats.phases[k] = stats.phases.get(k, 0.0) + v
            stats.phases["allreduce"] = stats.phases.get("allreduce", 0.0) + (t1 - t0)
            stats.wall_seconds = time.perf_counter() - t_start
            if on_step and group.rank == 0:
                on_step(step + 1, stats, model)
        if group.rank == 0:
            return [p.copy() for p in model.params], stats
        return None

    results = run_group(W, body, mode)
    params, stats = results[0]
    model = replicas[0]
    for p, q in zip(model.params, params):
        p[...] = q
    return model, stats


__all__ = ["PeerLost", "QueueLink", "SocketLink", "TrainingStats", "WorkerGroup",
           "allreduce_processes", "allreduce_threads", "flatten_grads", "plan_batches",
           "ring_allreduce", "run_group", "socket_ring", "train_parallel", "unflatten_like"]
