"""Socket master/worker runtime executing the asynchronous protocol for real.

The master binds a TCP port, waits for all workers to introduce themselves,
broadcasts the initial center, and then loops: block until the arrival gate
opens (at least `min_arrivals` updates pending and no unarrived worker at
the staleness limit), consume every pending update as this iteration's
arrival set, refresh the center, and send it back to the arrived workers
only.  Workers loop: receive a center, solve the local subproblem, ascend
the dual against that same center, send both vectors back, wait.

Wire format (little-endian): each frame is

    u32 payload-length | u8 type | payload

with payload lengths exact.  Types:

    HELLO          u16 worker id
    BROADCAST_X0   u64 iteration | u32 n | f64[n] center
    WORKER_UPDATE  u16 worker id | u64 worker-local iteration
                   | f64[n] x_i | f64[n] lambda_i
    SHUTDOWN       u8 reason code

Unknown types or length mismatches are protocol errors: the offender's
connection is dropped (master) or the process exits nonzero (worker).
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .model import ConsensusState, KktResidual, ProblemInstance, SmoothBlock
from .problems import solve_master_x0, solve_worker
from .scheduler import Schedule
from .trace import IterationRecord, Iterates, RunTrace

MSG_HELLO = 1
MSG_BROADCAST_X0 = 2
MSG_WORKER_UPDATE = 3
MSG_SHUTDOWN = 4

_HEADER = struct.Struct("<I")


class ProtocolError(RuntimeError):
    """Malformed or unexpected frame on the wire."""


# --- framing ---------------------------------------------------------------

def encode_frame(mtype: int, payload: bytes) -> bytes:
    return _HEADER.pack(len(payload)) + bytes([mtype]) + payload


def encode_hello(worker_id: int) -> bytes:
    return encode_frame(MSG_HELLO, struct.pack("<H", worker_id))


def encode_broadcast(k: int, x0: np.ndarray) -> bytes:
    x0 = np.ascontiguousarray(x0, dtype="<f8")
    payload = struct.pack("<QI", k, x0.shape[0]) + x0.tobytes()
    return encode_frame(MSG_BROADCAST_X0, payload)


def encode_worker_update(worker_id: int, k_i: int, x: np.ndarray,
                         lam: np.ndarray) -> bytes:
    x = np.ascontiguousarray(x, dtype="<f8")
    lam = np.ascontiguousarray(lam, dtype="<f8")
    payload = struct.pack("<HQ", worker_id, k_i) + x.tobytes() + lam.tobytes()
    return encode_frame(MSG_WORKER_UPDATE, payload)


def encode_shutdown(reason: int = 0) -> bytes:
    return encode_frame(MSG_SHUTDOWN, struct.pack("<B", reason))


def decode_payload(mtype: int, payload: bytes):
    """Decode a frame payload into (type-name, fields...)."""
    if mtype == MSG_HELLO:
        if len(payload) != 2:
            raise ProtocolError("HELLO payload must be 2 bytes")
        return ("hello", struct.unpack("<H", payload)[0])
    if mtype == MSG_BROADCAST_X0:
        if len(payload) < 12:
            raise ProtocolError("BROADCAST_X0 payload too short")
        k, n = struct.unpack_from("<QI", payload, 0)
        if len(payload) != 12 + 8 * n:
            raise ProtocolError("BROADCAST_X0 length mismatch")
        x0 = np.frombuffer(payload, dtype="<f8", count=n, offset=12).copy()
        return ("broadcast_x0", k, x0)
    if mtype == MSG_WORKER_UPDATE:
        if len(payload) < 10 or (len(payload) - 10) % 16 != 0:
            raise ProtocolError("WORKER_UPDATE length mismatch")
        wid, k_i = struct.unpack_from("<HQ", payload, 0)
        n = (len(payload) - 10) // 16
        x = np.frombuffer(payload, dtype="<f8", count=n, offset=10).copy()
        lam = np.frombuffer(payload, dtype="<f8", count=n, offset=10 + 8 * n).copy()
        return ("worker_update", wid, k_i, x, lam)
    if mtype == MSG_SHUTDOWN:
        if len(payload) != 1:
            raise ProtocolError("SHUTDOWN payload must be 1 byte")
        return ("shutdown", payload[0])
    raise ProtocolError(f"unknown message type {mtype}")


def send_frame(sock: socket.socket, frame: bytes) -> None:
    sock.sendall(frame)


def recv_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining > 0:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_message(sock: socket.socket):
    (length,) = _HEADER.unpack(recv_exact(sock, 4))
    mtype = recv_exact(sock, 1)[0]
    payload = recv_exact(sock, length) if length else b""
    return decode_payload(mtype, payload)


# --- master ----------------------------------------------------------------

@dataclass
class MasterGate:
    """Pending updates plus the two release conditions.

    Releases only when at least `min_arrivals` updates are pending and no
    still-unarrived worker has been waiting tau - 1 iterations.
    """

    n_workers: int
    tau: int
    min_arrivals: int
    delays: list = field(default_factory=list)
    pending: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.delays:
            self.delays = [0] * self.n_workers
        if not 1 <= self.min_arrivals <= self.n_workers:
            raise ValueError("min_arrivals must lie in [1, N]")

    def add(self, worker_id: int, update) -> None:
        # workers block on the broadcast after sending, so a second update
        # from the same worker within one master iteration is unreachable
        if worker_id in self.pending:
            raise ProtocolError(
                f"worker {worker_id} sent two updates in one iteration")
        self.pending[worker_id] = update

    def ready(self) -> bool:
        if len(self.pending) < self.min_arrivals:
            return False
        return all(self.delays[i] < self.tau - 1 or i in self.pending
                   for i in range(self.n_workers))

    def release(self) -> dict:
        arrived = dict(sorted(self.pending.items()))
        self.pending.clear()
        self.delays = [0 if i in arrived else self.delays[i] + 1
                       for i in range(self.n_workers)]
        return arrived


def _reader(sock: socket.socket, inbox: queue.Queue, worker_id: int) -> None:
    try:
        while True:
            msg = recv_message(sock)
            if msg[0] != "worker_update":
                raise ProtocolError(f"expected WORKER_UPDATE, got {msg[0]}")
            inbox.put(("update", msg[1], msg[3], msg[4], msg[2]))
    except (ConnectionError, OSError, ProtocolError) as exc:
        inbox.put(("error", worker_id, exc))


def master_serve(instance: ProblemInstance, rho: float, gamma: float,
                 tau: int, min_arrivals: int, n_iters: int,
                 host: str = "127.0.0.1", port: int = 0,
                 x0_init=None, record_iterates: bool = False,
                 ready_event: threading.Event | None = None,
                 port_holder: list | None = None,
                 accept_timeout: float = 60.0) -> tuple[RunTrace, Schedule]:
    """Run the master side end-to-end; returns (trace, recorded schedule).

    The instance is used for the center update (regularizer) and for trace
    diagnostics; worker subproblems are computed remotely and never
    recomputed here.  `ready_event`/`port_holder` let a harness learn the
    bound port when port=0.
    """
    N = instance.n_blocks
    n = instance.dim
    x0 = np.zeros(n) if x0_init is None else np.asarray(x0_init, dtype=float).copy()
    xs = np.tile(x0, (N, 1))
    lams = np.zeros((N, n))
    fvals = np.array([b.value(x0) for b in instance.blocks])
    grads = np.stack([b.grad(x0) for b in instance.blocks])
    served = np.tile(x0, (N, 1))
    arrived_once = np.zeros(N, dtype=bool)
    reg = instance.regularizer

    def l_rho_now():
        diff = xs - x0[None, :]
        return float(fvals.sum() + reg.value(x0) + np.sum(lams * diff)
                     + 0.5 * rho * np.sum(diff * diff))

    def kkt_now():
        resid = grads + lams
        worker = float(np.max(np.linalg.norm(resid, axis=1)))
        consensus = float(np.max(np.linalg.norm(xs - x0[None, :], axis=1)))
        dist = reg.subgrad_dist
        master = None if dist is None else float(dist(x0, lams.sum(axis=0)))
        return KktResidual(worker=worker, master=master, consensus=consensus)

    kkt0 = kkt_now()
    trace = RunTrace(scheme="ad-admm", rho=rho, gamma=gamma, n_workers=N,
                     dim=n, l_rho_initial=l_rho_now(), kkt_initial=kkt0,
                     meta={"tau": tau, "min_arrivals": min_arrivals,
                           "transport": "tcp"})
    hist_x0, hist_xs, hist_lams = [], [], []

    listener = socket.create_server((host, port))
    listener.settimeout(accept_timeout)
    if port_holder is not None:
        port_holder.append(listener.getsockname()[1])
    if ready_event is not None:
        ready_event.set()

    conns: dict[int, socket.socket] = {}
    inbox: queue.Queue = queue.Queue()
    readers = []
    arrival_sets = []
    t_start = time.perf_counter()
    try:
        while len(conns) < N:
            sock, _ = listener.accept()
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            msg = recv_message(sock)
            if msg[0] != "hello":
                sock.close()
                raise ProtocolError("first frame from a worker must be HELLO")
            wid = msg[1]
            if wid in conns or not 0 <= wid < N:
                sock.close()
                raise ProtocolError(f"bad or duplicate worker id {wid}")
            conns[wid] = sock
        for wid, sock in conns.items():
            t = threading.Thread(target=_reader, args=(sock, inbox, wid),
                                 daemon=True)
            t.start()
            readers.append(t)
        frame0 = encode_broadcast(0, x0)
        for sock in conns.values():
            send_frame(sock, frame0)

        gate = MasterGate(n_workers=N, tau=tau, min_arrivals=min_arrivals)
        for k in range(n_iters):
            while not gate.ready():
                item = inbox.get()
                if item[0] == "error":
                    raise RuntimeError(
                        f"worker {item[1]} failed: {item[2]}") from item[2]
                _, wid, x_i, lam_i, k_i = item
                gate.add(wid, (x_i, lam_i, k_i))
            arrived = gate.release()
            arrivals = tuple(sorted(arrived))
            arrival_sets.append(set(arrivals))
            x0_prev = x0
            stale_sq = sum(float(np.sum((served[i] - x0_prev) ** 2))
                           for i in arrivals)
            dlam_sq = 0.0
            dx_sq = 0.0
            for i in arrivals:
                x_i, lam_i, _ = arrived[i]
                dx_sq += float(np.sum((x_i - xs[i]) ** 2))
                dlam_sq += float(np.sum((lam_i - lams[i]) ** 2))
                xs[i] = x_i
                lams[i] = lam_i
                fvals[i] = instance.blocks[i].value(x_i)
                grads[i] = instance.blocks[i].grad(x_i)
                arrived_once[i] = True
            x0 = solve_master_x0(reg, lams.sum(axis=0), xs.sum(axis=0),
                                 N, rho, gamma, x0_prev)
            for i in arrivals:
                served[i] = x0
            kkt = kkt_now()
            idx = np.flatnonzero(arrived_once)
            rel = np.linalg.norm(grads[idx] + lams[idx], axis=1) \
                / (1.0 + np.linalg.norm(lams[idx], axis=1))
            objective = float(sum(b.value(x0) for b in instance.blocks)
                              + reg.value(x0))
            trace.records.append(IterationRecord(
                k=k, arrivals=arrivals, l_rho=l_rho_now(), kkt=kkt,
                objective=objective,
                dx0_sq=float(np.sum((x0 - x0_prev) ** 2)),
                stale_sq_sum=stale_sq, dlam_sq_sum=dlam_sq, dx_sq_sum=dx_sq,
                grad_dual_rel=float(np.max(rel)) if idx.size else 0.0,
                elapsed=time.perf_counter() - t_start))
            if record_iterates:
                hist_x0.append(x0.copy())
                hist_xs.append(xs.copy())
                hist_lams.append(lams.copy())
            frame = encode_broadcast(k + 1, x0)
            for i in arrivals:
                send_frame(conns[i], frame)
    finally:
        shutdown = encode_shutdown(0)
        for sock in conns.values():
            try:
                send_frame(sock, shutdown)
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass
        listener.close()
    trace.final_state = ConsensusState(x0=x0.copy(), xs=xs.copy(),
                                       duals=lams.copy(), k=len(trace.records))
    if record_iterates:
        trace.iterates = Iterates(x0=np.array(hist_x0), xs=np.array(hist_xs),
                                  duals=np.array(hist_lams))
    trace.wall_time = time.perf_counter() - t_start
    schedule = Schedule.from_arrival_sets(arrival_sets, tau=tau,
                                          min_arrivals=min_arrivals,
                                          n_workers=N)
    return trace, schedule


# --- worker ----------------------------------------------------------------

def worker_serve(block: SmoothBlock, worker_id: int, rho: float,
                 host: str, port: int, dim: int,
                 compute_delay: float = 0.0,
                 connect_retries: int = 40,
                 retry_backoff: float = 0.25) -> int:
    """Run one worker until the master shuts the session down.

    Loop: wait for a center broadcast, solve the local subproblem against
    it, ascend the local dual against the same center, send both back.
    Returns the number of local updates performed.  Connection loss during
    the loop raises; the initial connect retries with bounded backoff.
    """
    sock = None
    for attempt in range(connect_retries):
        try:
            sock = socket.create_connection((host, port), timeout=30.0)
            break
        except OSError:
            if attempt == connect_retries - 1:
                raise
            time.sleep(retry_backoff)
    assert sock is not None
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    lam = np.zeros(dim)
    k_i = 0
    try:
        send_frame(sock, encode_hello(worker_id))
        while True:
            msg = recv_message(sock)
            if msg[0] == "shutdown":
                return k_i
            if msg[0] != "broadcast_x0":
                raise ProtocolError(f"unexpected frame {msg[0]} from master")
            _, _, x0_hat = msg
            if x0_hat.shape[0] != dim:
                raise ProtocolError("center dimension mismatch")
            if compute_delay > 0:
                time.sleep(compute_delay)
            x_new = solve_worker(block, lam, x0_hat, rho)
            lam = lam + rho * (x_new - x0_hat)
            k_i += 1
            send_frame(sock, encode_worker_update(worker_id, k_i, x_new, lam))
    finally:
        sock.close()
