"""Ulysses-style sequence parallelism over an in-process simulated worker fabric.

Workers start with contiguous sequence shards holding every head. An
all-to-all (``scatter_heads``) trades that for the full sequence over a
``H / P`` head slice, each worker runs ordinary attention on its heads, and the
inverse all-to-all (``gather_seq``) restores sequence sharding. Self-attention
moves q, k, v and the output (four collectives); cross-attention moves only q
and the output, because every worker holds the short condition sequence and
projects keys and values for its own heads locally.

When ``P`` does not divide the head count, the head axis is padded with
all-zero heads up to the next multiple of ``P`` (``H_pad``). Zero queries,
keys and values give zero outputs and zero gradients, and the pad heads are
dropped after the final gather, so results are unchanged; the pad heads do
travel over the fabric and run through local attention.

Communication volumes below are fabric totals: the sum over all workers of the
elements sent to *other* workers. One collective over a ``S x H_pad x d_head``
tensor moves ``(P - 1) / P * S * H_pad * d_head`` elements.
"""
import csv
import io
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import check_positive_int
from .exceptions import RejectedInputError
from .tensor_core import Rng, attention_backward, attention_forward

BYTES_PER_ELEMENT = 8
DIRECTIONS = ("scatter_heads", "gather_seq")


class WorkerFabric:
    """Explicit per-pair mailboxes with byte accounting and fixed delivery order.

    ``corrupt`` is a test hook: a callable ``(src, dst, array) -> array``
    applied to every cross-worker message.
    """

    def __init__(self, n_workers, corrupt=None):
        check_positive_int(n_workers, "n_workers")
        self.n_workers = n_workers
        self.mailboxes = {(s, d): deque() for s in range(n_workers) for d in range(n_workers)}
        self.bytes_sent = [0] * n_workers
        self.bytes_received = [0] * n_workers
        self.messages_sent = 0
        self.flops = [0] * n_workers
        self.log = []
        self.corrupt = corrupt

    def send(self, src, dst, array):
        array = np.array(array, dtype=np.float64, copy=True)
        if src != dst:
            self.bytes_sent[src] += array.size * BYTES_PER_ELEMENT
            self.messages_sent += 1
            if self.corrupt is not None:
                array = self.corrupt(src, dst, array)
        self.mailboxes[(src, dst)].append(array)

    def recv(self, dst, src):
        box = self.mailboxes[(src, dst)]
        if not box:
            raise RuntimeError(f"worker {dst} expected a message from {src}")
        array = box.popleft()
        if src != dst:
            self.bytes_received[dst] += array.size * BYTES_PER_ELEMENT
        return array

    def barrier(self):
        pending = [k for k, box in self.mailboxes.items() if box]
        if pending:
            raise RuntimeError(f"unmatched messages at barrier: {pending}")

    @property
    def total_bytes_sent(self):
        return sum(self.bytes_sent)

    @property
    def total_elements_sent(self):
        return self.total_bytes_sent // BYTES_PER_ELEMENT

    def conserved(self):
        return sum(self.bytes_sent) == sum(self.bytes_received)


@dataclass
class ShardedSeq:
    shards: list
    offsets: list
    length: int
    padded_length: int

    @property
    def n_workers(self):
        return len(self.shards)

    @property
    def padding(self):
        return self.padded_length - self.length

    def valid_mask(self):
        return np.arange(self.padded_length) < self.length

    def gather(self):
        return np.concatenate(self.shards, axis=0)[: self.length]


def shard_sequence(x, n_workers):
    """Split rows of ``x`` into ``n_workers`` equal contiguous shards, zero-padding if needed."""
    if isinstance(n_workers, bool) or not isinstance(n_workers, (int, np.integer)) or n_workers <= 0:
        raise RejectedInputError(f"worker count must be a positive integer, got {n_workers!r}")
    x = np.asarray(x, dtype=np.float64)
    s = x.shape[0]
    padded = -(-s // n_workers) * n_workers
    if padded != s:
        x = np.concatenate([x, np.zeros((padded - s,) + x.shape[1:])], axis=0)
    rows = padded // n_workers
    offsets = [w * rows for w in range(n_workers)]
    shards = [x[o:o + rows].copy() for o in offsets]
    return ShardedSeq(shards, offsets, s, padded)


def all_to_all_heads(fabric, local, direction):
    """Run one all-to-all across every worker of ``fabric``.

    ``scatter_heads`` maps per-worker ``(S/P, H, d_head)`` to ``(S, H/P, d_head)``;
    ``gather_seq`` is the inverse. Receivers assemble chunks in sender-rank order.
    """
    if direction not in DIRECTIONS:
        raise RejectedInputError(f"direction must be one of {DIRECTIONS}")
    n = fabric.n_workers
    if len(local) != n:
        raise RejectedInputError(f"expected {n} worker tensors, got {len(local)}")
    before = fabric.total_bytes_sent
    if direction == "scatter_heads":
        heads = local[0].shape[1]
        if heads % n:
            raise RejectedInputError(f"{heads} heads cannot be split over {n} workers")
        hp = heads // n
        for src in range(n):
            for dst in range(n):
                fabric.send(src, dst, local[src][:, dst * hp:(dst + 1) * hp, :])
        out = [np.concatenate([fabric.recv(dst, src) for src in range(n)], axis=0) for dst in range(n)]
    else:
        rows = local[0].shape[0]
        if rows % n:
            raise RejectedInputError(f"{rows} rows cannot be split over {n} workers")
        sp = rows // n
        for src in range(n):
            for dst in range(n):
                fabric.send(src, dst, local[src][dst * sp:(dst + 1) * sp])
        out = [np.concatenate([fabric.recv(dst, src) for src in range(n)], axis=1) for dst in range(n)]
    fabric.barrier()
    fabric.log.append((direction, (fabric.total_bytes_sent - before) // BYTES_PER_ELEMENT))
    return out


def padded_heads(n_heads, n_workers):
    """Smallest multiple of ``n_workers`` that is at least ``n_heads``."""
    return -(-n_heads // n_workers) * n_workers


def _to_heads(shards, n_heads, n_workers=1):
    """``(rows, H * dh)`` shards -> ``(rows, H_pad, dh)`` with zero pad heads."""
    out = []
    extra = padded_heads(n_heads, n_workers) - n_heads
    for s in shards:
        if s.shape[1] % n_heads:
            raise RejectedInputError(f"width {s.shape[1]} not divisible by {n_heads} heads")
        h = s.reshape(s.shape[0], n_heads, s.shape[1] // n_heads)
        out.append(np.pad(h, ((0, 0), (0, extra), (0, 0))) if extra else h)
    return out


def _from_heads(gathered, n_heads):
    return [g[:, :n_heads].reshape(g.shape[0], -1) for g in gathered]


def _pad_columns(a, width):
    extra = width - a.shape[-1]
    return np.pad(a, [(0, 0)] * (a.ndim - 1) + [(0, extra)]) if extra else a


def _local_attention(fabric, w, q, k, v, key_mask):
    """q, k, v: ``(S, H/P, dh)``; returns output in the same layout plus probs."""
    qh, kh, vh = (t.transpose(1, 0, 2) for t in (q, k, v))
    out, probs = attention_forward(qh, kh, vh, key_mask)
    fabric.flops[w] += 2 * qh.shape[0] * qh.shape[1] * kh.shape[1] * qh.shape[2]
    return out.transpose(1, 0, 2), probs


def sp_self_attention(fabric, q_shards, k_shards, v_shards, n_heads, valid_length=None, return_cache=False):
    """Sequence-parallel multi-head self-attention.

    Shards are per-worker ``(S/P, H * d_head)`` arrays; ``valid_length`` masks
    trailing pad rows as keys.
    """
    n = fabric.n_workers
    qs, ks, vs = (all_to_all_heads(fabric, _to_heads(x, n_heads, n), "scatter_heads")
                  for x in (q_shards, k_shards, v_shards))
    s = qs[0].shape[0]
    mask = None if valid_length is None or valid_length == s else np.arange(s) < valid_length
    outs, cache = [], []
    for w in range(n):
        o, probs = _local_attention(fabric, w, qs[w], ks[w], vs[w], mask)
        outs.append(o)
        cache.append((qs[w], ks[w], vs[w], probs))
    result = _from_heads(all_to_all_heads(fabric, outs, "gather_seq"), n_heads)
    return (result, cache) if return_cache else result


def sp_self_attention_backward(fabric, dout_shards, cache, n_heads):
    """Adjoint of :func:`sp_self_attention`: inverse collectives around local backward."""
    douts = all_to_all_heads(fabric, _to_heads(dout_shards, n_heads, fabric.n_workers),
                             "scatter_heads")
    dq, dk, dv = [], [], []
    for w, (q, k, v, probs) in enumerate(cache):
        grads = attention_backward(*(t.transpose(1, 0, 2) for t in (douts[w], q, k, v)), probs)
        for acc, g in zip((dq, dk, dv), grads):
            acc.append(g.transpose(1, 0, 2))
    return tuple(_from_heads(all_to_all_heads(fabric, x, "gather_seq"), n_heads)
                 for x in (dq, dk, dv))


def _head_columns(w, n_workers, n_heads, d_head):
    hp = n_heads // n_workers
    return slice(w * hp * d_head, (w + 1) * hp * d_head)


def sp_cross_attention(fabric, q_shards, c, wk, bk, wv, bv, n_heads, return_cache=False):
    """Sequence-parallel cross-attention against a replicated condition sequence ``c``.

    Each worker projects keys and values for its own head slice only, so the
    condition side needs no communication.
    """
    n = fabric.n_workers
    dh = wk.shape[1] // n_heads
    hpad = padded_heads(n_heads, n)
    hp = hpad // n
    wk, bk, wv, bv = (_pad_columns(a, hpad * dh) for a in (wk, bk, wv, bv))
    c = np.asarray(c, dtype=np.float64)
    qs = all_to_all_heads(fabric, _to_heads(q_shards, n_heads, n), "scatter_heads")
    outs, cache = [], []
    for w in range(n):
        cols = _head_columns(w, n, hpad, dh)
        k = (c @ wk[:, cols] + bk[cols]).reshape(c.shape[0], hp, dh)
        v = (c @ wv[:, cols] + bv[cols]).reshape(c.shape[0], hp, dh)
        o, probs = _local_attention(fabric, w, qs[w], k, v, None)
        outs.append(o)
        cache.append((qs[w], k, v, probs))
    result = _from_heads(all_to_all_heads(fabric, outs, "gather_seq"), n_heads)
    return (result, cache) if return_cache else result


def all_reduce_sum(fabric, arrays):
    """Every worker sends its array to all others; each sums in rank order."""
    n = fabric.n_workers
    for src in range(n):
        for dst in range(n):
            fabric.send(src, dst, arrays[src])
    out = []
    for dst in range(n):
        total = fabric.recv(dst, 0)
        for src in range(1, n):
            total = total + fabric.recv(dst, src)
        out.append(total)
    fabric.barrier()
    return out


def sp_cross_attention_backward(fabric, dout_shards, cache, c, wk, wv, n_heads):
    """Returns ``(dq_shards, dc, dwk, dbk, dwv, dbv)``.

    Weight gradients are assembled from the per-worker head columns; the
    condition gradient is all-reduced because every worker touched all of ``c``.
    """
    n = fabric.n_workers
    d = wk.shape[1]
    dh = d // n_heads
    hpad = padded_heads(n_heads, n)
    wk, wv = _pad_columns(wk, hpad * dh), _pad_columns(wv, hpad * dh)
    douts = all_to_all_heads(fabric, _to_heads(dout_shards, n_heads, n), "scatter_heads")
    dwk, dwv = np.zeros_like(wk), np.zeros_like(wv)
    dbk, dbv = np.zeros(hpad * dh), np.zeros(hpad * dh)
    dqs, dcs = [], []
    for w, (q, k, v, probs) in enumerate(cache):
        dq, dk, dv = attention_backward(*(t.transpose(1, 0, 2) for t in (douts[w], q, k, v)), probs)
        dqs.append(dq.transpose(1, 0, 2))
        dk2 = dk.transpose(1, 0, 2).reshape(c.shape[0], -1)
        dv2 = dv.transpose(1, 0, 2).reshape(c.shape[0], -1)
        cols = _head_columns(w, n, hpad, dh)
        dwk[:, cols] = c.T @ dk2
        dwv[:, cols] = c.T @ dv2
        dbk[cols] = dk2.sum(axis=0)
        dbv[cols] = dv2.sum(axis=0)
        dcs.append(dk2 @ wk[:, cols].T + dv2 @ wv[:, cols].T)
    dq_shards = _from_heads(all_to_all_heads(fabric, dqs, "gather_seq"), n_heads)
    dc = all_reduce_sum(fabric, dcs)[0]
    return dq_shards, dc, dwk[:, :d], dbk[:d], dwv[:, :d], dbv[:d]


def sp_self_attention_full(fabric, q, k, v, n_heads):
    """Shard full ``(S, d)`` projections, run :func:`sp_self_attention`, gather."""
    n = fabric.n_workers
    sq, sk, sv = (shard_sequence(t, n) for t in (q, k, v))
    out = sp_self_attention(fabric, sq.shards, sk.shards, sv.shards, n_heads, valid_length=sq.length)
    return np.concatenate(out, axis=0)[: sq.length]


def sp_cross_attention_full(fabric, q, c, wk, bk, wv, bv, n_heads):
    sq = shard_sequence(q, fabric.n_workers)
    out = sp_cross_attention(fabric, sq.shards, c, wk, bk, wv, bv, n_heads)
    return np.concatenate(out, axis=0)[: sq.length]


def serial_multihead_attention(q, k, v, n_heads):
    """Reference multi-head attention on unsharded ``(S, H * d_head)`` inputs."""
    def heads(t):
        return t.reshape(t.shape[0], n_heads, -1).transpose(1, 0, 2)

    out, _ = attention_forward(heads(q), heads(k), heads(v))
    return out.transpose(1, 0, 2).reshape(q.shape[0], -1)


@dataclass
class CommReport:
    seq_len: int
    cond_len: int
    n_heads: int
    d_head: int
    n_workers: int
    self_elements: int
    cross_elements: int
    self_flops_serial: int
    cross_flops_serial: int
    padded_heads: int = None
    measured_self_elements: int = None
    measured_cross_elements: int = None
    measured_self_bytes: int = None
    measured_cross_bytes: int = None
    self_flops_per_worker: list = field(default_factory=list)
    cross_flops_per_worker: list = field(default_factory=list)
    self_max_abs_err: float = None
    cross_max_abs_err: float = None

    @property
    def self_elements_per_worker(self):
        return self.self_elements // self.n_workers

    @property
    def cross_elements_per_worker(self):
        return self.cross_elements // self.n_workers

    def volume_matches(self, itemsize=BYTES_PER_ELEMENT):
        return (self.measured_self_elements == self.self_elements
                and self.measured_cross_elements == self.cross_elements
                and self.measured_self_bytes == itemsize * self.self_elements
                and self.measured_cross_bytes == itemsize * self.cross_elements)

    def worker_flops(self, kind):
        """Model FLOPs per worker: the serial count over ``H_pad / P`` heads."""
        serial = getattr(self, f"{kind}_flops_serial")
        return serial // self.n_heads * self.padded_heads // self.n_workers

    def flops_match(self):
        return all(f == self.worker_flops(kind)
                   for kind in ("self", "cross")
                   for f in getattr(self, f"{kind}_flops_per_worker"))

    def passed(self, tol=1e-9):
        return (self.volume_matches() and self.flops_match()
                and self.self_max_abs_err is not None and self.self_max_abs_err < tol
                and self.cross_max_abs_err is not None and self.cross_max_abs_err < tol)


def comm_volume_model(seq_len, cond_len, n_heads, d_head, n_workers):
    """Closed-form element counts per attention layer (fabric totals)."""
    for name, val in (("seq_len", seq_len), ("n_heads", n_heads), ("d_head", d_head), ("n_workers", n_workers)):
        check_positive_int(val, name)
    if seq_len % n_workers:
        raise RejectedInputError("worker count must divide the sequence length")
    hpad = padded_heads(n_heads, n_workers)
    one = seq_len * hpad * d_head * (n_workers - 1) // n_workers
    return CommReport(
        seq_len, cond_len, n_heads, d_head, n_workers,
        self_elements=4 * one,
        cross_elements=2 * one,
        self_flops_serial=2 * seq_len * seq_len * d_head * n_heads,
        cross_flops_serial=2 * seq_len * cond_len * d_head * n_heads,
        padded_heads=hpad,
    )


def measure(seq_len, cond_len, n_heads, d_head, n_workers, seed=0, corrupt=None):
    """Run both SP attention types on random inputs and fill a :class:`CommReport`."""
    report = comm_volume_model(seq_len, cond_len, n_heads, d_head, n_workers)
    rng = Rng(seed)
    d = n_heads * d_head
    q, k, v = (rng.normal((seq_len, d)) for _ in range(3))
    c = rng.normal((cond_len, d))
    wk, wv = rng.normal((d, d)) / np.sqrt(d), rng.normal((d, d)) / np.sqrt(d)
    bk, bv = rng.normal((d,)) * 0.1, rng.normal((d,)) * 0.1

    fabric = WorkerFabric(n_workers, corrupt=corrupt)
    shards = [shard_sequence(t, n_workers).shards for t in (q, k, v)]
    out = np.concatenate(sp_self_attention(fabric, *shards, n_heads), axis=0)
    report.measured_self_elements = fabric.total_elements_sent
    report.measured_self_bytes = fabric.total_bytes_sent
    report.self_flops_per_worker = list(fabric.flops)
    report.self_max_abs_err = float(np.max(np.abs(out - serial_multihead_attention(q, k, v, n_heads))))

    fabric = WorkerFabric(n_workers, corrupt=corrupt)
    out = np.concatenate(sp_cross_attention(fabric, shards[0], c, wk, bk, wv, bv, n_heads), axis=0)
    report.measured_cross_elements = fabric.total_elements_sent
    report.measured_cross_bytes = fabric.total_bytes_sent
    report.cross_flops_per_worker = list(fabric.flops)
    ref = serial_multihead_attention(q, c @ wk + bk, c @ wv + bv, n_heads)
    report.cross_max_abs_err = float(np.max(np.abs(out - ref))) if out.size else 0.0
    return report


REPORT_COLUMNS = (
    "kind", "P", "S", "H", "H_pad", "d_head", "L_C", "predicted_elements", "measured_elements",
    "measured_bytes", "elements_per_worker", "serial_flops", "flops_per_worker", "max_abs_err", "passed",
)


def report_rows(report, tol=1e-9):
    rows = []
    for kind in ("self", "cross"):
        predicted = getattr(report, f"{kind}_elements")
        measured = getattr(report, f"measured_{kind}_elements")
        serial = getattr(report, f"{kind}_flops_serial")
        flops = getattr(report, f"{kind}_flops_per_worker")
        err = getattr(report, f"{kind}_max_abs_err")
        nbytes = getattr(report, f"measured_{kind}_bytes")
        ok = (predicted == measured and nbytes == BYTES_PER_ELEMENT * predicted
              and err is not None and err < tol
              and all(f == report.worker_flops(kind) for f in flops))
        rows.append({
            "kind": kind, "P": report.n_workers, "S": report.seq_len, "H": report.n_heads,
            "H_pad": report.padded_heads, "d_head": report.d_head, "L_C": report.cond_len,
            "predicted_elements": predicted, "measured_elements": measured,
            "measured_bytes": nbytes,
            "elements_per_worker": predicted // report.n_workers,
            "serial_flops": serial, "flops_per_worker": flops[0] if flops else 0,
            "max_abs_err": f"{err:.3e}", "passed": int(ok),
        })
    return rows


def reports_to_csv(reports, tol=1e-9):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerows(report_rows(r, tol))
    return buf.getvalue()


def report_dict(report):
    return asdict(report)
