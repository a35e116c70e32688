"""Dense float64 arrays, a reverse-mode tape, and an AdamW optimizer.

The tape records a closed set of primitives, each with its own backward
rule: matmul, affine, add, sub, mul, scale, tanh, sigmoid, power, sum,
concat, column slice, weighted softmax cross-entropy, softmax KL,
squared-difference sum, row-norm sum, and a fused gated-recurrence
primitive whose inner loop lives in ``cnav._kernels``.  Primitives
execute eagerly when recorded; ``Tape.backward`` replays the record in
reverse.  There is no general broadcasting: every rule states its exact
shape contract and raises ``TapeError`` otherwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import _kernels

CHECKPOINT_VERSION = "cnav-ckpt-v1"


class TapeError(ValueError):
    """Shape or usage violation in a tape primitive."""


def as_f64(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# Parameter store


class ParamStore:
    """Named float64 parameter arrays with AdamW moment state.

    Names are unique string paths (e.g. ``policy.gru.w_input``).  Moment
    arrays always match parameter shapes; fresh or deserialized stores
    have zero moments and step counter 0.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        arr = as_f64(value)
        if not np.isfinite(arr).all():
            raise ValueError(f"non-finite values in parameter {name}")
        self.params[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        self.steps[name] = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, arr in self.params.items():
            out.params[name] = arr.copy()
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
            out.steps[name] = self.steps[name]
        return out

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(arr) for name, arr in self.params.items()}

    def reset_moments(self) -> None:
        for name, arr in self.params.items():
            self.m[name] = np.zeros_like(arr)
            self.v[name] = np.zeros_like(arr)
            self.steps[name] = 0


def checkpoint_bytes(store: ParamStore) -> tuple[bytes, bytes]:
    """Serialize parameters as (UTF-8 JSON manifest, little-endian blob)."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in store.params.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f64",
                "byte_offset": offset,
                "byte_len": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"version": CHECKPOINT_VERSION, "entries": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return manifest, b"".join(chunks)


def checkpoint_from_bytes(manifest: bytes, blob: bytes) -> ParamStore:
    doc = json.loads(manifest.decode("utf-8"))
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version mismatch: got {doc.get('version')!r}, "
            f"expected {CHECKPOINT_VERSION!r}"
        )
    store = ParamStore()
    for entry in doc["entries"]:
        raw = blob[entry["byte_offset"] : entry["byte_offset"] + entry["byte_len"]]
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])
        store.add(entry["name"], arr)
    return store


def save_checkpoint(store: ParamStore, prefix) -> None:
    """Write ``<prefix>.json`` and ``<prefix>.bin``."""
    manifest, blob = checkpoint_bytes(store)
    with open(f"{prefix}.json", "wb") as fh:
        fh.write(manifest)
    with open(f"{prefix}.bin", "wb") as fh:
        fh.write(blob)


def load_checkpoint(prefix) -> ParamStore:
    with open(f"{prefix}.json", "rb") as fh:
        manifest = fh.read()
    with open(f"{prefix}.bin", "rb") as fh:
        blob = fh.read()
    return checkpoint_from_bytes(manifest, blob)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimConfig:
    base_lr: float = 3e-3
    warmup_steps: int = 100
    total_steps: int = 1000
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")


def lr_at(cfg: OptimConfig, step: int) -> float:
    """Piecewise-linear schedule: warmup to base_lr, then decay to 0.

    The peak sits exactly at ``warmup_steps``; the value is 0 at
    ``total_steps`` and beyond.
    """
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return 0.0
    span = cfg.total_steps - cfg.warmup_steps
    return cfg.base_lr * (cfg.total_steps - step) / span


def adamw_step(
    store: ParamStore, grads: dict[str, np.ndarray], cfg: OptimConfig, step: int
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``grads`` must be keyed exactly like the store; ``step`` is 1-based
    and drives both bias correction and the learning-rate schedule.
    """
    if step < 1:
        raise ValueError("step must be >= 1")
    if set(grads) != set(store.params):
        missing = sorted(set(store.params) - set(grads))
        extra = sorted(set(grads) - set(store.params))
        raise KeyError(f"gradient keys do not match store (missing={missing}, extra={extra})")
    lr = lr_at(cfg, step)
    b1c = 1.0 - cfg.beta1**step
    b2c = 1.0 - cfg.beta2**step
    for name, p in store.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = store.m[name]
        v = store.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p -= lr * ((m / b1c) / (np.sqrt(v / b2c) + cfg.epsilon) + cfg.weight_decay * p)
        store.steps[name] = step
        if not np.isfinite(p).all():
            raise FloatingPointError(f"non-finite parameter {name} after optimizer step")


def interpolate_params(a: ParamStore, b: ParamStore, alpha: float) -> ParamStore:
    """Elementwise ``alpha * a + (1 - alpha) * b`` with fresh moments."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if a.names() != b.names():
        raise ValueError("parameter name sets differ")
    out = ParamStore()
    for name in a.names():
        pa, pb = a[name], b[name]
        if pa.shape != pb.shape:
            raise ValueError(f"shape mismatch for {name}: {pa.shape} vs {pb.shape}")
        out.add(name, alpha * pa + (1.0 - alpha) * pb)
    return out


# ---------------------------------------------------------------------------
# Reverse-mode tape


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class Tape:
    """Eager Wengert list over a parameter store.

    Primitive methods compute immediately, record the operation, and
    return an integer node id.  ``value(node)`` reads the forward result;
    ``backward(node)`` returns a gradient array for every parameter in
    the store (zeros for parameters the tape never touched).
    """

    def __init__(self, store: ParamStore | None = None, validate: bool = False):
        self.store = store
        self.validate = validate
        self._values: list[np.ndarray] = []
        self._ops: list[tuple] = []
        self._param_slots: dict[str, int] = {}

    # -- leaves ------------------------------------------------------------

    def _push(self, arr: np.ndarray) -> int:
        if self.validate and not np.isfinite(arr).all():
            raise TapeError("non-finite value produced on tape")
        self._values.append(arr)
        return len(self._values) - 1

    def param(self, name: str) -> int:
        if self.store is None or name not in self.store:
            raise TapeError(f"unknown parameter: {name}")
        if name in self._param_slots:
            return self._param_slots[name]
        slot = self._push(self.store[name])
        self._param_slots[name] = slot
        return slot

    def const(self, value) -> int:
        return self._push(as_f64(value))

    def value(self, node: int) -> np.ndarray:
        """Forward result held at ``node``."""
        return self._values[node]

    # -- primitives ----------------------------------------------------------

    def _record(self, op: str, out: np.ndarray, ins: tuple, aux=None) -> int:
        slot = self._push(out)
        self._ops.append((op, slot, ins, aux))
        return slot

    def _need(self, cond: bool, op: str, detail: str) -> None:
        if not cond:
            raise TapeError(f"{op}: {detail}")

    def matmul(self, a: int, b: int) -> int:
        va, vb = self._values[a], self._values[b]
        self._need(
            va.ndim == 2 and vb.ndim == 2 and va.shape[1] == vb.shape[0],
            "matmul",
            f"incompatible shapes {va.shape} x {vb.shape}",
        )
        return self._record("matmul", va @ vb, (a, b))

    def affine(self, x: int, w: int, b: int) -> int:
        vx, vw, vb = self._values[x], self._values[w], self._values[b]
        self._need(
            vx.ndim == 2 and vw.ndim == 2 and vx.shape[1] == vw.shape[0],
            "affine",
            f"incompatible shapes {vx.shape} x {vw.shape}",
        )
        self._need(
            vb.ndim == 1 and vb.shape[0] == vw.shape[1],
            "affine",
            f"bias shape {vb.shape} does not match output width {vw.shape[1]}",
        )
        return self._record("affine", vx @ vw + vb, (x, w, b))

    def _binary_same_shape(self, op: str, a: int, b: int, fn) -> int:
        va, vb = self._values[a], self._values[b]
        self._need(va.shape == vb.shape, op, f"shape mismatch {va.shape} vs {vb.shape}")
        return self._record(op, fn(va, vb), (a, b))

    def add(self, a: int, b: int) -> int:
        return self._binary_same_shape("add", a, b, np.add)

    def sub(self, a: int, b: int) -> int:
        return self._binary_same_shape("sub", a, b, np.subtract)

    def mul(self, a: int, b: int) -> int:
        return self._binary_same_shape("mul", a, b, np.multiply)

    def scale(self, a: int, c: float) -> int:
        return self._record("scale", self._values[a] * float(c), (a,), float(c))

    def tanh(self, a: int) -> int:
        return self._record("tanh", np.tanh(self._values[a]), (a,))

    def sigmoid(self, a: int) -> int:
        v = self._values[a]
        return self._record("sigmoid", 1.0 / (1.0 + np.exp(-v)), (a,))

    def power(self, a: int, p: float) -> int:
        v = self._values[a]
        if p != int(p):
            self._need((v > 0).all(), "power", "non-integer exponent needs positive base")
        return self._record("power", v ** float(p), (a,), float(p))

    def sum(self, a: int) -> int:
        return self._record("sum", np.asarray(self._values[a].sum()), (a,))

    def concat(self, parts: list[int]) -> int:
        vals = [self._values[p] for p in parts]
        self._need(len(vals) >= 1, "concat", "needs at least one part")
        rows = vals[0].shape[0]
        for v in vals:
            self._need(
                v.ndim == 2 and v.shape[0] == rows,
                "concat",
                f"all parts must be 2-D with {rows} rows, got {v.shape}",
            )
        widths = [v.shape[1] for v in vals]
        return self._record("concat", np.hstack(vals), tuple(parts), widths)

    def slice_cols(self, a: int, start: int, stop: int) -> int:
        v = self._values[a]
        self._need(
            v.ndim == 2 and 0 <= start < stop <= v.shape[1],
            "slice_cols",
            f"bad slice [{start}:{stop}] of shape {v.shape}",
        )
        return self._record("slice_cols", v[:, start:stop].copy(), (a,), (start, stop))

    def softmax_xent(self, logits: int, labels, weights=None) -> int:
        """Weighted mean negative log-likelihood over rows.

        ``labels`` is an int vector, one class per row; ``weights``
        defaults to all ones.  Returns a scalar node.
        """
        v = self._values[logits]
        labels = np.asarray(labels, dtype=np.intp)
        self._need(
            v.ndim == 2 and labels.shape == (v.shape[0],),
            "softmax_xent",
            f"logits {v.shape} vs labels {labels.shape}",
        )
        self._need(
            bool((labels >= 0).all() and (labels < v.shape[1]).all()),
            "softmax_xent",
            "label out of range",
        )
        w = np.ones(v.shape[0]) if weights is None else as_f64(weights)
        self._need(w.shape == (v.shape[0],), "softmax_xent", "weights shape mismatch")
        shifted = v - v.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1)) + v.max(axis=1)
        nll = lse - v[np.arange(v.shape[0]), labels]
        out = np.asarray((w * nll).sum() / v.shape[0])
        return self._record("softmax_xent", out, (logits,), (labels, w))

    def kl_softmax(self, logits: int, target_probs) -> int:
        """Mean KL(target || softmax(logits)) over rows; scalar node."""
        v = self._values[logits]
        p = as_f64(target_probs)
        self._need(p.shape == v.shape, "kl_softmax", f"target {p.shape} vs logits {v.shape}")
        shifted = v - v.max(axis=1, keepdims=True)
        logq = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        out = np.asarray((plogp - p * logq).sum() / v.shape[0])
        return self._record("kl_softmax", out, (logits,), p)

    def sq_diff_sum(self, a: int, b: int) -> int:
        """Scalar sum of squared differences."""
        va, vb = self._values[a], self._values[b]
        self._need(va.shape == vb.shape, "sq_diff_sum", f"{va.shape} vs {vb.shape}")
        d = va - vb
        return self._record("sq_diff_sum", np.asarray((d * d).sum()), (a, b))

    def rownorm_sum(self, a: int, b: int) -> int:
        """Scalar sum over rows of the l2 norm of (a - b).

        The gradient at a zero row is defined as 0 (subgradient choice).
        """
        va, vb = self._values[a], self._values[b]
        self._need(
            va.ndim == 2 and va.shape == vb.shape, "rownorm_sum", f"{va.shape} vs {vb.shape}"
        )
        d = va - vb
        norms = np.sqrt((d * d).sum(axis=1))
        return self._record("rownorm_sum", np.asarray(norms.sum()), (a, b), norms)

    def gru_sequence(self, f: int, w: int, u: int, b: int) -> int:
        """Hidden states of a gated recurrent cell over feature rows.

        ``f`` is (L, d); ``w`` (d, 3H), ``u`` (H, 3H) and ``b`` (3H,) hold
        the update/reset/candidate blocks.  Starts from a zero state and
        returns the (L, H) hidden-state node.
        """
        vf, vw, vu, vb = (self._values[i] for i in (f, w, u, b))
        self._need(
            vf.ndim == 2 and vw.ndim == 2 and vf.shape[1] == vw.shape[0],
            "gru_sequence",
            f"features {vf.shape} vs input weights {vw.shape}",
        )
        h3 = vw.shape[1]
        self._need(h3 % 3 == 0, "gru_sequence", "weight width must be 3H")
        H = h3 // 3
        self._need(vu.shape == (H, h3), "gru_sequence", f"hidden weights {vu.shape} != {(H, h3)}")
        self._need(vb.shape == (h3,), "gru_sequence", f"bias {vb.shape} != {(h3,)}")
        xa = vf @ vw + vb
        hs, gates = _kernels.gru_forward(xa, vu)
        return self._record("gru_sequence", hs, (f, w, u, b), gates)

    # -- reverse pass --------------------------------------------------------

    def backward(self, node: int, output_grad: float = 1.0) -> dict[str, np.ndarray]:
        """Gradients of the scalar at ``node`` for every store parameter."""
        if not self._ops:
            raise TapeError("backward called before any forward computation")
        out = self._values[node]
        if out.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {out.shape}")
        grads: dict[int, np.ndarray] = {node: np.full_like(out, float(output_grad))}

        def push(slot: int, g: np.ndarray) -> None:
            if slot in grads:
                grads[slot] = grads[slot] + g
            else:
                grads[slot] = g

        for op, slot, ins, aux in reversed(self._ops):
            if slot not in grads:
                continue
            g = grads[slot]
            if op == "matmul":
                a, b = ins
                push(a, g @ self._values[b].T)
                push(b, self._values[a].T @ g)
            elif op == "affine":
                x, w, b = ins
                push(x, g @ self._values[w].T)
                push(w, self._values[x].T @ g)
                push(b, g.sum(axis=0))
            elif op == "add":
                push(ins[0], g)
                push(ins[1], g)
            elif op == "sub":
                push(ins[0], g)
                push(ins[1], -g)
            elif op == "mul":
                a, b = ins
                push(a, g * self._values[b])
                push(b, g * self._values[a])
            elif op == "scale":
                push(ins[0], g * aux)
            elif op == "tanh":
                t = self._values[slot]
                push(ins[0], g * (1.0 - t * t))
            elif op == "sigmoid":
                s = self._values[slot]
                push(ins[0], g * s * (1.0 - s))
            elif op == "power":
                v = self._values[ins[0]]
                push(ins[0], g * aux * v ** (aux - 1.0))
            elif op == "sum":
                push(ins[0], np.full_like(self._values[ins[0]], float(g)))
            elif op == "concat":
                start = 0
                for part, width in zip(ins, aux):
                    push(part, g[:, start : start + width])
                    start += width
            elif op == "slice_cols":
                start, stop = aux
                full = np.zeros_like(self._values[ins[0]])
                full[:, start:stop] = g
                push(ins[0], full)
            elif op == "softmax_xent":
                labels, w = aux
                v = self._values[ins[0]]
                probs = _softmax_rows(v)
                probs[np.arange(v.shape[0]), labels] -= 1.0
                push(ins[0], float(g) * (w[:, None] * probs) / v.shape[0])
            elif op == "kl_softmax":
                v = self._values[ins[0]]
                q = _softmax_rows(v)
                push(ins[0], float(g) * (q - aux) / v.shape[0])
            elif op == "sq_diff_sum":
                d = self._values[ins[0]] - self._values[ins[1]]
                push(ins[0], 2.0 * float(g) * d)
                push(ins[1], -2.0 * float(g) * d)
            elif op == "rownorm_sum":
                d = self._values[ins[0]] - self._values[ins[1]]
                safe = np.maximum(aux, 1e-30)[:, None]
                push(ins[0], float(g) * d / safe)
                push(ins[1], -float(g) * d / safe)
            elif op == "gru_sequence":
                f, w, u, b = ins
                hs = self._values[slot]
                d_xa, d_u = _kernels.gru_backward(
                    np.ascontiguousarray(g), hs, aux, self._values[u]
                )
                push(f, d_xa @ self._values[w].T)
                push(w, self._values[f].T @ d_xa)
                push(u, d_u)
                push(b, d_xa.sum(axis=0))
            else:  # pragma: no cover
                raise TapeError(f"unknown primitive in backward: {op}")

        result: dict[str, np.ndarray] = {}
        if self.store is not None:
            for name in self.store.names():
                slot = self._param_slots.get(name)
                if slot is not None and slot in grads:
                    result[name] = grads[slot]
                else:
                    result[name] = np.zeros_like(self.store[name])
        return result
