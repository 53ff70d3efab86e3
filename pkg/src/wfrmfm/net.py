"""Velocity and growth field networks with hand-rolled differentiation.

Two disjoint multilayer perceptron heads share one input layout
``[x, t, T, embedding(c)]``: the v-head outputs a velocity in R^d, the
h-head a scalar mass-growth rate.  Differentiation is implemented directly
on the layer structure: forward-mode directional derivatives propagate a
dual value through every layer (used for the identity-based training
targets), and reverse-mode accumulation produces parameter gradients for
the loss.  No autodiff framework is involved, which keeps evaluation
deterministic and the checkpoint format trivial.

The condition embedding table is treated as frozen data (descriptors of
the conditions, not trainable parameters); gradients for it are always
zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import DataError

__all__ = [
    "MeanFieldParams",
    "JvpResult",
    "Batch",
    "LEAKY_SLOPE",
    "init",
    "forward",
    "jvp",
    "loss_and_grads",
    "zero_grads",
    "save_checkpoint",
    "load_checkpoint",
]

LEAKY_SLOPE = 0.01

_MAGIC = b"WFRM"
_VERSION = 1


@dataclass
class MeanFieldParams:
    """Weights of both heads plus the architecture descriptor.

    ``v_weights[i]`` has shape (fan_in, fan_out) so evaluation is
    ``x @ W + b``.  ``embedding`` is an (n_conditions, e) table of frozen
    condition descriptors (empty when e = 0).
    """

    d: int
    e: int
    depth: int
    width: int
    n_conditions: int
    v_weights: list
    v_biases: list
    h_weights: list
    h_biases: list
    embedding: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def copy(self) -> "MeanFieldParams":
        return MeanFieldParams(
            d=self.d, e=self.e, depth=self.depth, width=self.width,
            n_conditions=self.n_conditions,
            v_weights=[w.copy() for w in self.v_weights],
            v_biases=[b.copy() for b in self.v_biases],
            h_weights=[w.copy() for w in self.h_weights],
            h_biases=[b.copy() for b in self.h_biases],
            embedding=self.embedding.copy(),
        )

    def arrays(self):
        """All parameter arrays in fixed declaration order (embedding last)."""
        out = []
        for w, b in zip(self.v_weights, self.v_biases):
            out += [w, b]
        for w, b in zip(self.h_weights, self.h_biases):
            out += [w, b]
        out.append(self.embedding)
        return out


@dataclass
class JvpResult:
    value: np.ndarray
    directional_derivative: np.ndarray


@dataclass
class Batch:
    """One training batch: inputs, detached targets, per-sample weights."""

    x: np.ndarray
    t: np.ndarray
    T: np.ndarray
    v_target: np.ndarray
    h_target: np.ndarray
    weight: np.ndarray
    cond: Optional[np.ndarray] = None


def _layer_sizes(in_dim: int, width: int, depth: int, out_dim: int):
    sizes = [in_dim] + [width] * (depth - 1) + [out_dim]
    return list(zip(sizes[:-1], sizes[1:]))


def init(d: int, e: int = 0, depth: int = 5, width: int = 256,
         seed: int = 0, n_conditions: int = 0) -> MeanFieldParams:
    """Fresh parameters: fan-in-scaled uniform init, zeroed h-head output.

    The h-head's final layer starts at exactly zero so the initial model is
    mass-preserving.  Identical seeds give bit-identical parameters.
    """
    if d < 1:
        raise ValueError("state dimension must be at least 1")
    if e < 0 or depth < 1 or width < 1:
        raise ValueError("bad architecture parameters")
    rng = np.random.default_rng(seed)
    in_dim = d + 2 + e

    def draw(shapes):
        ws, bs = [], []
        for fan_in, fan_out in shapes:
            bound = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            bs.append(rng.uniform(-bound, bound, size=fan_out))
        return ws, bs

    v_w, v_b = draw(_layer_sizes(in_dim, width, depth, d))
    h_w, h_b = draw(_layer_sizes(in_dim, width, depth, 1))
    h_w[-1][:] = 0.0
    h_b[-1][:] = 0.0
    embedding = np.zeros((n_conditions, e), dtype=np.float64)
    return MeanFieldParams(d=d, e=e, depth=depth, width=width,
                           n_conditions=n_conditions,
                           v_weights=v_w, v_biases=v_b,
                           h_weights=h_w, h_biases=h_b, embedding=embedding)


def _features(params: MeanFieldParams, x, t, T, cond):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    n = x2.shape[0]
    if n == 0:
        raise DataError("empty input batch")
    if x2.shape[1] != params.d:
        raise DataError(f"expected points of dimension {params.d}, got {x2.shape[1]}")
    t2 = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    T2 = np.broadcast_to(np.asarray(T, dtype=np.float64), (n,))
    cols = [x2, t2[:, None], T2[:, None]]
    if params.e > 0:
        if cond is None:
            raise DataError("this model is conditional; a condition id is required")
        c2 = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,))
        if np.any(c2 < 0) or np.any(c2 >= params.n_conditions):
            bad = int(c2[(c2 < 0) | (c2 >= params.n_conditions)][0])
            raise DataError(f"unknown condition id {bad}")
        cols.append(params.embedding[c2])
    return np.concatenate(cols, axis=1), single


_ROW_BLOCK = 128


def _row_blocks(F):
    """Yield fixed-size row blocks of ``F``, padding the tail by repetition.

    Every matrix product downstream then has the same shape no matter how
    many samples were passed in.  The BLAS kernel (and with it the exact
    summation order) is selected by operand shape, so fixing the shape makes
    a row's result bit-identical whether it is evaluated alone or inside a
    batch of any size.  Yields ``(block, k)`` where only the first ``k``
    rows are real.
    """
    n = F.shape[0]
    for start in range(0, n, _ROW_BLOCK):
        chunk = F[start:start + _ROW_BLOCK]
        k = chunk.shape[0]
        if k < _ROW_BLOCK:
            reps = np.broadcast_to(chunk[-1:], (_ROW_BLOCK - k, F.shape[1]))
            chunk = np.concatenate([chunk, reps], axis=0)
        yield chunk, k


def _stitch(pieces):
    return pieces[0] if len(pieces) == 1 else np.concatenate(pieces, axis=0)


def _mlp_forward(ws, bs, F):
    """Plain forward pass; returns output and cached layer inputs."""
    last = len(ws) - 1
    outs = []
    acts = [[] for _ in ws]
    for block, k in _row_blocks(F):
        a = block
        for i, (w, b) in enumerate(zip(ws, bs)):
            acts[i].append(a[:k])
            z = a @ w + b
            a = z if i == last else np.where(z > 0, z, LEAKY_SLOPE * z)
        outs.append(a[:k])
    return _stitch(outs), [_stitch(layer) for layer in acts]


def _mlp_jvp(ws, bs, F, dF):
    """Forward pass carrying a dual (tangent) component through each layer.

    At the activation the tangent is scaled by the local slope; a
    pre-activation of exactly zero takes the negative-slope branch.
    """
    last = len(ws) - 1
    outs, douts = [], []
    for (block, k), (dblock, _) in zip(_row_blocks(F), _row_blocks(dF)):
        a, da = block, dblock
        for i, (w, b) in enumerate(zip(ws, bs)):
            z = a @ w + b
            dz = da @ w
            if i < last:
                slope = np.where(z > 0, 1.0, LEAKY_SLOPE)
                a = np.where(z > 0, z, LEAKY_SLOPE * z)
                da = dz * slope
            else:
                a, da = z, dz
        outs.append(a[:k])
        douts.append(da[:k])
    return _stitch(outs), _stitch(douts)


def _mlp_backward(ws, acts, gout):
    """Reverse-mode parameter gradients given d(loss)/d(output)."""
    gw = [None] * len(ws)
    gb = [None] * len(ws)
    delta = gout
    for i in range(len(ws) - 1, -1, -1):
        a_in = acts[i]
        gw[i] = a_in.T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            back = delta @ ws[i].T
            # acts[i] is the post-activation input of layer i; its sign
            # pattern matches the pre-activation's, so it selects the slope
            delta = back * np.where(a_in > 0, 1.0, LEAKY_SLOPE)
    return gw, gb


def forward(params: MeanFieldParams, x, t, T, cond=None):
    """Evaluate both heads.

    Accepts a single sample (1-D ``x``) or a batch (2-D ``x`` with
    broadcastable ``t``, ``T``).  Returns ``(v, h)`` with shapes (d,) and
    scalar for a single sample, (n, d) and (n,) for a batch.  Batched and
    per-sample evaluation agree bitwise.
    """
    F, single = _features(params, x, t, T, cond)
    v, _ = _mlp_forward(params.v_weights, params.v_biases, F)
    h, _ = _mlp_forward(params.h_weights, params.h_biases, F)
    h = h[:, 0]
    if single:
        return v[0], float(h[0])
    return v, h


def jvp(params: MeanFieldParams, x, t, T, dx, dt, dT, cond=None):
    """Forward-mode directional derivative of both heads.

    The direction is ``(dx, dt, dT)`` in the input space (the embedding
    coordinates carry zero tangent).  Returns a pair of
    :class:`JvpResult`, for the v-head and the h-head; each ``value``
    equals the plain forward output bitwise.
    """
    F, single = _features(params, x, t, T, cond)
    n = F.shape[0]
    dx2 = np.broadcast_to(np.asarray(dx, dtype=np.float64), (n, params.d))
    dt2 = np.broadcast_to(np.asarray(dt, dtype=np.float64), (n,))
    dT2 = np.broadcast_to(np.asarray(dT, dtype=np.float64), (n,))
    dcols = [dx2, dt2[:, None], dT2[:, None]]
    if params.e > 0:
        dcols.append(np.zeros((n, params.e)))
    dF = np.concatenate(dcols, axis=1)
    v, dv = _mlp_jvp(params.v_weights, params.v_biases, F, dF)
    h, dh = _mlp_jvp(params.h_weights, params.h_biases, F, dF)
    h, dh = h[:, 0], dh[:, 0]
    if single:
        return (JvpResult(v[0], dv[0]),
                JvpResult(float(h[0]), float(dh[0])))
    return JvpResult(v, dv), JvpResult(h, dh)


def zero_grads(params: MeanFieldParams) -> MeanFieldParams:
    """A gradient container of the same shape as ``params``, all zeros."""
    return MeanFieldParams(
        d=params.d, e=params.e, depth=params.depth, width=params.width,
        n_conditions=params.n_conditions,
        v_weights=[np.zeros_like(w) for w in params.v_weights],
        v_biases=[np.zeros_like(b) for b in params.v_biases],
        h_weights=[np.zeros_like(w) for w in params.h_weights],
        h_biases=[np.zeros_like(b) for b in params.h_biases],
        embedding=np.zeros_like(params.embedding),
    )


def loss_and_grads(params: MeanFieldParams, batch: Batch, lam: float,
                   return_parts: bool = False):
    """Weighted squared-error loss and its parameter gradients.

    loss = mean_i weight_i * (||v_i - v_target_i||^2 + lam * (h_i - h_target_i)^2)

    Targets are plain arrays (already detached upstream); no gradient with
    respect to them exists here by construction.  With ``lam = 0`` the
    h-head gradients are exactly zero.  Pass ``return_parts=True`` to also
    get the unweighted-by-lambda v and h components for logging.
    """
    if not np.all(np.isfinite(batch.v_target)):
        bad = int(np.argwhere(~np.isfinite(batch.v_target).all(axis=1))[0][0])
        raise DataError(f"non-finite v_target at sample {bad}")
    if not np.all(np.isfinite(batch.h_target)):
        bad = int(np.argwhere(~np.isfinite(batch.h_target))[0][0])
        raise DataError(f"non-finite h_target at sample {bad}")
    F, _ = _features(params, batch.x, batch.t, batch.T, batch.cond)
    v, v_acts = _mlp_forward(params.v_weights, params.v_biases, F)
    h, h_acts = _mlp_forward(params.h_weights, params.h_biases, F)
    n = F.shape[0]
    w = np.asarray(batch.weight, dtype=np.float64)
    dv = v - batch.v_target
    dh = h[:, 0] - batch.h_target
    loss_v = float(np.sum(w * np.sum(dv * dv, axis=1)) / n)
    loss_h = float(np.sum(w * dh * dh) / n)
    loss = loss_v + lam * loss_h
    gv = (2.0 / n) * w[:, None] * dv
    gh = ((2.0 * lam / n) * w * dh)[:, None]
    v_gw, v_gb = _mlp_backward(params.v_weights, v_acts, gv)
    h_gw, h_gb = _mlp_backward(params.h_weights, h_acts, gh)
    grads = MeanFieldParams(
        d=params.d, e=params.e, depth=params.depth, width=params.width,
        n_conditions=params.n_conditions,
        v_weights=v_gw, v_biases=v_gb, h_weights=h_gw, h_biases=h_gb,
        embedding=np.zeros_like(params.embedding),
    )
    if return_parts:
        return loss, grads, (loss_v, loss_h)
    return loss, grads


def save_checkpoint(params: MeanFieldParams, path) -> None:
    """Write params as little-endian binary (portable, self-describing)."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        fh.write(struct.pack("<IIIII", params.d, params.e, params.depth,
                             params.width, params.n_conditions))
        for arr in params.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> MeanFieldParams:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises ``DataError`` on a bad magic, an unsupported version, or a file
    whose payload does not match the architecture in its own header.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise DataError(f"{path}: not a checkpoint file (magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    d, e, depth, width, n_conditions = struct.unpack_from("<IIIII", blob, 6)
    params = init(d=d, e=e, depth=depth, width=width, seed=0,
                  n_conditions=n_conditions)
    offset = 26
    for arr in params.arrays():
        nbytes = arr.size * 8
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise DataError(f"{path}: truncated checkpoint payload")
        arr[...] = np.frombuffer(chunk, dtype="<f8").reshape(arr.shape)
        offset += nbytes
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes")
    return params
