"""Shared autoencoder stack and its three denoising experts.

Three levels (large/medium/small, hidden widths decreasing) hold all
parameters exactly once. An expert is a prefix of the encoder stack mirrored
by the matching decoders: mild stops after level 1, moderate after level 2,
strong after level 3. Because the experts are views over the same storage,
updating one level changes every expert that traverses it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from densemble.numerics import DenseLayer, dense_backward, dense_forward, sigmoid

LEVEL_NAMES = ("large", "medium", "small")
PARENT_NAMES = ("mild", "moderate", "strong")

_MAGIC = b"AEL1"
_PARAM_SUFFIXES = ("encoder.weight", "encoder.bias", "embedding",
                   "decoder.weight", "decoder.bias")


class CheckpointError(Exception):
    """Checkpoint file is missing, corrupt, or structurally inconsistent."""


@dataclass
class SubAE:
    """One autoencoder level: encoder, per-user embedding, decoder.

    The embedding row is the level's user-specific bias added to the encoder
    pre-activation; decoders carry no user term.
    """

    name: str
    encoder: DenseLayer   # prev_dim -> hidden_dim
    embedding: np.ndarray  # (num_users, hidden_dim)
    decoder: DenseLayer   # hidden_dim -> prev_dim

    def __post_init__(self):
        ok = (self.embedding.ndim == 2
              and self.embedding.shape[1] == self.encoder.out_dim
              and self.decoder.in_dim == self.encoder.out_dim
              and self.decoder.out_dim == self.encoder.in_dim)
        if not ok:
            raise ValueError(f"inconsistent shapes in level {self.name!r}")

    @property
    def prev_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def hidden_dim(self) -> int:
        return self.encoder.out_dim


@dataclass(frozen=True)
class ParentComposition:
    """A denoising expert: traverse `depth` encoder levels, then decode back."""

    name: str
    depth: int


class DenoiserStack:
    """The three shared levels plus the three expert compositions over them."""

    def __init__(self, num_users: int, num_items: int, levels):
        levels = tuple(levels)
        if len(levels) != len(LEVEL_NAMES):
            raise ValueError(f"expected {len(LEVEL_NAMES)} levels")
        if levels[0].prev_dim != num_items:
            raise ValueError("large level must consume the item vector")
        for lo, hi in zip(levels[1:], levels[:-1]):
            if lo.prev_dim != hi.hidden_dim:
                raise ValueError("levels must chain: prev_dim == upper hidden_dim")
            if lo.hidden_dim >= hi.hidden_dim:
                raise ValueError("hidden widths must strictly decrease")
        for level in levels:
            if level.embedding.shape[0] != num_users:
                raise ValueError("embedding rows must match num_users")
        self.num_users = num_users
        self.num_items = num_items
        self.levels = levels
        self.parents = tuple(ParentComposition(name, depth)
                             for depth, name in enumerate(PARENT_NAMES, start=1))

    @property
    def dims(self) -> tuple:
        return tuple(level.hidden_dim for level in self.levels)

    @classmethod
    def initialize(cls, num_users: int, num_items: int, dims=(128, 48, 12),
                   rng: np.random.Generator | None = None) -> "DenoiserStack":
        """Glorot-uniform layers, embeddings uniform in ±0.01, zero biases."""
        if rng is None:
            rng = np.random.default_rng(0)
        if len(dims) != len(LEVEL_NAMES):
            raise ValueError(f"expected {len(LEVEL_NAMES)} hidden widths, "
                             f"got {tuple(dims)}")
        prevs = (num_items,) + tuple(dims[:-1])
        levels = []
        for name, prev, hidden in zip(LEVEL_NAMES, prevs, dims):
            encoder = DenseLayer.glorot(prev, hidden, rng)
            embedding = rng.uniform(-0.01, 0.01, size=(num_users, hidden))
            decoder = DenseLayer.glorot(hidden, prev, rng)
            levels.append(SubAE(name, encoder, embedding, decoder))
        return cls(num_users, num_items, levels)

    def parameters(self) -> dict:
        """Named parameter arrays in checkpoint order (live views, not copies)."""
        out = {}
        for level in self.levels:
            out[f"{level.name}.encoder.weight"] = level.encoder.weight
            out[f"{level.name}.encoder.bias"] = level.encoder.bias
            out[f"{level.name}.embedding"] = level.embedding
            out[f"{level.name}.decoder.weight"] = level.decoder.weight
            out[f"{level.name}.decoder.bias"] = level.decoder.bias
        return out

    def parent(self, name_or_parent) -> ParentComposition:
        if isinstance(name_or_parent, ParentComposition):
            return name_or_parent
        name = str(name_or_parent).lower()
        if name not in PARENT_NAMES:
            raise ValueError(f"unknown expert {name_or_parent!r}; "
                             f"expected one of {PARENT_NAMES}")
        return self.parents[PARENT_NAMES.index(name)]


def encode_level(subae: SubAE, users, x):
    """sigmoid(x @ W_enc + b_enc + embedding[user]); batched or single row."""
    pre = dense_forward(subae.encoder, x) + subae.embedding[users]
    return sigmoid(pre)


def decode_level(subae: SubAE, code):
    return sigmoid(dense_forward(subae.decoder, code))


def parent_forward(model: DenoiserStack, parent, users, x):
    """Run one expert end to end; mirrors the encode path with decoders."""
    parent = model.parent(parent)
    h = x
    for level in model.levels[:parent.depth]:
        h = encode_level(level, users, h)
    for level in reversed(model.levels[:parent.depth]):
        h = decode_level(level, h)
    return h


def parent_forward_trace(model: DenoiserStack, parent, users, x):
    """Like parent_forward but records (kind, level_index, input, output)
    per step so a backward pass can reuse the activations."""
    parent = model.parent(parent)
    trace = []
    h = np.asarray(x, dtype=np.float64)
    for idx in range(parent.depth):
        out = encode_level(model.levels[idx], users, h)
        trace.append(("encode", idx, h, out))
        h = out
    for idx in reversed(range(parent.depth)):
        out = decode_level(model.levels[idx], h)
        trace.append(("decode", idx, h, out))
        h = out
    return h, trace


def zero_gradients(model: DenoiserStack) -> dict:
    return {k: np.zeros_like(p) for k, p in model.parameters().items()}


def parent_backward(model: DenoiserStack, parent, users, x, grad_output,
                    grads: dict | None = None, trace=None) -> dict:
    """Accumulate analytic gradients of one expert into `grads`.

    Parameters of levels the expert does not traverse receive zero gradient.
    Pass `trace` from parent_forward_trace to skip recomputing the forward.
    """
    parent = model.parent(parent)
    if trace is None:
        _, trace = parent_forward_trace(model, parent, users, x)
    if grads is None:
        grads = zero_gradients(model)
    users_arr = np.atleast_1d(np.asarray(users, dtype=np.int64))
    g = np.atleast_2d(np.asarray(grad_output, dtype=np.float64))
    for kind, idx, step_in, step_out in reversed(trace):
        out2 = np.atleast_2d(step_out)
        dpre = g * out2 * (1.0 - out2)  # sigmoid'
        level = model.levels[idx]
        if kind == "decode":
            dw, db, g = dense_backward(level.decoder, np.atleast_2d(step_in), dpre)
            grads[f"{level.name}.decoder.weight"] += dw
            grads[f"{level.name}.decoder.bias"] += db
        else:
            dw, db, g = dense_backward(level.encoder, np.atleast_2d(step_in), dpre)
            grads[f"{level.name}.encoder.weight"] += dw
            grads[f"{level.name}.encoder.bias"] += db
            # np.add.at tolerates repeated users within one batch
            np.add.at(grads[f"{level.name}.embedding"], users_arr, dpre)
    return grads


def count_parameters(num_users: int, num_items: int, dims=(128, 48, 12),
                     include_gating: bool = False, num_experts: int = 3) -> int:
    """Exact scalar-parameter count of the shared stack.

    Per level with input width `prev` and hidden width `K`:
    encoder prev*K, embedding U*K, encoder bias K, decoder K*prev, decoder
    bias prev. Gating adds two D x E matrices when enabled.
    """
    if num_users < 1 or num_items < 1 or any(k < 1 for k in dims):
        raise ValueError("all counts must be positive")
    prevs = (num_items,) + tuple(dims[:-1])
    total = 0
    for prev, k in zip(prevs, dims):
        total += prev * k + num_users * k + k + k * prev + prev
    if include_gating:
        total += 2 * num_items * num_experts
    return total


def parameter_breakdown(num_users: int, num_items: int, dims=(128, 48, 12),
                        num_experts: int = 3) -> dict:
    """Per-level counts plus gating and both totals, as an ordered dict."""
    prevs = (num_items,) + tuple(dims[:-1])
    names = LEVEL_NAMES if len(dims) == len(LEVEL_NAMES) else [
        f"level{i + 1}" for i in range(len(dims))]
    out = {}
    for name, prev, k in zip(names, prevs, dims):
        out[name] = prev * k + num_users * k + k + k * prev + prev
    out["gating"] = 2 * num_items * num_experts
    out["total_without_gating"] = sum(out[n] for n in names)
    out["total_with_gating"] = out["total_without_gating"] + out["gating"]
    return out


def save_checkpoint(path, model: DenoiserStack, gating=None) -> None:
    """Binary checkpoint, bit-exact across save/load.

    Layout: magic "AEL1"; little-endian uint64 header fields num_users,
    num_items, dim1, dim2, dim3, flags (bit 0 = gating present), k (0 when
    no gating); then every model parameter array in parameters() order as
    little-endian float64, C order; then gate weight and noise matrices.
    """
    header = [model.num_users, model.num_items, *model.dims]
    if gating is not None:
        header += [1, gating.k]
    else:
        header += [0, 0]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.asarray(header, dtype="<u8").tobytes())
        for arr in model.parameters().values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if gating is not None:
            fh.write(np.ascontiguousarray(gating.w_gate, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(gating.w_noise, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (model, gating-or-None)."""
    from densemble.gating import GatingParams  # local import avoids a cycle

    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    header = np.frombuffer(blob, dtype="<u8", count=7, offset=4)
    num_users, num_items, k1, k2, k3, flags, top_k = (int(v) for v in header)
    dims = (k1, k2, k3)
    if num_users < 1 or num_items < 1 or any(d < 1 for d in dims):
        raise CheckpointError(f"{path}: invalid header dimensions")
    has_gating = bool(flags & 1)
    if has_gating and not 1 <= top_k <= 3:
        raise CheckpointError(f"{path}: invalid stored k={top_k}")

    expected = count_parameters(num_users, num_items, dims)
    if has_gating:
        expected += 2 * num_items * 3
    if len(blob) != 4 + 7 * 8 + expected * 8:
        raise CheckpointError(f"{path}: size mismatch, corrupt checkpoint")

    offset = 4 + 7 * 8

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
        offset += n * 8
        return arr.reshape(shape).copy()

    prevs = (num_items,) + dims[:-1]
    levels = []
    for name, prev, hidden in zip(LEVEL_NAMES, prevs, dims):
        encoder = DenseLayer(take((prev, hidden)), take((hidden,)))
        embedding = take((num_users, hidden))
        decoder = DenseLayer(take((hidden, prev)), take((prev,)))
        levels.append(SubAE(name, encoder, embedding, decoder))
    model = DenoiserStack(num_users, num_items, levels)
    gating = None
    if has_gating:
        gating = GatingParams(w_gate=take((num_items, 3)),
                              w_noise=take((num_items, 3)), k=top_k)
    return model, gating
