"""The fine-tuning method family and everything it owns.

Seven methods share one AdapterSpec: LP (head only), BitFit (query/value
biases + head), LoRA / LoRAPlus (rank-r factors), KronA / KronAPlus
(Kronecker factors), LoKr (Kronecker with a low-rank right block). "FFT"
(full fine-tuning) is accepted wherever a method name is, for accounting
and the training harness. The "Plus" variants reuse their base method's
state; the difference lives entirely in optimizer parameter groups.

Each factored method exposes its weight update through a site object that
computes delta(x) factor-first (never materializing the full update in the
hot path), the matching backward, and materialize() for fusion.

At init exactly one factor per site is all-zero (the output-side B), so a
freshly attached adapter leaves model outputs unchanged.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .layers import Param
from .model import VitModel
from .tensor_ops import ShapeError, kron, kron_matvec

METHODS = ("LP", "BitFit", "LoRA", "LoRAPlus", "KronA", "KronAPlus", "LoKr", "FFT")
PLUS_METHODS = ("LoRAPlus", "KronAPlus")

CHECKPOINT_MAGIC = b"PEFT"
CHECKPOINT_VERSION = 1
FULL_MODEL_METHOD_ID = 255
METHOD_IDS = {"LP": 1, "BitFit": 2, "LoRA": 3, "LoRAPlus": 4,
              "KronA": 5, "KronAPlus": 6, "LoKr": 7, "FFT": FULL_MODEL_METHOD_ID}
_ID_METHODS = {v: k for k, v in METHOD_IDS.items()}

BYTES_PER_SCALAR = 4  # adapters are stored as 32-bit floats


class CheckpointError(ValueError):
    """Bad magic/version or tensor shapes that do not fit the model."""


@dataclass(frozen=True)
class AdapterSpec:
    """Method choice plus every hyperparameter the methods consume."""

    method: str
    rank: int = 4                       # LoRA family rank r
    alpha: float = 4.0                  # LoRA scale numerator
    kron_a_shape: tuple = (384, 2)      # shape of the left Kronecker factor
    kron_scale: float = 1.0             # s
    lokr_factor: int = 8                # f, block-size bound
    lokr_rank: int = 8                  # rank of the right-block decomposition
    lokr_gamma: float = 1.0
    lr_ratio: float = 1.0               # lambda for the Plus variants
    init_std: float = 0.02

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method '{self.method}'")
        if self.rank < 1 or self.lokr_rank < 1 or self.lokr_factor < 1:
            raise ValueError("ranks and the LoKr factor must be positive")
        if self.alpha <= 0 or not np.isfinite(self.alpha / self.rank):
            raise ValueError("alpha/rank scaling must be finite and positive")
        if self.kron_scale <= 0 or self.lokr_gamma <= 0 or self.init_std <= 0:
            raise ValueError("scales and init_std must be positive")
        r1, r2 = self.kron_a_shape
        if r1 < 1 or r2 < 1:
            raise ValueError("kron_a_shape entries must be positive")
        if self.method in PLUS_METHODS and self.lr_ratio < 1.0:
            raise ValueError(
                f"lr ratio must be >= 1 for {self.method}, got {self.lr_ratio}")

    def canonical_text(self) -> str:
        return (
            f"method = {self.method}\n"
            f"rank = {self.rank}\n"
            f"alpha = {self.alpha!r}\n"
            f"kron_a_shape = {self.kron_a_shape[0]}x{self.kron_a_shape[1]}\n"
            f"kron_scale = {self.kron_scale!r}\n"
            f"lokr_factor = {self.lokr_factor}\n"
            f"lokr_rank = {self.lokr_rank}\n"
            f"lokr_gamma = {self.lokr_gamma!r}\n"
            f"lambda = {self.lr_ratio!r}\n"
            f"init_std = {self.init_std!r}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "AdapterSpec":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        r1, _, r2 = kv["kron_a_shape"].partition("x")
        return cls(
            method=kv["method"],
            rank=int(kv["rank"]),
            alpha=float(kv["alpha"]),
            kron_a_shape=(int(r1), int(r2)),
            kron_scale=float(kv["kron_scale"]),
            lokr_factor=int(kv["lokr_factor"]),
            lokr_rank=int(kv["lokr_rank"]),
            lokr_gamma=float(kv["lokr_gamma"]),
            lr_ratio=float(kv["lambda"]),
            init_std=float(kv["init_std"]),
        )


def lokr_factorize(p: int, q: int, f: int) -> tuple:
    """Block sizes (u_p, v_p, u_q, v_q) for a p-by-q target.

    u is the largest divisor of the dimension that exceeds neither f nor
    the dimension's square root; v is the cofactor, so u*v always
    reconstructs the dimension exactly.
    """

    def largest(dim: int) -> int:
        for u in range(min(f, math.isqrt(dim)), 0, -1):
            if dim % u == 0:
                return u
        return 1

    u_p = largest(p)
    u_q = largest(q)
    return u_p, p // u_p, u_q, q // u_q


def _gaussian_param(name, rng, shape, std, dtype) -> Param:
    if rng is None:
        return Param(name, shape=shape, dtype=dtype)
    return Param(name, rng.normal(0.0, std, shape).astype(dtype))


def _zero_param(name, shape, dtype) -> Param:
    return Param(name, shape=shape, dtype=dtype)


class LoraSite:
    """Rank-r update for one projection: delta(x) = (alpha/r) * B(Ax)."""

    def __init__(self, layer_index: int, slot: str, p: int, q: int,
                 spec: AdapterSpec, rng, dtype):
        r = spec.rank
        self.layer_index = layer_index
        self.slot = slot
        self.scale = spec.alpha / r
        prefix = f"layer{layer_index}.{slot}"
        self.A = _gaussian_param(f"{prefix}.A", rng, (r, q), spec.init_std, dtype)
        self.B = _zero_param(f"{prefix}.B", (p, r), dtype)
        self._x = None
        self._xa = None

    def delta(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        self._xa = x @ self.A.value.T
        scale = np.asarray(self.scale, dtype=x.dtype)
        return (self._xa @ self.B.value.T) * scale

    def backward(self, d: np.ndarray) -> np.ndarray:
        q = self.A.value.shape[1]
        x2 = self._x.reshape(-1, q)
        d2 = d.reshape(-1, self.B.value.shape[0])
        xa2 = self._xa.reshape(-1, self.A.value.shape[0])
        scale = np.asarray(self.scale, dtype=d.dtype)
        self.B.add_grad((d2.T @ xa2) * scale)
        dxa2 = (d2 @ self.B.value) * scale
        self.A.add_grad(dxa2.T @ x2)
        return (dxa2 @ self.A.value).reshape(self._x.shape)

    def materialize(self) -> np.ndarray:
        scale = np.asarray(self.scale, dtype=self.B.value.dtype)
        return (self.B.value @ self.A.value) * scale

    def params(self):
        yield self.A
        yield self.B


class KronaSite:
    """Kronecker update for one projection: delta(x) = s * (A kron B) x."""

    def __init__(self, layer_index: int, slot: str, p: int, q: int,
                 spec: AdapterSpec, rng, dtype):
        r1, r2 = spec.kron_a_shape
        if p % r1 != 0 or q % r2 != 0:
            raise ShapeError(
                f"Kronecker factor shape ({r1},{r2}) does not tile "
                f"a {p}x{q} weight")
        self.layer_index = layer_index
        self.slot = slot
        self.scale = spec.kron_scale
        prefix = f"layer{layer_index}.{slot}"
        self.A = _gaussian_param(f"{prefix}.A", rng, (r1, r2), spec.init_std, dtype)
        self.B = _zero_param(f"{prefix}.B", (p // r1, q // r2), dtype)
        self._x = None

    def delta(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        scale = np.asarray(self.scale, dtype=x.dtype)
        return kron_matvec(self.A.value, self.B.value, x) * scale

    def backward(self, d: np.ndarray) -> np.ndarray:
        a, b = self.A.value, self.B.value
        r1, r2 = a.shape
        m, n = b.shape
        scale = np.asarray(self.scale, dtype=d.dtype)
        x2 = self._x.reshape(-1, r2 * n)
        d2 = d.reshape(-1, r1 * m)
        xm = np.swapaxes(x2.reshape(-1, r2, n), -1, -2)   # (N, n, r2)
        gm = np.swapaxes(d2.reshape(-1, r1, m), -1, -2)   # (N, m, r1)
        da = np.matmul(np.matmul(np.swapaxes(gm, -1, -2), b), xm).sum(axis=0)
        db = np.matmul(np.matmul(gm, a), np.swapaxes(xm, -1, -2)).sum(axis=0)
        self.A.add_grad(da * scale)
        self.B.add_grad(db * scale)
        dx = kron_matvec(a.T, b.T, d) * scale
        return dx.reshape(self._x.shape)

    def materialize(self) -> np.ndarray:
        scale = np.asarray(self.scale, dtype=self.B.value.dtype)
        return kron(self.A.value, self.B.value) * scale

    def params(self):
        yield self.A
        yield self.B


class LokrSite:
    """Kronecker update whose right block is itself low-rank.

    delta(x) = gamma * (C kron (B A)) x, with block sizes from
    lokr_factorize. B A costs v_p * rank * v_q to form; the full update is
    never materialized outside of fusion.
    """

    def __init__(self, layer_index: int, slot: str, p: int, q: int,
                 spec: AdapterSpec, rng, dtype):
        u_p, v_p, u_q, v_q = lokr_factorize(p, q, spec.lokr_factor)
        r = spec.lokr_rank
        self.layer_index = layer_index
        self.slot = slot
        self.scale = spec.lokr_gamma
        prefix = f"layer{layer_index}.{slot}"
        self.C = _gaussian_param(f"{prefix}.C", rng, (u_p, u_q), spec.init_std, dtype)
        self.A = _gaussian_param(f"{prefix}.A", rng, (r, v_q), spec.init_std, dtype)
        self.B = _zero_param(f"{prefix}.B", (v_p, r), dtype)
        self._x = None
        self._right = None

    def delta(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        self._right = self.B.value @ self.A.value
        scale = np.asarray(self.scale, dtype=x.dtype)
        return kron_matvec(self.C.value, self._right, x) * scale

    def backward(self, d: np.ndarray) -> np.ndarray:
        c, right = self.C.value, self._right
        u_p, u_q = c.shape
        v_p, v_q = right.shape
        scale = np.asarray(self.scale, dtype=d.dtype)
        x2 = self._x.reshape(-1, u_q * v_q)
        d2 = d.reshape(-1, u_p * v_p)
        xm = np.swapaxes(x2.reshape(-1, u_q, v_q), -1, -2)   # (N, v_q, u_q)
        gm = np.swapaxes(d2.reshape(-1, u_p, v_p), -1, -2)   # (N, v_p, u_p)
        dc = np.matmul(np.matmul(np.swapaxes(gm, -1, -2), right), xm).sum(axis=0)
        dright = np.matmul(np.matmul(gm, c), np.swapaxes(xm, -1, -2)).sum(axis=0)
        self.C.add_grad(dc * scale)
        self.B.add_grad((dright @ self.A.value.T) * scale)
        self.A.add_grad((self.B.value.T @ dright) * scale)
        dx = kron_matvec(c.T, right.T, d) * scale
        return dx.reshape(self._x.shape)

    def materialize(self) -> np.ndarray:
        scale = np.asarray(self.scale, dtype=self.B.value.dtype)
        return kron(self.C.value, self.B.value @ self.A.value) * scale

    def params(self):
        yield self.C
        yield self.A
        yield self.B


_SITE_CLASSES = {"LoRA": LoraSite, "LoRAPlus": LoraSite,
                 "KronA": KronaSite, "KronAPlus": KronaSite, "LoKr": LokrSite}


@dataclass
class AdapterState:
    """Everything a method owns once attached to a model."""

    spec: AdapterSpec
    model: VitModel
    sites: list = field(default_factory=list)
    bias_refs: list = field(default_factory=list)  # BitFit only
    fused: bool = False

    def adapter_params(self):
        """Newly created trainables (factor tensors); excludes model params."""
        for site in self.sites:
            yield from site.params()

    def zero_factors(self):
        """The zero-initialized output-side factor of every site."""
        return [site.B for site in self.sites]

    def other_factors(self):
        out = []
        for site in self.sites:
            out.extend(p for p in site.params() if p is not site.B)
        return out

    def stored_params(self, include_head: bool = True):
        """Tensors persisted in an adapter checkpoint, in canonical order."""
        return [p for _, p in self.stored_named_params(include_head)]

    def stored_named_params(self, include_head: bool = True):
        """(checkpoint name, Param) pairs in canonical order.

        Factor tensors already carry their wire names; BitFit bias tensors
        are model parameters, renamed here to the layer{i}.{q|v}.bias form.
        """
        if self.spec.method == "FFT":
            return [(p.name, p) for p in self.model.params()]
        out = []
        for site in self.sites:
            out.extend((p.name, p) for p in site.params())
        for i, bias in enumerate(self.bias_refs):
            slot = "q" if i % 2 == 0 else "v"
            out.append((f"layer{i // 2}.{slot}.bias", bias))
        if include_head:
            out.append(("head.weight", self.model.head.weight))
            out.append(("head.bias", self.model.head.bias))
        return out


def attach(model: VitModel, spec: AdapterSpec,
           rng: np.random.Generator | None = None) -> AdapterState:
    """Install the method on a model and configure trainability.

    Every encoder block's q_proj and v_proj gain a delta hook (for the
    factored methods); base weights are frozen or not according to the
    method. The classifier head is trainable under every method.
    """
    for block in model.blocks:
        if block.attn.q_adapter is not None or block.attn.v_adapter is not None:
            raise RuntimeError("model already has adapters attached")

    method = spec.method
    d = model.config.embed_dim
    state = AdapterState(spec=spec, model=model)

    model.set_all_trainable(method == "FFT")
    if method != "FFT":
        model.head.weight.trainable = True
        model.head.bias.trainable = True

    if method == "BitFit":
        for block in model.blocks:
            for proj in (block.attn.q_proj, block.attn.v_proj):
                proj.bias.trainable = True
                state.bias_refs.append(proj.bias)
    elif method in _SITE_CLASSES:
        site_cls = _SITE_CLASSES[method]
        for i, block in enumerate(model.blocks):
            q_site = site_cls(i, "q", d, d, spec, rng, model.dtype)
            v_site = site_cls(i, "v", d, d, spec, rng, model.dtype)
            block.attn.q_adapter = q_site
            block.attn.v_adapter = v_site
            state.sites.extend([q_site, v_site])
    return state


def count_trainable_params(model: VitModel, state: AdapterState | None = None) -> int:
    """Exact count of scalars whose trainable flag is set."""
    total = sum(p.size for p in model.params() if p.trainable)
    if state is not None:
        total += sum(p.size for p in state.adapter_params() if p.trainable)
    return total


def adapter_storage_bytes(state: AdapterState, include_head: bool = True) -> int:
    """Bytes needed to persist the trainable increment (4 per scalar)."""
    return BYTES_PER_SCALAR * sum(
        p.size for p in state.stored_params(include_head))


def fuse(model: VitModel, state: AdapterState) -> VitModel:
    """Fold every site's update into its base weight and strip the hooks.

    Forward outputs of the fused model equal the adapter-path outputs (up
    to float addition order). BitFit strips hooks only, since its biases
    already live in the model.
    """
    if state.fused:
        raise RuntimeError("adapters already fused into this model")
    if state.spec.method in ("LP", "FFT"):
        raise ValueError(f"{state.spec.method} has no weight update to fuse")
    for site in state.sites:
        attn = model.blocks[site.layer_index].attn
        proj = attn.q_proj if site.slot == "q" else attn.v_proj
        proj.weight.value = proj.weight.value + site.materialize()
    for block in model.blocks:
        block.attn.q_adapter = None
        block.attn.v_adapter = None
    state.fused = True
    return model


def _write_record(buf, name: str, value: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", value.ndim))
    for dim in value.shape:
        buf.write(struct.pack("<I", dim))
    buf.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def _read_record(buf):
    head = buf.read(2)
    if not head:
        return None
    (name_len,) = struct.unpack("<H", head)
    name = buf.read(name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", buf.read(1))
    shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(buf.read(4 * count), dtype="<f4").reshape(shape)
    return name, data


def _serialize(method: str, spec_text: str, records) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<B", METHOD_IDS[method]))
    blob = spec_text.encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for name, value in records:
        _write_record(buf, name, value)
    return buf.getvalue()


def _parse_header(buf):
    magic = buf.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (method_id,) = struct.unpack("<B", buf.read(1))
    if method_id not in _ID_METHODS:
        raise CheckpointError(f"unknown method id {method_id}")
    (blob_len,) = struct.unpack("<I", buf.read(4))
    spec_text = buf.read(blob_len).decode("utf-8")
    return _ID_METHODS[method_id], spec_text


def save_adapters(state: AdapterState, path) -> None:
    """Write the adapter checkpoint; round-trips are byte-exact."""
    if state.spec.method == "FFT":
        raise ValueError("full fine-tuning state is saved with save_model")
    records = [(name, p.value) for name, p in state.stored_named_params()]
    data = _serialize(state.spec.method, state.spec.canonical_text(), records)
    with open(path, "wb") as fh:
        fh.write(data)


def load_adapters(path, model: VitModel) -> AdapterState:
    """Attach the checkpoint's method to `model` and load its tensors."""
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    method, spec_text = _parse_header(buf)
    if method == "FFT":
        raise CheckpointError(
            "full-model checkpoint; use load_model_weights instead")
    try:
        spec = AdapterSpec.from_text(spec_text)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"corrupt spec blob: {exc}") from exc
    state = attach(model, spec, rng=None)
    by_name = dict(state.stored_named_params())
    seen = set()
    while True:
        rec = _read_record(buf)
        if rec is None:
            break
        name, data = rec
        if name not in by_name:
            raise CheckpointError(f"unexpected tensor '{name}' in checkpoint")
        param = by_name[name]
        if param.shape != data.shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': checkpoint {data.shape}, "
                f"model {param.shape}")
        param.value = np.ascontiguousarray(data.astype(model.dtype))
        seen.add(name)
    missing = set(by_name) - seen
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)}")
    return state


def save_model(model: VitModel, path) -> None:
    """Full-model checkpoint in the same record format (reserved method id)."""
    records = [(p.name, p.value) for p in model.params()]
    config_text = f"model = full\nn_classes = {model.config.n_classes}\n"
    data = _serialize("FFT", config_text, records)
    with open(path, "wb") as fh:
        fh.write(data)


def load_model_weights(path, model: VitModel) -> None:
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    method, _ = _parse_header(buf)
    if method != "FFT":
        raise CheckpointError("not a full-model checkpoint")
    by_name = model.named_params()
    seen = set()
    while True:
        rec = _read_record(buf)
        if rec is None:
            break
        name, data = rec
        if name not in by_name:
            raise CheckpointError(f"unexpected tensor '{name}' in checkpoint")
        param = by_name[name]
        if param.shape != data.shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': checkpoint {data.shape}, "
                f"model {param.shape}")
        param.value = np.ascontiguousarray(data.astype(model.dtype))
        seen.add(name)
    missing = set(by_name) - seen
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)}")


def checkpoint_method(path) -> str:
    """Peek at a checkpoint's method without loading tensors."""
    with open(path, "rb") as fh:
        method, _ = _parse_header(io.BytesIO(fh.read(64 * 1024)))
    return method
