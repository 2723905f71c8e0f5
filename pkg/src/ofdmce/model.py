"""Transformer channel estimators built on :mod:`ofdmce.autodiff`.

Three variants share one code path:

``adafortitran``
    learned upsampler -> convolutional feature enhancer -> 3x2 patches
    concatenated with channel-statistic encodings -> transformer encoder ->
    projection back to patches -> residual fusion with the shallow features ->
    convolutional reconstructor.
``fortitran``
    the same without the channel-statistic encodings.
``linear``
    the learned upsampler alone.

Real and imaginary parts are run through the same weights as two entries
of one batch.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sim import GridConfig, PilotGrid

__all__ = [
    "ModelConfig", "SIZES", "VARIANTS", "Params", "CheckpointMismatchError", "param_shapes",
    "count_parameters", "init_model", "upsample", "feature_enhance", "cam_encode", "patchify",
    "depatchify", "encoder_layer", "forward", "forward_parts", "save_checkpoint",
    "load_checkpoint", "checkpoint_config", "normalize_stats",
]

VARIANTS = ("adafortitran", "fortitran", "linear")
SIZES = {"S": 1, "M": 3, "L": 6, "XL": 12}

Params = Dict[str, Tensor]
PathLike = Union[str, os.PathLike]


class CheckpointMismatchError(ValueError):
    """Checkpoint was written for a different model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "adafortitran"
    n_layers: int = 6
    n_heads: int = 4
    d_enc: int = 32
    patch: Tuple[int, int] = (3, 2)
    conv_channels: Tuple[int, int, int] = (8, 32, 8)
    cam_hidden: Tuple[int, int] = (7, 42)
    grid: GridConfig = field(default_factory=GridConfig)
    pilot_spacing: int = 3
    pilot_time_indices: Tuple[int, ...] = (2, 11)
    # CAM inputs are divided by these before encoding (SNR dB, Doppler Hz, delay spread ns)
    stat_scale: Tuple[float, float, float] = (25.0, 1000.0, 300.0)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "linear":
            return
        if self.n_layers < 1:
            raise ValueError("transformer variants need at least one layer")
        if self.d_enc % self.n_heads:
            raise ValueError(f"d_enc={self.d_enc} not divisible by {self.n_heads} heads")
        self.grid.check_patchable(self.patch)

    @classmethod
    def sized(cls, size: str, **kw) -> "ModelConfig":
        return cls(n_layers=SIZES[size], **kw)

    @property
    def adaptive(self) -> bool:
        return self.variant == "adafortitran"

    @property
    def pilots(self) -> PilotGrid:
        return PilotGrid.lattice(self.grid, self.pilot_spacing, self.pilot_time_indices)

    @property
    def n_pilots(self) -> int:
        return math.ceil(self.grid.n_subcarriers / self.pilot_spacing) * len(self.pilot_time_indices)

    @property
    def patch_size(self) -> int:
        return self.patch[0] * self.patch[1]

    @property
    def n_patches(self) -> int:
        return self.grid.size // self.patch_size

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["grid"] = GridConfig(**d["grid"])
        for k in ("patch", "conv_channels", "cam_hidden", "pilot_time_indices", "stat_scale"):
            d[k] = tuple(d[k])
        return cls(**d)

    def config_hash(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


def _conv_shapes(prefix: str, config: ModelConfig) -> Dict[str, tuple]:
    chans = (1, *config.conv_channels, 1)
    out = {}
    for i in range(4):
        out[f"{prefix}.W{i + 1}"] = (chans[i + 1], chans[i], 3, 3)
        out[f"{prefix}.b{i + 1}"] = (chans[i + 1],)
    return out


def param_shapes(config: ModelConfig) -> Dict[str, tuple]:
    """Name -> shape of every learnable tensor, in a fixed order."""
    g = config.grid
    shapes: Dict[str, tuple] = {"W1": (g.size, config.n_pilots), "b1": (g.size,)}
    if config.variant == "linear":
        return shapes
    shapes.update(_conv_shapes("enhancer", config))
    d = config.d_enc
    p = config.patch_size
    if config.adaptive:
        h1, h2 = config.cam_hidden
        enc_len = g.size // 3
        for i in (1, 2, 3):
            shapes.update({
                f"cam{i}.W1": (h1, 1), f"cam{i}.b1": (h1,),
                f"cam{i}.W2": (h2, h1), f"cam{i}.b2": (h2,),
                f"cam{i}.W3": (enc_len, h2), f"cam{i}.b3": (enc_len,),
            })
        shapes["W2"] = (2 * p, d)
    else:
        shapes["W2"] = (p, d)
    shapes["b2"] = (d,)
    shapes["M_pos"] = (config.n_patches, d)
    for layer in range(config.n_layers):
        pre = f"layer{layer}."
        for name in ("Q", "K", "V", "O"):
            shapes[pre + f"W_{name}"] = (d, d)
            shapes[pre + f"b_{name}"] = (d,)
        shapes[pre + "ln1.gain"] = (d,)
        shapes[pre + "ln1.shift"] = (d,)
        shapes[pre + "W_t1"] = (d, 2 * d)
        shapes[pre + "b_t1"] = (2 * d,)
        shapes[pre + "W_t2"] = (2 * d, d)
        shapes[pre + "b_t2"] = (d,)
        shapes[pre + "ln2.gain"] = (d,)
        shapes[pre + "ln2.shift"] = (d,)
    shapes["W3"] = (d, p)
    shapes["b3"] = (p,)
    shapes.update(_conv_shapes("reconstructor", config))
    return shapes


def count_parameters(config_or_params) -> int:
    if isinstance(config_or_params, ModelConfig):
        return int(sum(np.prod(s) for s in param_shapes(config_or_params).values()))
    return int(sum(t.size for t in config_or_params.values()))


def _fans(name: str, shape: tuple) -> Tuple[int, int]:
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    # (out x in) weight matrices vs row-convention (in x out) ones
    if name == "W1" or name.startswith("cam"):
        return shape[1], shape[0]
    return shape[0], shape[1]


def init_model(config: ModelConfig, seed: int) -> Params:
    """Glorot-uniform weights, zero biases, unit LayerNorm gains, N(0, 0.02^2) positions."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "M_pos":
            data = rng.normal(0.0, 0.02, size=shape)
        elif leaf == "gain":
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(name, shape)
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


# --------------------------------------------------------------------------
# Building blocks. All take batched real tensors.
# --------------------------------------------------------------------------

def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` over the last axis, as one 2-D GEMM."""
    if x.ndim == 2:
        return ad.add_broadcast_bias(ad.matmul(x, w), b)
    lead = x.shape[:-1]
    flat = ad.reshape(x, (-1, x.shape[-1]))
    return ad.reshape(ad.add_broadcast_bias(ad.matmul(flat, w), b), (*lead, w.shape[-1]))


def upsample(ls_part: Tensor, params: Params, config: ModelConfig) -> Tensor:
    """``(N, |P|) -> (N, N_f, N_t)``: affine map, then frequency-major reshape."""
    if ls_part.shape[-1] != config.n_pilots:
        raise ad.ShapeError(f"upsample: expected {config.n_pilots} pilot values, got {ls_part.shape}")
    g = config.grid
    flat = ad.add_broadcast_bias(ad.matmul(ls_part, ad.transpose(params["W1"])), params["b1"])
    return ad.transpose(ad.reshape(flat, (-1, g.n_symbols, g.n_subcarriers)), (0, 2, 1))


def feature_enhance(x: Tensor, params: Params, prefix: str = "enhancer") -> Tensor:
    """Four 3x3 convolutions (1 -> C1 -> C2 -> C3 -> 1), ReLU after the first three."""
    if x.ndim != 3:
        raise ad.ShapeError(f"feature_enhance: expected (N, N_f, N_t), got {x.shape}")
    n, h, w = x.shape
    y = ad.reshape(x, (n, h, w, 1))
    for i in range(1, 5):
        y = ad.conv2d_3x3_same(y, params[f"{prefix}.W{i}"], params[f"{prefix}.b{i}"])
        if i < 4:
            y = ad.relu(y)
    return ad.reshape(y, (n, h, w))


def normalize_stats(stats: np.ndarray, config: ModelConfig) -> np.ndarray:
    return np.asarray(stats, dtype=np.float64) / np.asarray(config.stat_scale)


def cam_encode(stats: np.ndarray, params: Params, config: ModelConfig) -> Tensor:
    """Channel-statistic encodings ``(N, n_patches, 6)``.

    ``stats`` is ``(N, 3)`` already normalized; each column goes through its own
    two-hidden-layer MLP whose output is folded to ``(n_patches, 2)``.
    """
    if not config.adaptive:
        raise ValueError(f"variant {config.variant!r} has no channel adaptivity module")
    stats = np.atleast_2d(stats)
    parts = []
    for i in (1, 2, 3):
        x = Tensor(stats[:, i - 1:i])
        h = ad.relu(ad.add_broadcast_bias(ad.matmul(x, ad.transpose(params[f"cam{i}.W1"])), params[f"cam{i}.b1"]))
        h = ad.relu(ad.add_broadcast_bias(ad.matmul(h, ad.transpose(params[f"cam{i}.W2"])), params[f"cam{i}.b2"]))
        o = ad.add_broadcast_bias(ad.matmul(h, ad.transpose(params[f"cam{i}.W3"])), params[f"cam{i}.b3"])
        parts.append(ad.reshape(o, (len(stats), -1, 2)))
    return ad.concat_lastdim(parts)


def patchify(frames, patch: Tuple[int, int] = (3, 2)):
    """``(N, H, W) -> (N, H*W/(ph*pw), ph*pw)``.

    Blocks are scanned frequency-major (block row index fastest); each block is
    flattened row-major. Accepts a Tensor or an ndarray (returns the same kind).
    """
    if not isinstance(frames, Tensor):
        arr = np.asarray(frames, dtype=np.float64)
        out = patchify(Tensor(arr.reshape(-1, *arr.shape[-2:])), patch).data
        return out.reshape(*arr.shape[:-2], *out.shape[1:])
    n, h, w = frames.shape
    ph, pw = patch
    if h % ph or w % pw:
        raise ad.ShapeError(f"patchify: frame {h}x{w} not divisible by patch {ph}x{pw}")
    y = ad.reshape(frames, (n, h // ph, ph, w // pw, pw))
    y = ad.transpose(y, (0, 3, 1, 2, 4))
    return ad.reshape(y, (n, (h // ph) * (w // pw), ph * pw))


def depatchify(seq, shape: Tuple[int, int], patch: Tuple[int, int] = (3, 2)):
    """Inverse of :func:`patchify` for frames of ``shape``."""
    if not isinstance(seq, Tensor):
        arr = np.asarray(seq, dtype=np.float64)
        out = depatchify(Tensor(arr.reshape(-1, *arr.shape[-2:])), shape, patch).data
        return out.reshape(*arr.shape[:-2], *shape)
    h, w = shape
    ph, pw = patch
    n = seq.shape[0]
    if seq.shape[1:] != ((h // ph) * (w // pw), ph * pw):
        raise ad.ShapeError(f"depatchify: sequence {seq.shape} does not match frame {shape}")
    y = ad.reshape(seq, (n, w // pw, h // ph, ph, pw))
    y = ad.transpose(y, (0, 2, 3, 1, 4))
    return ad.reshape(y, (n, h, w))


def encoder_layer(h: Tensor, params: Params, prefix: str, n_heads: int,
                  attention: Optional[List[np.ndarray]] = None) -> Tensor:
    """Post-norm transformer encoder layer on ``(N, S, d)``.

    If ``attention`` is a list, the ``(N, heads, S, S)`` attention maps are
    appended to it.
    """
    d = h.shape[-1]
    if d % n_heads:
        raise ad.ShapeError(f"encoder_layer: d_enc={d} not divisible by {n_heads} heads")
    q = ad.split_heads(_affine(h, params[prefix + "W_Q"], params[prefix + "b_Q"]), n_heads)
    k = ad.split_heads(_affine(h, params[prefix + "W_K"], params[prefix + "b_K"]), n_heads)
    v = ad.split_heads(_affine(h, params[prefix + "W_V"], params[prefix + "b_V"]), n_heads)
    scores = ad.matmul(ad.scale(q, 1.0 / math.sqrt(d // n_heads)), ad.transpose(k))
    a = ad.softmax_rows(scores)
    if attention is not None:
        attention.append(a.data)
    heads = ad.merge_heads(ad.matmul(a, v))
    mhsa = _affine(heads, params[prefix + "W_O"], params[prefix + "b_O"])
    z = ad.layer_norm_lastdim(ad.add(mhsa, h), params[prefix + "ln1.gain"], params[prefix + "ln1.shift"])
    mlp = _affine(ad.gelu(_affine(z, params[prefix + "W_t1"], params[prefix + "b_t1"])),
                  params[prefix + "W_t2"], params[prefix + "b_t2"])
    return ad.layer_norm_lastdim(ad.add(z, mlp), params[prefix + "ln2.gain"], params[prefix + "ln2.shift"])


def forward_parts(x: Tensor, stats: Optional[np.ndarray], params: Params, config: ModelConfig,
                  attention: Optional[List[np.ndarray]] = None) -> Tensor:
    """Real-valued network: ``(N, |P|)`` pilot parts -> ``(N, N_f, N_t)``.

    ``stats`` holds raw (SNR dB, Doppler Hz, delay spread ns) rows, one per
    input row; it is ignored by the non-adaptive variants.
    """
    up = upsample(x, params, config)
    if config.variant == "linear":
        return up
    shallow = feature_enhance(up, params, "enhancer")
    seq = patchify(shallow, config.patch)
    if config.adaptive:
        if stats is None:
            raise ValueError("adafortitran needs channel statistics")
        seq = ad.concat_lastdim([seq, cam_encode(normalize_stats(stats, config), params, config)])
    h = ad.add(_affine(seq, params["W2"], params["b2"]), params["M_pos"])
    for layer in range(config.n_layers):
        h = encoder_layer(h, params, f"layer{layer}.", config.n_heads, attention)
    deep = depatchify(_affine(h, params["W3"], params["b3"]), config.grid.shape, config.patch)
    return feature_enhance(ad.add(deep, shallow), params, "reconstructor")


def split_complex(ls: np.ndarray) -> np.ndarray:
    """``(B, |P|)`` complex -> ``(2B, |P|)`` real, real parts first."""
    return np.concatenate([ls.real, ls.imag], axis=0)


def forward(ls_estimate: np.ndarray, stats: Optional[np.ndarray], params: Params,
            config: ModelConfig, batch_size: int = 32,
            attention: Optional[List[np.ndarray]] = None) -> np.ndarray:
    """Estimate complex channel frames from LS pilot estimates (inference only).

    ``ls_estimate`` is ``(|P|,)`` or ``(B, |P|)``; ``stats`` is ``(3,)`` /
    ``(B, 3)`` raw channel statistics or ``None`` for non-adaptive variants.
    """
    ls = np.asarray(ls_estimate)
    single = ls.ndim == 1
    ls = np.atleast_2d(ls)
    if config.adaptive and stats is None:
        raise ValueError("adafortitran needs channel statistics")
    st = None if stats is None else np.atleast_2d(np.asarray(stats, dtype=np.float64))
    out = np.empty((len(ls), *config.grid.shape), dtype=np.complex128)
    for s in range(0, len(ls), batch_size):
        chunk = ls[s:s + batch_size]
        cst = None if st is None else np.concatenate([st[s:s + batch_size]] * 2)
        y = forward_parts(Tensor(split_complex(chunk)), cst, params, config, attention).data
        b = len(chunk)
        out[s:s + b] = y[:b] + 1j * y[b:]
    return out[0] if single else out


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

_CKPT_MAGIC = b"AFTC"


def save_checkpoint(params: Params, config: ModelConfig, path: PathLike) -> None:
    """Write ``.aftc``: magic, version u16, sha256 config hash, config JSON,
    then a named-tensor table of little-endian float64 arrays."""
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<H", 1) + config.config_hash())
        fh.write(struct.pack("<I", len(blob)) + blob)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def _read_checkpoint(path: PathLike):
    buf = Path(path).read_bytes()
    if buf[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    digest = buf[6:38]
    (n,) = struct.unpack_from("<I", buf, 38)
    config = ModelConfig.from_dict(json.loads(buf[42:42 + n]))
    pos = 42 + n
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params: Params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + ln].decode()
        pos += 2 + ln
        (ndim,) = struct.unpack_from("<B", buf, pos)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(shape))
        data = np.frombuffer(buf, "<f8", size, pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        params[name] = Tensor(data, requires_grad=True, name=name)
    return digest, config, params


def checkpoint_config(path: PathLike) -> ModelConfig:
    return _read_checkpoint(path)[1]


def load_checkpoint(path: PathLike, config: Optional[ModelConfig] = None) -> Params:
    """Read parameters; if ``config`` is given its hash must match the file's."""
    digest, stored, params = _read_checkpoint(path)
    if config is not None and config.config_hash() != digest:
        raise CheckpointMismatchError(
            f"{path}: checkpoint was written for {stored.variant} L={stored.n_layers} "
            f"N={stored.pilot_spacing}, not {config.variant} L={config.n_layers} N={config.pilot_spacing}")
    return params
