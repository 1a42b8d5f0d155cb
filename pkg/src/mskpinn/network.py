"""MJCA-BiGRU activation estimator and its two ablation backbones.

Input windows are B x S x 9 feature arrays in joint-major order
(q, qdot, qddot for hip, then knee, then ankle). The forward pass maps
them to B x N_m raw activations, one per muscle, read off the last
window position.

Parameters live in a plain ordered ``dict`` from dotted names to
:class:`~mskpinn.autodiff.Tensor`; all shapes follow from
:class:`NetConfig`.
"""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "BACKBONES",
    "NetConfig",
    "WindowBatch",
    "init_params",
    "param_count",
    "embed_joint",
    "mjca_forward",
    "attention_weights",
    "integrate_joints",
    "bigru_forward",
    "predict_head",
    "conv_stack",
    "backbone_forward",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
]

BACKBONES = ("mjca", "bigru_only", "cnn")
FEATURES_PER_JOINT = 3


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters.

    ``conv_channels`` and ``conv_dropout`` only matter for the ``cnn``
    backbone; its last channel count must equal ``d_integrated`` so the
    recurrent stack sees the same width as with the other backbones.
    """

    n_joints: int = 3
    d_joint: int = 64
    n_heads: int = 2
    d_integrated: int = 128
    d_gru: int = 128
    gru_layers: int = 2
    dropout: float = 0.1
    head_dims: tuple = (256, 128, 64, 10)
    backbone: str = "mjca"
    conv_channels: tuple = (64, 128, 128)
    conv_dropout: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "head_dims", tuple(int(d) for d in self.head_dims))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.d_joint % self.n_heads:
            raise ValueError(f"d_joint={self.d_joint} is not divisible by n_heads={self.n_heads}")
        if len(self.head_dims) < 2 or self.head_dims[0] != 2 * self.d_gru:
            raise ValueError(f"head_dims must start at 2*d_gru={2 * self.d_gru}, got {self.head_dims}")
        if self.n_joints < 2:
            raise ValueError("cross-joint attention needs at least two joints")
        if self.gru_layers < 1:
            raise ValueError("need at least one recurrent layer")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.conv_dropout < 1.0:
            raise ValueError("dropout rates must lie in [0, 1)")
        if self.conv_channels[-1] != self.d_integrated:
            raise ValueError("the last convolution width must equal d_integrated")

    @property
    def n_muscles(self) -> int:
        return self.head_dims[-1]

    @property
    def d_head(self) -> int:
        return self.d_joint // self.n_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_dims"] = list(self.head_dims)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


@dataclass
class WindowBatch:
    """Normalized windows, B x S x (3 * n_joints)."""

    x: np.ndarray
    n_joints: int = 3
    stats: object = field(default=None, repr=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 3 or self.x.shape[2] != FEATURES_PER_JOINT * self.n_joints:
            raise ValueError(f"windows must be B x S x {FEATURES_PER_JOINT * self.n_joints}, got {self.x.shape}")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("window batch contains non-finite values")

    def joint(self, j: int) -> np.ndarray:
        return self.x[:, :, FEATURES_PER_JOINT * j: FEATURES_PER_JOINT * (j + 1)]


# -- parameters -----------------------------------------------------------------

def _param_shapes(cfg: NetConfig) -> dict:
    """Name -> (shape, fan_in); fan_in None marks a bias (zero init)."""
    D, J, H = cfg.d_joint, cfg.n_joints, cfg.d_gru
    shapes = {}
    for j in range(J):
        shapes[f"embed.{j}.W"] = ((FEATURES_PER_JOINT, D), FEATURES_PER_JOINT)
        shapes[f"embed.{j}.b"] = ((D,), None)
    if cfg.backbone == "mjca":
        for j in range(J):
            shapes[f"mjca.{j}.Wq"] = ((D, D), D)
            shapes[f"mjca.{j}.Wk"] = (((J - 1) * D, D), (J - 1) * D)
            shapes[f"mjca.{j}.Wv"] = (((J - 1) * D, D), (J - 1) * D)
            shapes[f"mjca.{j}.Wo"] = ((D, D), D)
    if cfg.backbone == "cnn":
        c_in = J * D
        for i, c_out in enumerate(cfg.conv_channels):
            shapes[f"conv.{i}.W"] = ((3 * c_in, c_out), 3 * c_in)
            shapes[f"conv.{i}.b"] = ((c_out,), None)
            c_in = c_out
    else:
        shapes["integrate.W"] = ((J * D, cfg.d_integrated), J * D)
        shapes["integrate.b"] = ((cfg.d_integrated,), None)
    d_in = cfg.d_integrated
    for layer in range(cfg.gru_layers):
        for direction in ("fwd", "bwd"):
            pre = f"gru.{layer}.{direction}"
            shapes[f"{pre}.W"] = ((d_in, 3 * H), d_in)
            shapes[f"{pre}.U"] = ((H, 3 * H), H)
            shapes[f"{pre}.b"] = ((3 * H,), None)
        d_in = 2 * H
    dims = cfg.head_dims
    for i in range(len(dims) - 1):
        shapes[f"head.{i}.W"] = ((dims[i], dims[i + 1]), dims[i])
        shapes[f"head.{i}.b"] = ((dims[i + 1],), None)
    return shapes


def init_params(cfg: NetConfig, seed: int = 0) -> dict:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, drawn in a fixed name order."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, (shape, fan_in) in _param_shapes(cfg).items():
        if fan_in is None:
            data = np.zeros(shape)
        else:
            bound = math.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def param_count(params: dict) -> int:
    return int(np.sum([p.data.size for p in params.values()]))


def check_params(cfg: NetConfig, params: dict) -> None:
    expected = _param_shapes(cfg)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter set does not match config (missing {missing}, unexpected {extra})")
    for name, (shape, _) in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")


# -- layers -------------------------------------------------------------------------

def _dense(x, W, b):
    return ad.matmul(x, W) + b


def embed_joint(params: dict, j: int, X) -> Tensor:
    """GELU(X W + b) for joint ``j``; X is B x S x 3."""
    X = ad.as_tensor(X)
    W = params[f"embed.{j}.W"]
    if X.shape[-1] != W.shape[0]:
        raise ValueError(f"joint input has {X.shape[-1]} channels, embedding expects {W.shape[0]}")
    return ad.gelu(_dense(X, W, params[f"embed.{j}.b"]))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, S, D = x.shape
    return ad.swapaxes(ad.reshape(x, (B, S, n_heads, D // n_heads)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    B, Hn, S, dk = x.shape
    return ad.reshape(ad.swapaxes(x, 1, 2), (B, S, Hn * dk))


def _attend(params, j, hs, n_heads):
    others = [h for i, h in enumerate(hs) if i != j]
    C = ad.concat(others, axis=-1)
    Q = _split_heads(ad.matmul(hs[j], params[f"mjca.{j}.Wq"]), n_heads)
    K = _split_heads(ad.matmul(C, params[f"mjca.{j}.Wk"]), n_heads)
    V = _split_heads(ad.matmul(C, params[f"mjca.{j}.Wv"]), n_heads)
    scale = 1.0 / math.sqrt(Q.shape[-1])
    weights = ad.softmax(ad.matmul(Q, ad.swapaxes(K, -1, -2)) * scale, axis=-1)
    return weights, ad.matmul(weights, V)


def mjca_forward(params: dict, hs, n_heads: int) -> list:
    """Cross-joint attention with a residual connection.

    Joint j's sequence supplies the queries; the concatenated sequences of
    the other joints supply keys and values. Scores are S x S per head, so
    attention runs along the time axis of the window.
    """
    hs = [ad.as_tensor(h) for h in hs]
    shape = hs[0].shape
    if any(h.shape != shape for h in hs):
        raise ValueError("all joint feature sequences must share one shape")
    out = []
    for j in range(len(hs)):
        _, ctx = _attend(params, j, hs, n_heads)
        out.append(ad.matmul(_merge_heads(ctx), params[f"mjca.{j}.Wo"]) + hs[j])
    return out


def attention_weights(params: dict, hs, n_heads: int) -> list[np.ndarray]:
    """Per-joint attention maps, each B x n_heads x S x S (no gradient)."""
    with ad.no_tape():
        return [_attend(params, j, [ad.as_tensor(h) for h in hs], n_heads)[0].data for j in range(len(hs))]


def integrate_joints(params: dict, hs) -> Tensor:
    """GELU(Linear(concat(H_1, ..., H_J))) along the feature axis."""
    return ad.gelu(_dense(ad.concat(list(hs), axis=-1), params["integrate.W"], params["integrate.b"]))


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


def bigru_forward(params: dict, h, n_layers: int, dropout: float = 0.0, rng=None) -> Tensor:
    """Stacked bidirectional GRU, B x S x D_in -> B x S x 2 D_g.

    Dropout acts on the input of every layer after the first, and only
    when an ``rng`` is supplied (training mode).
    """
    x = ad.as_tensor(h)
    for layer in range(n_layers):
        if layer > 0:
            x = _dropout(x, dropout, rng)
        halves = []
        for direction in ("fwd", "bwd"):
            pre = f"gru.{layer}.{direction}"
            halves.append(ad.gru_sequence(x, params[f"{pre}.W"], params[f"{pre}.U"], params[f"{pre}.b"],
                                          reverse=direction == "bwd"))
        x = ad.concat(halves, axis=-1)
    return x


def predict_head(params: dict, h_seq, n_layers: int) -> Tensor:
    """Dense chain on the last time step; GELU between layers, linear output."""
    x = ad.getitem(ad.as_tensor(h_seq), (slice(None), -1))
    for i in range(n_layers):
        x = _dense(x, params[f"head.{i}.W"], params[f"head.{i}.b"])
        if i < n_layers - 1:
            x = ad.gelu(x)
    return x


def conv_stack(params: dict, x, n_layers: int, dropout: float = 0.0, rng=None) -> Tensor:
    """Kernel-3, stride-1, zero-padded 1-D convolutions along the sequence axis.

    Each layer is a dense map on [x_{t-1}, x_t, x_{t+1}], followed by GELU
    and dropout.
    """
    x = ad.as_tensor(x)
    for i in range(n_layers):
        B, S, C = x.shape
        pad = Tensor(np.zeros((B, 1, C)))
        xp = ad.concat([pad, x, pad], axis=1)
        taps = [ad.getitem(xp, (slice(None), slice(k, k + S))) for k in range(3)]
        x = ad.gelu(_dense(ad.concat(taps, axis=-1), params[f"conv.{i}.W"], params[f"conv.{i}.b"]))
        x = _dropout(x, dropout, rng)
    return x


def backbone_forward(cfg: NetConfig, params: dict, batch, rng=None) -> Tensor:
    """Raw activations B x N_m for the configured backbone.

    ``rng`` switches on dropout (training); pass None for evaluation.
    """
    x = batch.x if isinstance(batch, WindowBatch) else np.asarray(batch, dtype=float)
    if x.ndim != 3 or x.shape[2] != FEATURES_PER_JOINT * cfg.n_joints:
        raise ValueError(f"expected B x S x {FEATURES_PER_JOINT * cfg.n_joints} windows, got {x.shape}")
    f = FEATURES_PER_JOINT
    hs = [embed_joint(params, j, x[:, :, f * j: f * (j + 1)]) for j in range(cfg.n_joints)]
    if cfg.backbone == "mjca":
        h = integrate_joints(params, mjca_forward(params, hs, cfg.n_heads))
    elif cfg.backbone == "bigru_only":
        h = integrate_joints(params, hs)
    elif cfg.backbone == "cnn":
        h = conv_stack(params, ad.concat(hs, axis=-1), len(cfg.conv_channels), cfg.conv_dropout, rng)
    else:  # pragma: no cover - NetConfig validates the tag
        raise ValueError(f"unknown backbone {cfg.backbone!r}")
    h = bigru_forward(params, h, cfg.gru_layers, cfg.dropout, rng)
    return predict_head(params, h, len(cfg.head_dims) - 1)


def predict(cfg: NetConfig, params: dict, windows, batch_size: int = 256, clamp: bool = False) -> np.ndarray:
    """Evaluation-mode activations for an array of windows, batched."""
    windows = np.asarray(windows, dtype=float)
    out = np.empty((len(windows), cfg.n_muscles))
    with ad.no_tape():
        for lo in range(0, len(windows), batch_size):
            out[lo: lo + batch_size] = backbone_forward(cfg, params, windows[lo: lo + batch_size]).data
    return np.clip(out, 0.0, 1.0) if clamp else out


# -- checkpoints ---------------------------------------------------------------------

_HEADER_KEY = "__header__"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, cfg: NetConfig, params: dict, arrays: dict | None = None, meta: dict | None = None) -> None:
    """Write an uncompressed ``.npz``: a JSON header plus float64 arrays.

    Parameters are stored as ``param/<name>``; ``arrays`` adds further
    named arrays (optimizer moments, normalization statistics). The header
    records the config, the parameter shape table and ``meta``.
    """
    header = {
        "format": "mskpinn-checkpoint",
        "version": 1,
        "config": cfg.to_dict(),
        "params": {k: list(v.shape) for k, v in params.items()},
        "meta": meta or {},
    }
    payload = {f"param/{k}": np.ascontiguousarray(v.data, dtype=np.float64) for k, v in params.items()}
    for k, v in (arrays or {}).items():
        payload[f"array/{k}"] = np.ascontiguousarray(v)
    payload[_HEADER_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    # fixed entry timestamps keep identical checkpoints byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key, arr in payload.items():
            info = zipfile.ZipInfo(f"{key}.npy", date_time=_ZIP_EPOCH)
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arr), allow_pickle=False)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns (config, params, arrays, meta)."""
    with np.load(path, allow_pickle=False) as z:
        if _HEADER_KEY not in z.files:
            raise ValueError(f"{path}: not a checkpoint (missing header)")
        header = json.loads(bytes(z[_HEADER_KEY]).decode())
        if header.get("format") != "mskpinn-checkpoint":
            raise ValueError(f"{path}: unrecognized checkpoint format")
        cfg = NetConfig.from_dict(header["config"])
        params = {}
        # header keys are sorted; restore the canonical order of init_params
        order = [k for k in _param_shapes(cfg) if k in header["params"]]
        order += sorted(set(header["params"]) - set(order))
        for name in order:
            shape = header["params"][name]
            data = z[f"param/{name}"]
            if list(data.shape) != shape:
                raise ValueError(f"{path}: {name} has shape {data.shape}, header says {shape}")
            params[name] = Tensor(data.copy(), requires_grad=True, name=name)
        arrays = {k[len("array/"):]: z[k].copy() for k in z.files if k.startswith("array/")}
    check_params(cfg, params)
    return cfg, params, arrays, header["meta"]
