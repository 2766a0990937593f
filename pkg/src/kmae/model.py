"""KMAE network: k-space line tokens, transformer encoder, interpolation
decoder, task heads, the image-domain MAE variant and a small residual CNN."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import container
from . import nn
from . import tensor as T
from .kspace import ComplexSeries, fft2c, ifft2c
from .nn import ConfigError, Module
from .tensor import Tensor

TASKS = ("pretrain", "regress_ef", "regress_edv", "classify", "segment")
ENCODER_PREFIXES = ("embed.", "mask_token", "pos_embed", "encoder.", "enc_norm.")


@dataclass
class ModelConfig:
    input_domain: str = "kspace"
    token_scheme: str = "kline"
    embed_dim: int = 64
    encoder_layers: int = 4
    heads: int = 4
    decoder_layers: int = 2
    decoder_dim: int = 32
    decoder_heads: int = 4
    task_layers: int = 1
    image_patch_size: int = 2
    mask_ratio: float = 0.75
    H: int = 32
    W: int = 32
    T: int = 8
    S: int = 3
    loss_support: str = "all"
    kspace_scale: float = 0.125
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.input_domain not in ("kspace", "image"):
            raise ConfigError(f"input_domain must be kspace or image, got {self.input_domain!r}")
        expected = "kline" if self.input_domain == "kspace" else "image_patch"
        if self.token_scheme != expected:
            raise ConfigError(f"{self.input_domain} input uses the {expected} token scheme, got {self.token_scheme!r}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError(f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}")
        if self.token_scheme == "image_patch":
            p = self.image_patch_size
            if self.H % p or self.W % p:
                raise ConfigError(f"frame {self.H}x{self.W} not divisible by patch size {p}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1)")
        if self.loss_support not in ("all", "missing_only"):
            raise ConfigError(f"loss_support must be all or missing_only, got {self.loss_support!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        return self

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def n_tokens(self) -> int:
        if self.token_scheme == "kline":
            return self.T * self.H
        p = self.image_patch_size
        return self.T * (self.H // p) * (self.W // p)

    @property
    def token_dim(self) -> int:
        if self.token_scheme == "kline":
            return 2 * self.W
        return self.image_patch_size**2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        """8 layers, 8 heads, 512-wide embedding."""
        base = dict(embed_dim=512, encoder_layers=8, heads=8, decoder_layers=8, decoder_dim=512, decoder_heads=8)
        base.update(kw)
        return cls(**base)

    @classmethod
    def image_mae(cls, **kw) -> "ModelConfig":
        base = dict(input_domain="image", token_scheme="image_patch")
        base.update(kw)
        return cls(**base)


@dataclass
class TokenGrid:
    tokens: Tensor
    positions: np.ndarray  # int [s, 2] (frame, line) or [s, 3] (frame, row, col)
    visibility: np.ndarray  # bool [s]


class KMAE(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.target_norm = (0.0, 1.0)  # (mean, std) of the regression target
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        D, Dd, n = cfg.embed_dim, cfg.decoder_dim, cfg.n_tokens
        self.embed = nn.Linear(rng, cfg.token_dim, D, dt)
        self.mask_token = Tensor(nn.trunc_normal(rng, (D,), 0.02, dt), requires_grad=True)
        self.pos_embed = Tensor(nn.trunc_normal(rng, (n, D), 0.02, dt), requires_grad=True)
        self.encoder = [nn.Block(rng, D, cfg.heads, dtype=dt) for _ in range(cfg.encoder_layers)]
        self.enc_norm = nn.LayerNorm(D, dt)
        self.dec_embed = nn.Linear(rng, D, Dd, dt)
        self.dec_mask_token = Tensor(nn.trunc_normal(rng, (Dd,), 0.02, dt), requires_grad=True)
        self.dec_pos = Tensor(nn.trunc_normal(rng, (n, Dd), 0.02, dt), requires_grad=True)
        self.decoder = [nn.Block(rng, Dd, cfg.decoder_heads, dtype=dt) for _ in range(cfg.decoder_layers)]
        self.dec_norm = nn.LayerNorm(Dd, dt)
        self.dec_head = nn.Linear(rng, Dd, cfg.token_dim, dt)
        self.task_blocks = [nn.Block(rng, D, cfg.heads, dtype=dt) for _ in range(cfg.task_layers)]
        self.task_norm = nn.LayerNorm(D, dt)
        self.reg_head = nn.Linear(rng, D, 1, dt)
        self.cls_head = nn.Linear(rng, D, 2, dt)
        self.seg_weight = Tensor(np.array([[0.0], [0.0], [-4.0]], dtype=dt), requires_grad=True)
        self.seg_bias = Tensor(np.array([1.0], dtype=dt), requires_grad=True)

    def named_parameters(self, prefix=""):
        for name, p in super().named_parameters(prefix):
            if name != "cfg":
                yield name, p

    def param_dict(self) -> dict:
        return dict(self.named_parameters())

    def encoder_param_names(self) -> list:
        return [n for n in self.param_dict() if n.startswith(ENCODER_PREFIXES)]


def _as_complex(k) -> np.ndarray:
    return k.data if isinstance(k, ComplexSeries) else np.asarray(k)


def _lines(mask) -> np.ndarray:
    return np.asarray(mask.lines if hasattr(mask, "lines") else mask, dtype=bool)


def complex_to_pair(k: np.ndarray, dtype=np.float32) -> np.ndarray:
    return np.stack([k.real, k.imag], axis=-1).astype(dtype)


def pair_to_complex(x: np.ndarray) -> np.ndarray:
    return x[..., 0] + 1j * x[..., 1]


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------

def tokenize_kspace(model: KMAE, k_masked, mask) -> TokenGrid:
    """One token per (frame, phase-encode line); missing lines become mask tokens."""
    cfg = model.cfg
    if cfg.token_scheme != "kline":
        raise ConfigError("tokenize_kspace needs the kline token scheme")
    k = _as_complex(k_masked)
    lines = _lines(mask)
    if k.shape != (cfg.T, cfg.H, cfg.W) or lines.shape != (cfg.T, cfg.H):
        raise ValueError(f"k-space {k.shape} / mask {lines.shape} do not match grid T={cfg.T} H={cfg.H} W={cfg.W}")
    feats = complex_to_pair(k, cfg.np_dtype).reshape(cfg.T * cfg.H, 2 * cfg.W) * cfg.kspace_scale
    vis = lines.reshape(-1)
    proj = model.embed(Tensor(feats))
    tokens = T.where(vis[:, None], proj, model.mask_token) + model.pos_embed
    tt, kk = np.meshgrid(np.arange(cfg.T), np.arange(cfg.H), indexing="ij")
    positions = np.stack([tt.reshape(-1), kk.reshape(-1)], axis=1)
    return TokenGrid(tokens, positions, vis)


def patchify(img: np.ndarray, p: int) -> np.ndarray:
    """[T, H, W] -> [T * (H/p) * (W/p), p*p] in frame, row, col order."""
    Tn, H, W = img.shape
    x = img.reshape(Tn, H // p, p, W // p, p).transpose(0, 1, 3, 2, 4)
    return x.reshape(Tn * (H // p) * (W // p), p * p)


def unpatchify(x, T_: int, H: int, W: int, p: int):
    """Inverse of :func:`patchify`; works on arrays and Tensors."""
    shape = (T_, H // p, W // p, p, p)
    if isinstance(x, Tensor):
        return x.reshape(shape).transpose(0, 1, 3, 2, 4).reshape(T_, H, W)
    return np.asarray(x).reshape(shape).transpose(0, 1, 3, 2, 4).reshape(T_, H, W)


def n_masked_patches(n_tokens: int, mask_ratio: float) -> int:
    return int(np.floor(mask_ratio * n_tokens))


def tokenize_image(model: KMAE, img: np.ndarray, mask_ratio: Optional[float] = None,
                   rng: Optional[np.random.Generator] = None) -> TokenGrid:
    """Non-overlapping p x p patches; a random ``mask_ratio`` share is hidden."""
    cfg = model.cfg
    if cfg.token_scheme != "image_patch":
        raise ConfigError("tokenize_image needs the image_patch token scheme")
    p = cfg.image_patch_size
    img = np.asarray(img, dtype=cfg.np_dtype)
    if img.shape[1] % p or img.shape[2] % p:
        raise ConfigError(f"frame {img.shape[1:]} not divisible by patch size {p}")
    ratio = cfg.mask_ratio if mask_ratio is None else mask_ratio
    patches = patchify(img, p)
    n = patches.shape[0]
    vis = np.ones(n, dtype=bool)
    n_mask = n_masked_patches(n, ratio)
    if n_mask:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        vis[rng.permutation(n)[:n_mask]] = False
    tokens = model.embed(Tensor(patches)) + model.pos_embed
    tt, rr, cc = np.meshgrid(np.arange(cfg.T), np.arange(cfg.H // p), np.arange(cfg.W // p), indexing="ij")
    positions = np.stack([tt.reshape(-1), rr.reshape(-1), cc.reshape(-1)], axis=1)
    return TokenGrid(tokens, positions, vis)


# ---------------------------------------------------------------------------
# encoder / decoder
# ---------------------------------------------------------------------------

def encode(model: KMAE, grid: TokenGrid) -> Tensor:
    """Pre-norm transformer stack.  Image tokens: visible ones only (MAE)."""
    x = grid.tokens
    if model.cfg.token_scheme == "image_patch" and not grid.visibility.all():
        x = x[np.flatnonzero(grid.visibility)]
    for blk in model.encoder:
        x = blk(x)
    return model.enc_norm(x)


def interpolation_decoder(model: KMAE, encoded: Tensor, grid: Optional[TokenGrid] = None) -> Tensor:
    """Predict the full grid.

    k-space mode returns a real Tensor [T, H, W, 2] in k-space units; image
    mode returns per-patch values [n_tokens, p*p].
    """
    cfg = model.cfg
    h = model.dec_embed(encoded)
    if cfg.token_scheme == "image_patch" and grid is not None and not grid.visibility.all():
        vis_idx = np.flatnonzero(grid.visibility)
        full = T.where(np.zeros((cfg.n_tokens, 1), dtype=bool), model.dec_mask_token, model.dec_mask_token)
        scatter = np.zeros((cfg.n_tokens, len(vis_idx)), dtype=cfg.np_dtype)
        scatter[vis_idx, np.arange(len(vis_idx))] = 1.0
        h = T.matmul(Tensor(scatter), h) + T.where(grid.visibility[:, None], 0.0, full)
    h = h + model.dec_pos
    for blk in model.decoder:
        h = blk(h)
    out = model.dec_head(model.dec_norm(h))
    if cfg.token_scheme == "kline":
        return out.reshape(cfg.T, cfg.H, cfg.W, 2) * (1.0 / cfg.kspace_scale)
    return out


def data_consistency(predicted, measured, mask):
    """Overwrite sampled lines of ``predicted`` with the measurement.

    Accepts complex arrays [T, H, W] or real pair Tensors [T, H, W, 2] (the
    measurement is then given as a complex array).
    """
    lines = _lines(mask)
    meas = _as_complex(measured)
    if isinstance(predicted, Tensor):
        if predicted.shape[:2] != lines.shape or meas.shape != predicted.shape[:3]:
            raise ValueError(f"data_consistency dims: pred {predicted.shape}, meas {meas.shape}, mask {lines.shape}")
        return T.where(lines[:, :, None, None], complex_to_pair(meas, predicted.dtype), predicted)
    pred = _as_complex(predicted)
    if pred.shape != meas.shape or pred.shape[:2] != lines.shape:
        raise ValueError(f"data_consistency dims: pred {pred.shape}, meas {meas.shape}, mask {lines.shape}")
    return np.where(lines[:, :, None], meas, pred)


def ifft2c_pair(x: Tensor) -> Tensor:
    """Differentiable centered inverse FFT on [..., H, W, 2] real pairs.

    The transform is unitary, so the adjoint applied in the backward pass is
    the forward transform.
    """
    x = T.as_tensor(x)
    dt = x.dtype
    out = complex_to_pair(ifft2c(pair_to_complex(x.data).astype(np.complex128 if dt == np.float64 else np.complex64)), dt)

    def bw(g):
        return (complex_to_pair(fft2c(pair_to_complex(g)), dt),)

    return T._result(out, (x,), bw)


# ---------------------------------------------------------------------------
# task heads
# ---------------------------------------------------------------------------

def task_features(model: KMAE, encoded: Tensor) -> Tensor:
    """Trainable blocks that follow the (possibly frozen) encoder."""
    h = encoded
    if model.task_blocks:
        for blk in model.task_blocks:
            h = blk(h)
        h = model.task_norm(h)
    return h


def regression_head(model: KMAE, encoded: Tensor) -> Tensor:
    """Mean-pool tokens, then one linear layer to a scalar."""
    pooled = encoded.mean(axis=0, keepdims=True)
    return model.reg_head(pooled).reshape(())


def classification_logits(model: KMAE, encoded: Tensor) -> Tensor:
    pooled = encoded.mean(axis=0, keepdims=True)
    return model.cls_head(pooled).reshape(2)


def classification_head(model: KMAE, encoded: Tensor) -> Tensor:
    return T.softmax_rows(classification_logits(model, encoded).reshape(1, 2)).reshape(2)


def segmentation_features(kspace: Tensor) -> Tensor:
    """(real, imaginary, magnitude) per pixel of the reconstructed image."""
    img = ifft2c_pair(kspace)
    re, im = img[..., 0], img[..., 1]
    mag = T.sqrt(re * re + im * im + 1e-12)
    return T.stack([re, im, mag], axis=-1)


def segmentation_logits(model: KMAE, kspace: Tensor) -> Tensor:
    """Shared 1x1 convolution (3 -> 1 channels) over every pixel and frame."""
    if model.cfg.token_scheme != "kline":
        raise ConfigError("segmentation_head expects the kline scheme")
    feats = segmentation_features(kspace)
    out = T.matmul(feats, model.seg_weight) + model.seg_bias
    return out.reshape(out.shape[:-1])


def segmentation_head(model: KMAE, kspace: Tensor) -> Tensor:
    return T.sigmoid(segmentation_logits(model, kspace))


def multi_slice_aggregate(outputs):
    """Average per-slice scalars or probability vectors (renormalized)."""
    if len(outputs) == 0:
        raise ValueError("multi_slice_aggregate needs at least one slice")
    arr = np.asarray([np.asarray(o, dtype=np.float64) for o in outputs])
    avg = arr.mean(axis=0)
    if avg.ndim == 0:
        return float(avg)
    return avg / avg.sum()


# ---------------------------------------------------------------------------
# residual CNN baseline
# ---------------------------------------------------------------------------

@dataclass
class CNNConfig:
    in_channels: int = 16
    channels: tuple = (16, 32, 64, 64)
    strides: tuple = (1, 2, 2, 2)
    kspace_scale: float = 0.125
    dtype: str = "float32"
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["strides"] = tuple(d["strides"])
        return cls(**d)


class CNNBaseline(Module):
    """Stem conv, four residual stages, global average pool, task heads."""

    def __init__(self, cfg: CNNConfig):
        self.cfg = cfg
        self.target_norm = (0.0, 1.0)  # (mean, std) of the regression target
        rng = np.random.default_rng(cfg.seed)
        dt = np.dtype(cfg.dtype)
        self.stem = nn.Conv2d(rng, cfg.in_channels, cfg.channels[0], 3, 1, 1, dt)
        blocks, c_prev = [], cfg.channels[0]
        for c, s in zip(cfg.channels, cfg.strides):
            blocks.append(nn.ResidualBlock(rng, c_prev, c, s, dt))
            c_prev = c
        self.stages = blocks
        self.reg_head = nn.Linear(rng, c_prev, 1, dt)
        self.cls_head = nn.Linear(rng, c_prev, 2, dt)

    def named_parameters(self, prefix=""):
        for name, p in super().named_parameters(prefix):
            if name != "cfg":
                yield name, p

    def param_dict(self):
        return dict(self.named_parameters())

    def features(self, x: Tensor) -> Tensor:
        h = T.relu(self.stem(x))
        for blk in self.stages:
            h = blk(h)
        return h.mean(axis=(1, 2)).reshape(1, -1)


def kspace_channels(k_masked, dtype=np.float32, scale=0.125) -> np.ndarray:
    """[T, H, W] complex -> [2T, H, W] real (real and imaginary per frame)."""
    k = _as_complex(k_masked)
    return (np.concatenate([k.real, k.imag], axis=0) * scale).astype(dtype)


def cnn_baseline_forward(model: CNNBaseline, x, task: str, logits: bool = False) -> Tensor:
    x = T.as_tensor(x)
    feats = model.features(x)
    if task in ("regress_ef", "regress_edv", "regress"):
        return model.reg_head(feats).reshape(())
    if task == "classify":
        out = model.cls_head(feats)
        return out.reshape(2) if logits else T.softmax_rows(out).reshape(2)
    raise ConfigError(f"CNN baseline supports classify/regress tasks, not {task!r}")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    config: dict
    params: dict  # name -> ndarray
    step: int = 0
    meta: dict = field(default_factory=dict)
    optimizer: Optional[dict] = None  # {"step", "m": {...}, "v": {...}}

    @property
    def arch(self) -> str:
        return self.meta.get("arch", "kmae")


def param_hash(params: dict, names=None) -> str:
    h = hashlib.sha256()
    for name in sorted(names if names is not None else params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


def checkpoint_from_model(model, step=0, meta=None, opt_state=None) -> ModelCheckpoint:
    params = {n: p.data.copy() for n, p in model.named_parameters()}
    arch = "cnn" if isinstance(model, CNNBaseline) else "kmae"
    meta = dict(meta or {})
    meta["arch"] = arch
    if arch == "kmae":
        meta["encoder_hash"] = param_hash(params, model.encoder_param_names())
    optimizer = None
    if opt_state is not None:
        optimizer = {
            "step": opt_state.step,
            "m": {k: v.copy() for k, v in opt_state.first_moment.items()},
            "v": {k: v.copy() for k, v in opt_state.second_moment.items()},
        }
    return ModelCheckpoint(model.cfg.to_dict(), params, step, meta, optimizer)


def model_from_checkpoint(ckpt: ModelCheckpoint):
    if ckpt.arch == "cnn":
        model = CNNBaseline(CNNConfig.from_dict(ckpt.config))
    else:
        model = KMAE(ModelConfig.from_dict(ckpt.config))
    own = model.param_dict()
    missing = set(own) - set(ckpt.params)
    extra = set(ckpt.params) - set(own)
    if missing or extra:
        raise ValueError(f"checkpoint parameters mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, p in own.items():
        src = ckpt.params[name]
        if src.shape != p.data.shape:
            raise ValueError(f"parameter {name}: checkpoint shape {src.shape} vs model {p.data.shape}")
        p.data = np.array(src, dtype=p.data.dtype)
    model.target_norm = tuple(ckpt.meta.get("target_norm", (0.0, 1.0)))
    return model


def save_checkpoint(path, ckpt: ModelCheckpoint):
    arrays = {f"param/{n}": ckpt.params[n] for n in sorted(ckpt.params)}
    meta = {"kind": "checkpoint", "config": ckpt.config, "step": ckpt.step, "info": ckpt.meta}
    if ckpt.optimizer is not None:
        meta["optimizer_step"] = ckpt.optimizer["step"]
        for n in sorted(ckpt.optimizer["m"]):
            arrays[f"adam_m/{n}"] = ckpt.optimizer["m"][n]
            arrays[f"adam_v/{n}"] = ckpt.optimizer["v"][n]
    container.write(path, arrays, meta)


def load_checkpoint(path) -> ModelCheckpoint:
    arrays, meta = container.read(path)
    if meta.get("kind") != "checkpoint":
        raise container.ContainerError(f"{path} is not a checkpoint container")
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    optimizer = None
    if "optimizer_step" in meta:
        optimizer = {
            "step": meta["optimizer_step"],
            "m": {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")},
            "v": {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")},
        }
    return ModelCheckpoint(meta["config"], params, meta.get("step", 0), meta.get("info", {}), optimizer)
