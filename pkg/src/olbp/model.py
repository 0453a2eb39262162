"""The OLBP network: VGG-style encoder, object localization modules (OLMs),
and a top-down prediction network with boundary preservation modules (BPMs).

Data flow for the full model::

    image -> encoder blocks 1..5 -> F_r[i]
    FDM   -> max-pool pyramid    -> F_fdm[i]
    OLM-i(F_r[i], F_fdm[i])      -> F_olm[i], S_olm[i]
    pred block 5(F_olm[5]) -> F_pred[5]
    for i = 5..2:
        F_p[i]  = relu(deconv(dropout(F_pred[i])))
        BPM-i(F_p[i])            -> F_bpm[i], B[i], S_bpm[i]
        F_pred[i-1] = pred block i-1(concat(F_bpm[i], F_olm[i-1]))
    heads(F_pred[1])             -> S[1], B[1]
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import ops
from .fixation import FixationDensityMap
from .tensor import Parameter, ShapeError, Tensor

FDM_MODES = ("concat_at_input", "per_scale_concat", "olm")
OLM_VARIANTS = ("full", "no_dilated", "no_multiply", "no_concat", "no_seg_sup")
LEVELS = (1, 2, 3, 4, 5)


class ConfigError(ValueError):
    pass


@dataclass
class Ablation:
    use_olm: bool = True
    use_bpm: bool = True
    fdm_input_mode: str = "olm"
    olm_variant: str = "full"


# Rows of the ablation tables, by CLI name.
ABLATIONS = {
    "full": Ablation(),
    "ba_star": Ablation(use_olm=False, use_bpm=False, fdm_input_mode="concat_at_input"),
    "ba_star_bpm": Ablation(use_olm=False, use_bpm=True, fdm_input_mode="concat_at_input"),
    "ba": Ablation(use_olm=False, use_bpm=False, fdm_input_mode="per_scale_concat"),
    "ba_bpm": Ablation(use_olm=False, use_bpm=True, fdm_input_mode="per_scale_concat"),
    "ba_olm": Ablation(use_olm=True, use_bpm=False),
    "no_bpm": Ablation(use_olm=True, use_bpm=False),
    "no_dilated": Ablation(olm_variant="no_dilated"),
    "no_multiply": Ablation(olm_variant="no_multiply"),
    "no_concat": Ablation(olm_variant="no_concat"),
    "no_seg_sup": Ablation(olm_variant="no_seg_sup"),
}


@dataclass
class OLBPConfig:
    scale_preset: str = "toy"
    input_size: tuple[int, int, int] = (64, 64, 3)
    block_channels: list[int] = field(default_factory=lambda: [8, 16, 32, 64, 64])
    block_convs: list[int] = field(default_factory=lambda: [2, 2, 3, 3, 3])
    olm_dilation_rates: list[list[int]] = field(
        default_factory=lambda: [[1, 3, 5, 7]] * 3 + [[1, 2, 3, 4]] * 2)
    olm_dilation_channels: list[int] = field(default_factory=lambda: [4, 8, 16, 32, 32])
    olm_2conv: list[tuple[int, int]] = field(
        default_factory=lambda: [(7, 16), (5, 32), (5, 64), (3, 128), (3, 128)])
    ablation: Ablation = field(default_factory=Ablation)
    dropout: float = 0.5
    rng_seed: int = 0

    @classmethod
    def paper(cls, **kw) -> "OLBPConfig":
        return cls(**{
            "scale_preset": "paper",
            "input_size": (288, 288, 3),
            "block_channels": [64, 128, 256, 512, 512],
            "olm_dilation_channels": [32, 64, 128, 256, 256],
            "olm_2conv": [(7, 128), (5, 256), (5, 512), (3, 1024), (3, 1024)],
            **kw,
        })

    @classmethod
    def toy(cls, **kw) -> "OLBPConfig":
        """Full-size widths divided by 8 at 64x64 input."""
        p = cls.paper()
        return cls(**{
            "scale_preset": "toy",
            "input_size": (64, 64, 3),
            "block_channels": [c // 8 for c in p.block_channels],
            "olm_dilation_channels": [c // 8 for c in p.olm_dilation_channels],
            "olm_2conv": [(k, c // 8) for k, c in p.olm_2conv],
            **kw,
        })

    @classmethod
    def tiny(cls, **kw) -> "OLBPConfig":
        """16x16 network used for whole-network gradient checks."""
        return cls(**{
            "scale_preset": "tiny",
            "input_size": (16, 16, 3),
            "block_channels": [2, 2, 4, 4, 4],
            "block_convs": [1, 1, 1, 1, 1],
            "olm_dilation_channels": [1, 1, 1, 1, 1],
            "olm_2conv": [(3, 2), (3, 2), (3, 2), (3, 2), (3, 2)],
            **kw,
        })

    @classmethod
    def preset(cls, name: str, **kw) -> "OLBPConfig":
        try:
            return {"paper": cls.paper, "toy": cls.toy, "tiny": cls.tiny}[name](**kw)
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}") from None

    def validate(self) -> None:
        for key in ("block_channels", "block_convs", "olm_dilation_rates", "olm_dilation_channels", "olm_2conv"):
            if len(getattr(self, key)) != 5:
                raise ConfigError(f"{key} needs 5 per-level entries, got {len(getattr(self, key))}")
        for lvl, rates in enumerate(self.olm_dilation_rates, 1):
            if len(rates) != 4:
                raise ConfigError(f"OLM-{lvl} needs 4 dilation rates, got {len(rates)}")
        h, w, c = self.input_size
        if h % 16 or w % 16:
            raise ConfigError(f"input {h}x{w} must be divisible by 16 for five levels")
        if c != 3:
            raise ConfigError("images must have 3 channels")
        a = self.ablation
        if a.fdm_input_mode not in FDM_MODES:
            raise ConfigError(f"fdm_input_mode must be one of {FDM_MODES}")
        if a.olm_variant not in OLM_VARIANTS:
            raise ConfigError(f"olm_variant must be one of {OLM_VARIANTS}")
        if a.use_olm != (a.fdm_input_mode == "olm"):
            raise ConfigError("use_olm requires fdm_input_mode='olm' and vice versa")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["olm_2conv"] = [list(x) for x in self.olm_2conv]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OLBPConfig":
        d = copy.deepcopy(d)
        d["ablation"] = Ablation(**d.get("ablation", {}))
        d["input_size"] = tuple(d["input_size"])
        d["olm_2conv"] = [tuple(x) for x in d["olm_2conv"]]
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class NetworkOutputs:
    seg_final: Tensor
    boundary_final: Tensor
    olm_side: dict[int, Tensor] = field(default_factory=dict)
    bpm_side_seg: dict[int, Tensor] = field(default_factory=dict)
    bpm_side_boundary: dict[int, Tensor] = field(default_factory=dict)
    olm_features: dict[int, Tensor] = field(default_factory=dict)
    encoder_features: dict[int, Tensor] = field(default_factory=dict)
    r_loc: dict[int, Tensor] = field(default_factory=dict)

    def supervised(self) -> list[tuple[str, Tensor, str]]:
        """(term name, logits, "seg" | "bnd") for every supervised map."""
        out = [("seg_final", self.seg_final, "seg"), ("bnd_final", self.boundary_final, "bnd")]
        out += [(f"olm{i}", t, "seg") for i, t in sorted(self.olm_side.items())]
        for i in sorted(self.bpm_side_seg):
            out.append((f"bpm_seg{i}", self.bpm_side_seg[i], "seg"))
            out.append((f"bpm_bnd{i}", self.bpm_side_boundary[i], "bnd"))
        return out


LOSS_TERMS = (["seg_final", "bnd_final"] + [f"olm{i}" for i in LEVELS]
              + [name for i in (2, 3, 4, 5) for name in (f"bpm_seg{i}", f"bpm_bnd{i}")])


class Network:
    """Parameter store plus the OLBP forward pass."""

    def __init__(self, cfg: OLBPConfig, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.params: dict[str, Parameter] = {}
        self._rng = np.random.default_rng(cfg.rng_seed)
        self._build()
        del self._rng

    # -- construction -----------------------------------------------------
    def _conv(self, name: str, c_in: int, c_out: int, k: int) -> None:
        if name + ".w" in self.params:
            raise ConfigError(f"duplicate parameter {name}")
        self.params[name + ".w"] = ops.xavier_init((c_out, c_in, k, k), self._rng, name + ".w", self.dtype)
        self.params[name + ".b"] = Parameter(np.zeros(c_out, dtype=self.dtype), name + ".b")

    def _deconv(self, name: str, c_in: int, c_out: int, k: int = 4) -> None:
        self.params[name + ".w"] = ops.xavier_init((c_in, c_out, k, k), self._rng, name + ".w", self.dtype)
        self.params[name + ".b"] = Parameter(np.zeros(c_out, dtype=self.dtype), name + ".b")

    def skip_channels(self, level: int) -> int:
        """Width of the per-level feature handed to the prediction network."""
        a, c = self.cfg.ablation, self.cfg.block_channels[level - 1]
        if not a.use_olm:
            return c + (1 if a.fdm_input_mode == "per_scale_concat" else 0)
        return c if a.olm_variant == "no_concat" else 2 * c

    def _build(self) -> None:
        cfg, a = self.cfg, self.cfg.ablation
        c = cfg.block_channels
        c_in = 4 if a.fdm_input_mode == "concat_at_input" else 3
        for lvl in LEVELS:
            for j in range(cfg.block_convs[lvl - 1]):
                self._conv(f"enc{lvl}.conv{j + 1}", c_in, c[lvl - 1], 3)
                c_in = c[lvl - 1]
        if a.use_olm:
            for lvl in LEVELS:
                dc = cfg.olm_dilation_channels[lvl - 1]
                if a.olm_variant == "no_dilated":
                    self._conv(f"olm{lvl}.single", 1, 4 * dc, 3)
                else:
                    for n, _ in enumerate(cfg.olm_dilation_rates[lvl - 1], 1):
                        self._conv(f"olm{lvl}.dil{n}", 1, dc, 3)
                k2, m2 = cfg.olm_2conv[lvl - 1]
                self._conv(f"olm{lvl}.int1", 4 * dc, m2, k2)
                self._conv(f"olm{lvl}.int2", m2, m2, k2)
                self._conv(f"olm{lvl}.loc", m2, c[lvl - 1], 3)
                if a.olm_variant != "no_seg_sup":
                    self._conv(f"olm{lvl}.seg", self.skip_channels(lvl), 2, 3)
        # prediction network, top-down
        c_in = self.skip_channels(5)
        for lvl in (5, 4, 3, 2, 1):
            for j in range(cfg.block_convs[lvl - 1]):
                self._conv(f"pred{lvl}.conv{j + 1}", c_in, c[lvl - 1], 3)
                c_in = c[lvl - 1]
            if lvl == 1:
                break
            self._deconv(f"deconv{lvl}", c[lvl - 1], c[lvl - 2])
            c_p = c[lvl - 2]
            if a.use_bpm:
                self._conv(f"bpm{lvl}.bnd", c_p, 2, 3)
                self._conv(f"bpm{lvl}.seg", c_p + 1, 2, 3)
                c_p += 1
            c_in = c_p + self.skip_channels(lvl - 1)
        self._conv("head.seg", c[0], 2, 3)
        self._conv("head.bnd", c[0], 2, 3)

    # -- parameters -------------------------------------------------------
    def parameters(self) -> Iterator[Parameter]:
        return iter(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, p.shape) for n, p in self.params.items()]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for n, p in self.params.items():
            if state[n].shape != p.shape:
                raise ShapeError(f"{n}: checkpoint shape {state[n].shape} vs {p.shape}")
            p.data = np.array(state[n], dtype=self.dtype)

    def astype(self, dtype) -> "Network":
        self.dtype = dtype
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    # -- layers -----------------------------------------------------------
    def conv(self, name: str, x: Tensor, dilation: int = 1) -> Tensor:
        w = self.params[name + ".w"]
        k = w.shape[-1]
        return ops.conv2d(x, w, self.params[name + ".b"], stride=1,
                          padding=dilation * (k - 1) // 2, dilation=dilation)

    def conv_relu(self, name: str, x: Tensor, dilation: int = 1) -> Tensor:
        return ops.relu(self.conv(name, x, dilation))

    def __call__(self, image, fdm, training: bool = False, rng=None) -> NetworkOutputs:
        return forward(self, image, fdm, training, rng)


def olm_forward(net: Network, level: int, f_r: Tensor, f_fdm: Tensor):
    """Object localization at one encoder level.

    Returns ``(f_olm, s_olm_logits or None, r_loc)``.
    """
    cfg, variant = net.cfg, net.cfg.ablation.olm_variant
    c_i = cfg.block_channels[level - 1]
    if f_r.shape[1] != c_i:
        raise ShapeError(f"OLM-{level}: F_r has {f_r.shape[1]} channels, expected {c_i}", axis="c")
    if f_fdm.shape[1] != 1 or f_fdm.shape[2:] != f_r.shape[2:]:
        raise ShapeError(f"OLM-{level}: F_fdm {f_fdm.shape} does not match F_r {f_r.shape}")
    if variant == "no_dilated":
        f_mi = net.conv_relu(f"olm{level}.single", f_fdm)
    else:
        f_mi = ops.concat_channels([net.conv_relu(f"olm{level}.dil{n}", f_fdm, dilation=r)
                                    for n, r in enumerate(cfg.olm_dilation_rates[level - 1], 1)])
    f_int = net.conv_relu(f"olm{level}.int2", net.conv_relu(f"olm{level}.int1", f_mi))
    r_loc = ops.sigmoid(net.conv(f"olm{level}.loc", f_int))
    if r_loc.shape[1] != f_r.shape[1]:
        raise ShapeError(f"OLM-{level}: r_loc has {r_loc.shape[1]} channels, F_r has {f_r.shape[1]}", axis="c")
    if variant == "no_multiply":
        f_olm = ops.concat_channels([f_r, r_loc])
    else:
        f_loc = ops.eltwise_mul(f_r, r_loc)
        f_olm = f_loc if variant == "no_concat" else ops.concat_channels([f_r, f_loc])
    s_olm = None if variant == "no_seg_sup" else net.conv(f"olm{level}.seg", f_olm)
    return f_olm, s_olm, r_loc


def bpm_forward(net: Network, level: int, f_p: Tensor):
    """Boundary preservation between prediction blocks ``level`` and ``level-1``.

    Returns ``(f_bpm, b_logits, s_bpm_logits)``.
    """
    if level not in (2, 3, 4, 5):
        raise ValueError(f"BPMs exist at levels 2..5, got {level}")
    b_logits = net.conv(f"bpm{level}.bnd", f_p)
    f_bpm = ops.concat_channels([f_p, ops.softmax_probability(b_logits, 1)])
    return f_bpm, b_logits, net.conv(f"bpm{level}.seg", f_bpm)


def _as_batch(x, what: str) -> np.ndarray:
    if isinstance(x, FixationDensityMap):
        x = x.grid
    if isinstance(x, Tensor):
        x = x.data
    a = np.asarray(x)
    if a.ndim == 2:
        a = a[None, None]
    elif a.ndim == 3:
        a = a[:, None]
    if a.ndim != 4:
        raise ShapeError(f"{what} must be 2-D or (n, 1, h, w), got {a.shape}")
    return a


def image_tensor(image: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 HxWx3 (or n x HxWx3) -> centred float (n, 3, h, w)."""
    a = np.asarray(image)
    if a.ndim == 3:
        a = a[None]
    return (a.astype(np.float64) / 255.0 - 0.5).transpose(0, 3, 1, 2).astype(dtype)


def forward(net: Network, image, fdm, training: bool = False, rng=None,
            dropout: float | None = None) -> NetworkOutputs:
    """Run the network.  ``image`` is a float ``(n, 3, H, W)`` array/Tensor
    (see :func:`image_tensor`); ``fdm`` is ``(H, W)`` or ``(n, 1, H, W)``.
    ``dropout`` overrides the configured ratio."""
    cfg, a = net.cfg, net.cfg.ablation
    ratio = cfg.dropout if dropout is None else dropout
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=net.dtype))
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"image must be (n, 3, H, W), got {x.shape}")
    h, w, _ = cfg.input_size
    if x.shape[2:] != (h, w):
        raise ShapeError(f"image is {x.shape[2]}x{x.shape[3]}, network expects {h}x{w}",
                         axis="h" if x.shape[2] != h else "w")
    fd = _as_batch(fdm, "fdm").astype(net.dtype)
    if fd.shape[2:] != (h, w):
        raise ShapeError(f"FDM is {fd.shape[2:]}, image is {(h, w)}")
    if fd.shape[0] != x.shape[0]:
        fd = np.broadcast_to(fd, (x.shape[0],) + fd.shape[1:]).copy()
    if training and ratio > 0 and rng is None:
        raise ValueError("training with dropout needs an explicit rng")
    f_fdm = {lvl: ops.maxpool2d(Tensor(fd), 2 ** (lvl - 1)) for lvl in LEVELS}

    out = NetworkOutputs(seg_final=None, boundary_final=None)  # type: ignore[arg-type]
    feat = ops.concat_channels([x, f_fdm[1]]) if a.fdm_input_mode == "concat_at_input" else x
    skips: dict[int, Tensor] = {}
    for lvl in LEVELS:
        if lvl > 1:
            feat = ops.maxpool2d(feat, 2)
        for j in range(cfg.block_convs[lvl - 1]):
            feat = net.conv_relu(f"enc{lvl}.conv{j + 1}", feat)
        out.encoder_features[lvl] = feat
        if a.use_olm:
            f_olm, s_olm, r_loc = olm_forward(net, lvl, feat, f_fdm[lvl])
            out.olm_features[lvl] = f_olm
            out.r_loc[lvl] = r_loc
            if s_olm is not None:
                out.olm_side[lvl] = s_olm
            skips[lvl] = f_olm
        elif a.fdm_input_mode == "per_scale_concat":
            skips[lvl] = ops.concat_channels([feat, f_fdm[lvl]])
        else:
            skips[lvl] = feat

    feat = skips[5]
    for lvl in (5, 4, 3, 2, 1):
        for j in range(cfg.block_convs[lvl - 1]):
            feat = net.conv_relu(f"pred{lvl}.conv{j + 1}", feat)
        if lvl == 1:
            break
        feat = ops.dropout(feat, ratio, training, rng)
        w_d = net.params[f"deconv{lvl}.w"]
        f_p = ops.relu(ops.deconv2d(feat, w_d, net.params[f"deconv{lvl}.b"], stride=2, padding=1))
        if a.use_bpm:
            f_p, b_logits, s_bpm = bpm_forward(net, lvl, f_p)
            out.bpm_side_boundary[lvl] = b_logits
            out.bpm_side_seg[lvl] = s_bpm
        feat = ops.concat_channels([f_p, skips[lvl - 1]])
    out.seg_final = net.conv("head.seg", feat)
    out.boundary_final = net.conv("head.bnd", feat)
    return out


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, float]

    @property
    def count(self) -> int:
        return len(self.terms)


def total_loss(outputs: NetworkOutputs, gs, gb) -> LossBreakdown:
    """Unweighted sum of softmax losses over all supervised maps, with the
    ground truths nearest-resized to each map's resolution."""
    gs = _as_batch(gs, "G_s")
    gb = _as_batch(gb, "G_b")
    tensors, terms = [], {}
    for name, logits, kind in outputs.supervised():
        gt = gs if kind == "seg" else gb
        h, w = logits.shape[2:]
        n = gt.shape[0]
        target = np.stack([ops.resize_nearest_array(gt[i, 0], h, w) for i in range(n)])[:, None]
        term = ops.softmax_ce_loss(logits, target)
        tensors.append(term)
        terms[name] = float(term.data)
    return LossBreakdown(ops.add_scalars(tensors), terms)
