"""LIF spiking network with surrogate gradients and a penultimate membrane tap.

Forward dynamics per layer and step:

    u_hat = tau * u_prev + weighted_input
    s     = 1[u_hat >= v_th]
    u     = u_hat * (1 - s)        (hard reset to zero on spiking units)

The Heaviside derivative is replaced by a configurable surrogate in the
backward pass; the reset multiplies by (1 - s) with s detached, so
gradients flow straight through the retained-membrane path. A smooth
mode replaces the hard spike by a sigmoid everywhere, making the whole
network differentiable for finite-difference checks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, FormatError, NumericError

CKPT_MAGIC = b"TMKC"
CKPT_VERSION = 1


@dataclass
class LIFParams:
    tau: float = 0.5
    v_th: float = 0.5
    surrogate: str = "triangular"   # rectangular | triangular | sigmoid
    surrogate_width: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.tau <= 1.0):
            raise ConfigError(f"tau must be in [0,1], got {self.tau}")
        if self.v_th <= 0.0:
            raise ConfigError(f"v_th must be positive, got {self.v_th}")
        if self.surrogate_width <= 0.0:
            raise ConfigError(f"surrogate_width must be positive, got {self.surrogate_width}")
        if self.surrogate not in ("rectangular", "triangular", "sigmoid"):
            raise ConfigError(f"unknown surrogate {self.surrogate!r}")


def surrogate_grad(params: LIFParams, u_hat: torch.Tensor) -> torch.Tensor:
    """Surrogate for dH/du at pre-reset potential u_hat; integrates to ~1."""
    x = u_hat - params.v_th
    w = params.surrogate_width
    if params.surrogate == "rectangular":
        return (x.abs() < w / 2).to(u_hat.dtype) / w
    if params.surrogate == "triangular":
        return torch.clamp(1.0 - x.abs() / w, min=0.0) / w
    sig = torch.sigmoid(x / w)
    return sig * (1.0 - sig) / w


class _SpikeFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, u_hat, tau, v_th, surrogate, width):
        ctx.save_for_backward(u_hat)
        ctx.params = LIFParams(tau, v_th, surrogate, width)
        return (u_hat >= v_th).to(u_hat.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (u_hat,) = ctx.saved_tensors
        return grad_out * surrogate_grad(ctx.params, u_hat), None, None, None, None


def lif_step(params: LIFParams, prev_membrane, weighted_input, smooth: bool = False):
    """One LIF update; returns (new_membrane, spikes, pre_reset_potential)."""
    if not torch.isfinite(weighted_input).all():
        raise NumericError("non-finite input to lif_step")
    u_hat = params.tau * prev_membrane + weighted_input
    if smooth:
        s = torch.sigmoid((u_hat - params.v_th) / params.surrogate_width)
        u_new = u_hat * (1.0 - s)
    else:
        s = _SpikeFn.apply(u_hat, params.tau, params.v_th,
                           params.surrogate, params.surrogate_width)
        u_new = u_hat * (1.0 - s.detach())
    return u_new, s, u_hat


class SpikingNet(nn.Module):
    """Conv-Conv-Dense LIF stack with shared backbone and per-stream heads.

    The mixed and event streams share every parameter except the two
    class heads. The pre-reset membrane of the hidden dense LIF layer is
    the per-step feature used for alignment and the auxiliary heads.
    """

    def __init__(
        self,
        in_channels: int = 2,
        image_size: int = 24,
        num_classes: int = 5,
        conv_channels: tuple[int, int] = (16, 32),
        hidden: int = 64,
        params: LIFParams | None = None,
        smooth: bool = False,
        init_gain: float = 3.0,
    ):
        super().__init__()
        self.params = params or LIFParams()
        self.smooth = smooth
        self.num_classes = num_classes
        self.hidden = hidden
        c1, c2 = conv_channels
        self.conv1 = nn.Conv2d(in_channels, c1, 3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=1)
        if image_size % 4 != 0:
            raise ConfigError(f"image_size must be divisible by 4, got {image_size}")
        feat = c2 * (image_size // 4) ** 2
        self.fc = nn.Linear(feat, hidden)
        # sparse binary inputs leave default-init LIF layers almost silent;
        # scale backbone weights so spikes propagate at start of training
        with torch.no_grad():
            for m in (self.conv1, self.conv2, self.fc):
                m.weight.mul_(init_gain)
        self.head_mixed = nn.Linear(hidden, num_classes)
        self.head_event = nn.Linear(hidden, num_classes)

    def backbone_modules(self):
        return [self.conv1, self.conv2, self.fc]

    def forward(self, seq: torch.Tensor, head: str = "event"):
        """Run a (B, T, C, H, W) sequence; state starts at zero.

        Returns (logits (B,T,classes), features (B,T,hidden)) where the
        features are the pre-reset membrane potentials of the hidden
        dense LIF layer.
        """
        if seq.ndim != 5:
            raise ConfigError(f"expected (B,T,C,H,W) input, got shape {tuple(seq.shape)}")
        if head not in ("mixed", "event"):
            raise ConfigError(f"unknown head {head!r}")
        classifier = self.head_mixed if head == "mixed" else self.head_event
        B, T = seq.shape[:2]
        u1 = u2 = u3 = 0.0
        logits, feats = [], []
        for t in range(T):
            x = seq[:, t]
            u1, s1, _ = lif_step(self.params, u1, self.conv1(x), self.smooth)
            h = F.avg_pool2d(s1, 2)
            u2, s2, _ = lif_step(self.params, u2, self.conv2(h), self.smooth)
            h = F.avg_pool2d(s2, 2).flatten(1)
            u3, s3, v3 = lif_step(self.params, u3, self.fc(h), self.smooth)
            logits.append(classifier(s3))
            feats.append(v3)
        return torch.stack(logits, dim=1), torch.stack(feats, dim=1)


class AuxHeads(nn.Module):
    """One-layer sigmoid heads for per-frame source and mix-ratio readout."""

    def __init__(self, hidden: int):
        super().__init__()
        self.source = nn.Linear(hidden, 1)
        self.ratio = nn.Linear(hidden, 1)

    def forward(self, feats: torch.Tensor):
        # feats: (B, T, hidden) -> two (B, T) probability maps
        z_s = torch.sigmoid(self.source(feats)).squeeze(-1)
        z_m = torch.sigmoid(self.ratio(feats)).squeeze(-1)
        return z_s, z_m


def flatten_grads(modules) -> np.ndarray:
    """Concatenate .grad of all parameters (zeros where grad is None)."""
    chunks = []
    for m in modules:
        for p in m.parameters():
            g = p.grad
            chunks.append(np.zeros(p.numel(), dtype=np.float64) if g is None
                          else g.detach().double().reshape(-1).numpy())
    return np.concatenate(chunks)


# ---------------------------------------------------------------------------
# checkpoint format: magic "TMKC" | version u16 LE | header length u32 LE |
# JSON header | float32 LE payload, tensors concatenated in header order.
# ---------------------------------------------------------------------------

def save_checkpoint(path, module: nn.Module, extra: dict | None = None) -> None:
    names, payload = [], []
    for name, p in module.state_dict().items():
        arr = p.detach().cpu().numpy().astype("<f4")
        names.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        payload.append(arr.tobytes())
    header = json.dumps({"format_version": CKPT_VERSION,
                         "tensors": names,
                         "extra": extra or {}}).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(header)))
        fh.write(header)
        fh.write(b"".join(payload))


def load_checkpoint(path, module: nn.Module) -> dict:
    blob = Path(path).read_bytes()
    if len(blob) < 10 or blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic at offset 0)")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < 10 + hlen:
        raise FormatError(f"{path}: truncated header, need {10 + hlen} bytes, have {len(blob)}")
    try:
        header = json.loads(blob[10:10 + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt JSON header: {exc}") from exc
    offset = 10 + hlen
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = 4 * count
        if offset + nbytes > len(blob):
            raise FormatError(
                f"{path}: payload for {entry['name']} runs past end of file "
                f"(need {offset + nbytes} bytes, have {len(blob)})"
            )
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes after payload")
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)}")
    module.load_state_dict(state)
    return header.get("extra", {})
