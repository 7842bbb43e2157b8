"""Two-stream training loop: mixed stream and event stream through a shared
backbone with separate class heads, plus empirical gradient-variance
measurement at a frozen parameter snapshot."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import losses, mixing, network
from .data import load_dataset
from .errors import ConfigError, DomainError
from .mixing import Layout, MixMode, MixSpec, Schedule

METRICS_SCHEMA_VERSION = 1


@dataclass
class RunConfig:
    train_manifest: str
    eval_manifest: str
    timesteps: int = 8
    r_m: float = 0.4
    mode: str = "unconditional"
    schedule: str = "probabilistic"
    layout: str = "r2d"
    lam: float = 0.5
    epochs: int = 30
    batch_size: int = 20
    lr: float = 2e-3
    seed: int = 0
    baseline: bool = False          # batch mixing instead of time-step mixup
    deterministic: bool = True
    conv_channels: tuple = (16, 32)
    hidden: int = 64
    tau: float = 0.5
    v_th: float = 1.0
    surrogate: str = "triangular"
    surrogate_width: float = 1.0
    metrics_path: str | None = None
    checkpoint_path: str | None = None
    gradvar_batches: int = 0        # per-epoch variance probe, 0 = off

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2 (class pairing needs partners)")
        MixMode(self.mode)
        Schedule(self.schedule)
        Layout(self.layout)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**payload)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d


class PairedArrays:
    """In-memory paired dataset with class-balanced batch iteration."""

    def __init__(self, manifest_path):
        static, event, labels, manifest = load_dataset(manifest_path)
        self.static = static
        self.event = event
        self.labels = labels
        self.manifest = manifest
        self.num_classes = len(manifest["classes"])
        self.by_class = [np.flatnonzero(labels == c) for c in range(self.num_classes)]
        for c, idx in enumerate(self.by_class):
            if idx.size == 0:
                raise ConfigError(f"class {c} has no samples")

    def batches(self, batch_size: int, rng: np.random.Generator):
        """Yield class-balanced index batches covering the dataset once."""
        per_class = max(1, batch_size // self.num_classes)
        perms = [rng.permutation(idx) for idx in self.by_class]
        n_batches = min(len(p) for p in perms) // per_class
        for b in range(n_batches):
            chunk = [p[b * per_class:(b + 1) * per_class] for p in perms]
            yield np.concatenate(chunk)

    def random_batch(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        per_class = max(1, batch_size // self.num_classes)
        return np.concatenate([
            rng.choice(idx, size=per_class, replace=True) for idx in self.by_class
        ])


def _build_mixed_batch(ds, idx, spec, cfg, batch_index, batches_per_epoch, epoch, rng):
    """Mix each selected sample; returns (frames, modality labels, ratio targets)."""
    frames, labels_t, ratios = [], [], []
    for i in idx:
        if cfg.baseline:
            # batch mixing: the whole sample is event with probability r_m
            all_event = rng.random() < cfg.r_m
            mask = np.full(spec.timesteps, all_event, dtype=bool)
        else:
            mask = mixing.schedule_event_mask(
                spec, batch_index, batches_per_epoch, epoch, cfg.epochs, rng
            )
        mod = (~mask).astype(np.float32)
        frames.append(np.where(mask[:, None, None, None], ds.event[i], ds.static[i]))
        labels_t.append(mod)
        ratios.append(mod.mean())
    return (
        torch.from_numpy(np.stack(frames)),
        torch.from_numpy(np.stack(labels_t)),
        torch.tensor(ratios, dtype=torch.float32),
    )


def _pair_event_partners(ds, idx, rng) -> np.ndarray:
    """For each sample pick a uniformly random same-class event partner."""
    partners = np.empty(len(idx), dtype=np.int64)
    for k, i in enumerate(idx):
        pool = ds.by_class[ds.labels[i]]
        partners[k] = rng.choice(pool)
    return partners


def evaluate(net: network.SpikingNet, ds: PairedArrays, batch_size: int = 50) -> float:
    """Event-only accuracy through the event-stream head (mean logits over T)."""
    net.eval()
    correct = 0
    with torch.no_grad():
        for lo in range(0, len(ds.labels), batch_size):
            seq = torch.from_numpy(ds.event[lo:lo + batch_size])
            logits, _ = net(seq, head="event")
            pred = logits.mean(dim=1).argmax(dim=1).numpy()
            correct += int((pred == ds.labels[lo:lo + batch_size]).sum())
    net.train()
    return correct / len(ds.labels)


def train(cfg: RunConfig, log=print):
    """Full training run; returns (net, list of metric records)."""
    if cfg.deterministic:
        torch.manual_seed(cfg.seed)
        torch.use_deterministic_algorithms(True)
    else:
        torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    train_ds = PairedArrays(cfg.train_manifest)
    eval_ds = PairedArrays(cfg.eval_manifest)
    T = train_ds.manifest["timesteps"]
    if T != cfg.timesteps:
        raise ConfigError(f"config timesteps {cfg.timesteps} != dataset timesteps {T}")
    if (eval_ds.static[0].shape != train_ds.static[0].shape
            or eval_ds.num_classes != train_ds.num_classes):
        raise ConfigError("train and eval datasets disagree on shape or classes")

    spec = MixSpec(timesteps=T, r_m=cfg.r_m, mode=cfg.mode,
                   schedule=cfg.schedule, layout=cfg.layout)
    params = network.LIFParams(cfg.tau, cfg.v_th, cfg.surrogate, cfg.surrogate_width)
    net = network.SpikingNet(
        in_channels=2,
        image_size=train_ds.manifest["image_size"],
        num_classes=train_ds.num_classes,
        conv_channels=tuple(cfg.conv_channels),
        hidden=cfg.hidden,
        params=params,
    )
    aux = network.AuxHeads(cfg.hidden)
    gate = losses.AlignmentGate(T)
    opt = torch.optim.Adam(
        list(net.parameters()) + list(aux.parameters()) + list(gate.parameters()),
        lr=cfg.lr,
    )

    records = []
    batches_per_epoch = max(1, min(len(i) for i in train_ds.by_class)
                            * train_ds.num_classes // cfg.batch_size)
    for epoch in range(cfg.epochs):
        tic = time.time()
        skipped_cka = 0
        breakdown = None
        for b, idx in enumerate(train_ds.batches(cfg.batch_size, rng)):
            mixed, mod_labels, ratio_targets = _build_mixed_batch(
                train_ds, idx, spec, cfg, b, batches_per_epoch, epoch, rng
            )
            partners = _pair_event_partners(train_ds, idx, rng)
            event_seq = torch.from_numpy(train_ds.event[partners])
            labels = torch.from_numpy(train_ds.labels[idx])

            logits_m, v_m = net(mixed, head="mixed")
            logits_e, v_e = net(event_seq, head="event")

            cls_m = losses.tet_loss(logits_m, labels)
            cls_e_steps = losses.per_step_ce(logits_e, labels)
            da_terms, skipped = losses.da_per_step(v_m, v_e)
            skipped_cka += skipped
            rda = losses.rda_loss(da_terms, cls_e_steps, gate)
            z_s, z_m = aux(v_m)
            mag = losses.mag_loss(z_s, mod_labels)
            mrp = losses.mrp_loss(z_m, ratio_targets)

            valid = [t.item() for t in da_terms if t is not None]
            da_mean = float(np.mean(valid)) if valid else None
            total, breakdown = losses.total_loss(
                cls_m, rda, mag, mrp, cfg.lam,
                da=da_mean, cls_e=cls_e_steps.mean().item(),
            )
            opt.zero_grad()
            total.backward()
            opt.step()

        record = {
            "schema_version": METRICS_SCHEMA_VERSION,
            "epoch": epoch,
            "eval_acc": evaluate(net, eval_ds),
            "train_acc": evaluate(net, train_ds),
            "mean_gate": gate.gates().mean().item(),
            "skipped_cka_steps": skipped_cka,
            "gradvar_trace": None,
            "wall_seconds": time.time() - tic,
            **(breakdown.to_dict() if breakdown else {}),
        }
        if cfg.gradvar_batches >= 2:
            strategy = "bm" if cfg.baseline else "tsm"
            record["gradvar_trace"] = measure_gradient_variance(
                net, train_ds, cfg, strategy, cfg.gradvar_batches, cfg.seed + 7919
            )["trace"]
        records.append(record)
        log(f"epoch {epoch}: eval_acc={record['eval_acc']:.3f} "
            f"total={record.get('total', float('nan')):.4f}")

    if cfg.metrics_path:
        with open(cfg.metrics_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    if cfg.checkpoint_path:
        network.save_checkpoint(cfg.checkpoint_path, net,
                                extra={"config": cfg.to_dict()})
    return net, records


def measure_gradient_variance(
    net: network.SpikingNet,
    ds: PairedArrays,
    cfg: RunConfig,
    strategy: str,
    num_batches: int,
    seed: int,
    alpha: float | None = None,
) -> dict:
    """Trace of the sample covariance of per-batch classification gradients.

    Parameters stay frozen; each batch is drawn independently and mixed
    per the strategy: "tsm" uses the fixed (1-alpha)/alpha frame split
    the covariance analysis assumes, "bm" assigns whole samples to one
    modality with probability alpha. Gradients are taken through the
    shared backbone and the mixed-stream head.
    """
    if num_batches < 2:
        raise DomainError("need at least 2 batches to estimate a covariance")
    g = collect_batch_gradients(net, ds, cfg, strategy, num_batches, seed, alpha)
    centered = g - g.mean(axis=0)
    trace = float((centered ** 2).sum() / (num_batches - 1))
    a = cfg.r_m if alpha is None else alpha
    return {"strategy": strategy, "alpha": a, "num_batches": num_batches, "trace": trace}


def collect_batch_gradients(
    net: network.SpikingNet,
    ds: PairedArrays,
    cfg: RunConfig,
    strategy: str,
    num_batches: int,
    seed: int,
    alpha: float | None = None,
) -> np.ndarray:
    """Flattened per-batch gradients at the frozen snapshot, (num_batches, P)."""
    if strategy not in ("tsm", "bm"):
        raise ConfigError(f"strategy must be 'tsm' or 'bm', got {strategy!r}")
    a = cfg.r_m if alpha is None else alpha
    T = ds.manifest["timesteps"]
    n_e = int(round(a * T))
    rng = np.random.default_rng(seed)
    modules = net.backbone_modules() + [net.head_mixed]

    grads = []
    for _ in range(num_batches):
        idx = ds.random_batch(cfg.batch_size, rng)
        if strategy == "tsm":
            mask = np.zeros(T, dtype=bool)
            if n_e > 0:
                mask[T - n_e:] = True
            masks = np.broadcast_to(mask, (len(idx), T))
        else:
            masks = np.broadcast_to((rng.random(len(idx)) < a)[:, None], (len(idx), T))
        frames = np.where(masks[:, :, None, None, None], ds.event[idx], ds.static[idx])
        seq = torch.from_numpy(frames.astype(np.float32))
        labels = torch.from_numpy(ds.labels[idx])
        net.zero_grad()
        loss = losses.tet_loss(net(seq, head="mixed")[0], labels)
        loss.backward()
        grads.append(network.flatten_grads(modules))
    net.zero_grad()
    return np.stack(grads)


def bootstrap_trace_ci(grads_a: np.ndarray, grads_b: np.ndarray,
                       n_boot: int = 1000, seed: int = 0, level: float = 0.95):
    """Percentile CI for trace(cov(grads_a)) - trace(cov(grads_b))."""
    rng = np.random.default_rng(seed)

    def trace_of(g, idx):
        sel = g[idx]
        c = sel - sel.mean(axis=0)
        return (c ** 2).sum() / (len(idx) - 1)

    n_a, n_b = len(grads_a), len(grads_b)
    diffs = np.empty(n_boot)
    for k in range(n_boot):
        ia = rng.integers(0, n_a, n_a)
        ib = rng.integers(0, n_b, n_b)
        diffs[k] = trace_of(grads_a, ia) - trace_of(grads_b, ib)
    tail = (1.0 - level) / 2.0
    return float(np.quantile(diffs, tail)), float(np.quantile(diffs, 1.0 - tail))
