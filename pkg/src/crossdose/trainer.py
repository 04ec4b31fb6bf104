"""Training protocol: SGD with momentum, polynomial LR decay, dose sampling.

The optimizer is stochastic gradient descent with momentum 0.9 and decoupled
weight decay 1e-4 (the decay shrinks parameters directly instead of entering
the gradient), stepped with a polynomially decaying learning rate

    lr(n) = lr_base * (1 - n / M_total)^gamma,   lr_base = 0.01, gamma = 0.85

where n counts optimizer steps and M_total is the full-run step count.

Dose regimes:

* ``all``      - mixed-dose training.  One epoch visits every stored low-dose
  training slice once in expectation (n_subjects * n_doses draws); the subject
  sequence is balanced per epoch while the dose of each draw is i.i.d. uniform
  over the six levels.  This sampler *is* the empirical expectation over
  heterogeneous noise distributions whose averaging behaviour the direct
  one-size-fits-all baseline exhibits.
* ``dose=<d>`` - one shuffled pass per epoch over the training subjects at a
  single dose level (the per-dose individual baseline).

Everything is deterministic: the epoch-e draw stream derives from (seed, e),
torch RNG only touches initialization, and checkpoints store parameters and
momentum buffers exactly, so an interrupted run resumed from epoch k is
bit-identical to an uninterrupted one on the same backend.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, MissingDataError, NumericError, ValidationError
from .loss import LossConfig, loss_terms
from .metrics import SsimParams
from .model import DenoiserNet, ModelSpec, build, encode_dose
from .raster import (
    DatasetManifest,
    lowdose_path,
    read_raster,
    read_tensor,
    reference_path,
    write_tensor,
)


def lr_at(n_iter: int, total: int, lr_base: float = 0.01, gamma: float = 0.85) -> float:
    """Polynomial decay lr_base * (1 - n/M)^gamma; strictly decreasing in n."""
    if total <= 0:
        raise ValidationError("total iteration count must be positive")
    if not 0 <= n_iter <= total:
        raise ValidationError(f"iteration {n_iter} outside [0, {total}]")
    if lr_base <= 0 or gamma <= 0:
        raise ValidationError("lr_base and gamma must be positive")
    return lr_base * (1.0 - n_iter / total) ** gamma


@dataclass(frozen=True)
class TrainConfig:
    lr_base: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 80
    batch_size: int = 16
    gamma: float = 0.85
    dose_regime: str = "all"  # "all" or "dose=<fraction>"
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if self.gamma <= 0 or self.lr_base <= 0:
            raise ValidationError("gamma and lr_base must be positive")
        regime_dose(self.dose_regime)  # syntax check


def regime_dose(regime: str) -> float | None:
    """None for mixed-dose training, else the single dose fraction."""
    if regime == "all":
        return None
    if regime.startswith("dose="):
        try:
            d = float(regime[5:])
        except ValueError as e:
            raise ValidationError(f"bad regime {regime!r}") from e
        if not 0 < d <= 1:
            raise ValidationError(f"regime dose {d} outside (0, 1]")
        return d
    raise ValidationError(f"unknown dose regime {regime!r}, expected 'all' or 'dose=<d>'")


def config_digest(spec: ModelSpec, cfg: TrainConfig) -> str:
    blob = f"{spec!r}|{cfg!r}".encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class SliceCache:
    """All slices of a dataset split, loaded once as float32 torch tensors."""

    def __init__(self, manifest: DatasetManifest, root, subjects):
        self.subjects = tuple(subjects)
        self.doses = tuple(manifest.dose_levels)
        if not self.subjects:
            raise ValidationError("empty subject list")
        self.reference = {}
        self.lowdose = {}
        for sid in self.subjects:
            self.reference[sid] = torch.from_numpy(read_raster(reference_path(root, sid)))
            for d in self.doses:
                self.lowdose[(sid, d)] = torch.from_numpy(read_raster(lowdose_path(root, sid, d)))

    def batch(self, items):
        x = torch.stack([self.lowdose[(sid, d)] for sid, d in items]).unsqueeze(1)
        y = torch.stack([self.reference[sid] for sid, _ in items]).unsqueeze(1)
        doses = torch.tensor([d for _, d in items], dtype=torch.float32)
        return x, y, doses


class EpochSampler:
    """Deterministic (seed, epoch) -> batch stream over (subject, dose) draws."""

    def __init__(self, manifest: DatasetManifest, regime: str, seed: int,
                 batch_size: int, subjects=None):
        self.subjects = tuple(subjects if subjects is not None else manifest.train_subjects)
        if not self.subjects:
            raise ValidationError("no training subjects in manifest")
        self.doses = tuple(manifest.dose_levels)
        self.single = regime_dose(regime)
        if self.single is not None:
            matches = [d for d in self.doses if abs(d - self.single) < 1e-9]
            if not matches:
                raise ValidationError(
                    f"regime dose {self.single} not in dataset dose levels {self.doses}")
            self.single = matches[0]
        self.seed = seed
        self.batch_size = batch_size

    @property
    def items_per_epoch(self) -> int:
        if self.single is not None:
            return len(self.subjects)
        return len(self.subjects) * len(self.doses)

    @property
    def steps_per_epoch(self) -> int:
        return -(-self.items_per_epoch // self.batch_size)

    def items(self, epoch: int) -> list[tuple[str, float]]:
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, epoch, 0x5A)))
        n = len(self.subjects)
        if self.single is not None:
            order = rng.permutation(n)
            return [(self.subjects[i], self.single) for i in order]
        order = np.concatenate([rng.permutation(n) for _ in self.doses])
        dose_idx = rng.integers(0, len(self.doses), size=order.size)
        return [(self.subjects[i], self.doses[j]) for i, j in zip(order, dose_idx)]

    def batches(self, epoch: int):
        items = self.items(epoch)
        b = self.batch_size
        return [items[k : k + b] for k in range(0, len(items), b)]


def _forward(model: DenoiserNet, x: torch.Tensor, doses: torch.Tensor) -> torch.Tensor:
    if model.spec.variant == "dose_embedded":
        enc = torch.tensor([encode_dose(float(d)) for d in doses], dtype=x.dtype)
        return model(x, dose=enc)
    return model(x)


def sgd_step(named_params, momentum_bufs, lr: float, momentum: float, weight_decay: float):
    """One decoupled-weight-decay SGD update, in place:

        buf <- momentum * buf + grad
        p   <- p - lr * buf - lr * weight_decay * p
    """
    with torch.no_grad():
        for name, p in named_params:
            if p.grad is None:
                continue
            buf = momentum_bufs[name]
            buf.mul_(momentum).add_(p.grad)
            p.mul_(1.0 - lr * weight_decay).add_(buf, alpha=-lr)
            p.grad = None


@dataclass
class TraceRow:
    epoch: int
    mean_total: float
    mean_mae: float
    mean_ssim_loss: float
    lr: float


def write_trace(rows: list[TraceRow], path) -> None:
    with open(path, "w") as f:
        f.write("epoch,mean_total,mean_mae,mean_ssim_loss,lr\n")
        for r in rows:
            f.write(f"{r.epoch},{r.mean_total:.8e},{r.mean_mae:.8e},"
                    f"{r.mean_ssim_loss:.8e},{r.lr:.8e}\n")


@dataclass
class TrainResult:
    model: DenoiserNet
    trace: list[TraceRow]
    checkpoint_dir: Path | None  # final checkpoint, when out_dir was given


def train(
    model_spec: ModelSpec,
    cfg: TrainConfig,
    manifest: DatasetManifest,
    root,
    out_dir=None,
    resume_from=None,
) -> TrainResult:
    """Run the full protocol and return the trained model plus its loss trace.

    ``out_dir`` enables per-epoch checkpoints (``epoch_NNN/``) plus a ``final``
    checkpoint and ``trace.csv``.  ``resume_from`` restarts from a checkpoint
    directory produced with the same model spec and config.
    """
    cache = SliceCache(manifest, root, manifest.train_subjects)
    sampler = EpochSampler(manifest, cfg.dose_regime, cfg.seed, cfg.batch_size)
    total_steps = cfg.epochs * sampler.steps_per_epoch

    model = build(model_spec, cfg.seed)
    bufs = {name: torch.zeros_like(p) for name, p in model.named_parameters()}
    start_epoch = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.digest != config_digest(model_spec, cfg):
            raise ValidationError(
                "checkpoint was produced by a different model spec / train config")
        restore_into(model, bufs, ckpt)
        start_epoch = ckpt.epoch

    model.train()
    trace: list[TraceRow] = []
    step = start_epoch * sampler.steps_per_epoch
    for epoch in range(start_epoch, cfg.epochs):
        sums = {"total": 0.0, "mae": 0.0, "ssim_loss": 0.0}
        n_steps = 0
        lr = cfg.lr_base
        for items in sampler.batches(epoch):
            x, y, doses = cache.batch(items)
            lr = lr_at(step, total_steps, cfg.lr_base, cfg.gamma)
            terms = loss_terms(_forward(model, x, doses), y, cfg.loss)
            total = terms["total"]
            if not torch.isfinite(total):
                raise NumericError(
                    f"non-finite loss at step {step}: lr={lr:.3e}, "
                    f"mae={float(terms['mae']):.3e}, ssim_loss={float(terms['ssim_loss']):.3e}")
            total.backward()
            sgd_step(model.named_parameters(), bufs, lr, cfg.momentum, cfg.weight_decay)
            for k in sums:
                sums[k] += float(terms[k])
            n_steps += 1
            step += 1
        trace.append(TraceRow(epoch + 1, sums["total"] / n_steps, sums["mae"] / n_steps,
                              sums["ssim_loss"] / n_steps, lr))
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / f"epoch_{epoch + 1:03d}",
                            model, bufs, model_spec, cfg, epoch + 1)

    final_dir = None
    if out_dir is not None:
        final_dir = Path(out_dir) / "final"
        save_checkpoint(final_dir, model, bufs, model_spec, cfg, cfg.epochs)
        write_trace(trace, Path(out_dir) / "trace.csv")
    return TrainResult(model=model, trace=trace, checkpoint_dir=final_dir)


# --- checkpoint container -------------------------------------------------
#
# A checkpoint is a directory:
#   meta.txt            model spec, train config, epoch, config digest
#   params/<name>.ptn   every state_dict entry (parameters and buffers)
#   momentum/<name>.ptn optimizer momentum buffers
#
# Integer buffers (BatchNorm's num_batches_tracked) are stored as float32 and
# cast back on load; their values stay far below float32's exact-integer range.


@dataclass
class Checkpoint:
    model_spec: ModelSpec
    train_cfg: TrainConfig
    epoch: int
    digest: str
    state: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]


def save_checkpoint(path, model: DenoiserNet, momentum_bufs, spec: ModelSpec,
                    cfg: TrainConfig, epoch: int) -> None:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    (path / "momentum").mkdir(parents=True, exist_ok=True)
    cp = configparser.ConfigParser()
    cp["model"] = {
        "variant": spec.variant,
        "depth": str(spec.depth),
        "base_channels": str(spec.base_channels),
        "internal_leaky_slope": repr(spec.internal_leaky_slope),
        "head_leaky_slope": repr(spec.head_leaky_slope),
        "batch_norm": str(spec.batch_norm),
    }
    cp["train"] = {
        "lr_base": repr(cfg.lr_base),
        "momentum": repr(cfg.momentum),
        "weight_decay": repr(cfg.weight_decay),
        "epochs": str(cfg.epochs),
        "batch_size": str(cfg.batch_size),
        "gamma": repr(cfg.gamma),
        "dose_regime": cfg.dose_regime,
        "seed": str(cfg.seed),
    }
    cp["loss"] = {
        "ssim_weight": repr(cfg.loss.ssim_weight),
        "window_size": str(cfg.loss.ssim.window_size),
        "k1": repr(cfg.loss.ssim.k1),
        "k2": repr(cfg.loss.ssim.k2),
        "dynamic_range": repr(cfg.loss.ssim.dynamic_range),
        "gaussian": str(cfg.loss.ssim.gaussian),
    }
    cp["state"] = {
        "epoch": str(epoch),
        "config_digest": config_digest(spec, cfg),
        "torch_rng": torch.get_rng_state().numpy().tobytes().hex(),
    }
    with open(path / "meta.txt", "w") as f:
        cp.write(f)
    for name, tensor in model.state_dict().items():
        write_tensor(path / "params" / f"{name}.ptn", tensor.detach().cpu().numpy())
    for name, tensor in momentum_bufs.items():
        write_tensor(path / "momentum" / f"{name}.ptn", tensor.detach().cpu().numpy())


def _bool(s: str) -> bool:
    return s.strip().lower() in ("true", "1", "yes")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    meta = path / "meta.txt"
    if not meta.exists():
        raise MissingDataError(f"checkpoint meta not found: {meta}")
    cp = configparser.ConfigParser()
    try:
        cp.read(meta)
        m, t, lo, st = cp["model"], cp["train"], cp["loss"], cp["state"]
        spec = ModelSpec(
            variant=m["variant"],
            depth=int(m["depth"]),
            base_channels=int(m["base_channels"]),
            internal_leaky_slope=float(m["internal_leaky_slope"]),
            head_leaky_slope=float(m["head_leaky_slope"]),
            batch_norm=_bool(m["batch_norm"]),
        )
        cfg = TrainConfig(
            lr_base=float(t["lr_base"]),
            momentum=float(t["momentum"]),
            weight_decay=float(t["weight_decay"]),
            epochs=int(t["epochs"]),
            batch_size=int(t["batch_size"]),
            gamma=float(t["gamma"]),
            dose_regime=t["dose_regime"],
            seed=int(t["seed"]),
            loss=LossConfig(
                ssim_weight=float(lo["ssim_weight"]),
                ssim=SsimParams(
                    window_size=int(lo["window_size"]),
                    k1=float(lo["k1"]),
                    k2=float(lo["k2"]),
                    dynamic_range=float(lo["dynamic_range"]),
                    gaussian=_bool(lo["gaussian"]),
                ),
            ),
        )
        epoch = int(st["epoch"])
        digest = st["config_digest"]
    except (KeyError, configparser.Error, ValueError) as e:
        raise FormatError(f"{meta}: malformed checkpoint meta ({e})") from e
    state = {p.stem: read_tensor(p) for p in sorted((path / "params").glob("*.ptn"))}
    momentum = {p.stem: read_tensor(p) for p in sorted((path / "momentum").glob("*.ptn"))}
    if not state:
        raise FormatError(f"{path}: checkpoint has no parameter blobs")
    return Checkpoint(spec, cfg, epoch, digest, state, momentum)


def restore_into(model: DenoiserNet, momentum_bufs, ckpt: Checkpoint) -> None:
    sd = model.state_dict()
    if set(sd) != set(ckpt.state):
        missing = set(sd) ^ set(ckpt.state)
        raise FormatError(f"checkpoint parameter names do not match the model: {sorted(missing)}")
    with torch.no_grad():
        for name, tensor in sd.items():
            arr = torch.from_numpy(ckpt.state[name].copy())
            tensor.copy_(arr.to(tensor.dtype).reshape(tensor.shape))
        for name, buf in momentum_bufs.items():
            buf.copy_(torch.from_numpy(ckpt.momentum[name].copy()).reshape(buf.shape))


def model_from_checkpoint(ckpt: Checkpoint) -> DenoiserNet:
    model = build(ckpt.model_spec, ckpt.train_cfg.seed)
    bufs = {name: torch.zeros_like(p) for name, p in model.named_parameters()}
    restore_into(model, bufs, ckpt)
    return model


def denoise(source, x: np.ndarray, dose: float | None = None,
            allow_pad: bool = True) -> np.ndarray:
    """Full-image inference at batch size 1.

    ``source`` is a model, a Checkpoint, or a checkpoint directory.  Images
    whose sides are not divisible by 2^(depth-1) are reflect-padded and cropped
    back, unless ``allow_pad`` is False, in which case that is an error.
    """
    if isinstance(source, DenoiserNet):
        model = source
    elif isinstance(source, Checkpoint):
        model = model_from_checkpoint(source)
    else:
        model = model_from_checkpoint(load_checkpoint(source))
    spec = model.spec
    if spec.variant == "dose_embedded":
        if dose is None:
            raise ValidationError("dose_embedded checkpoint requires a dose argument")
        dose_arg: float | None = encode_dose(dose)
    else:
        if dose is not None:
            raise ValidationError(f"{spec.variant} checkpoint takes no dose argument")
        dose_arg = None
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise ValidationError(f"expected a 2-D image, got shape {arr.shape}")
    h, w = arr.shape
    mult = 2 ** (spec.depth - 1)
    ph = (-h) % mult
    pw = (-w) % mult
    if (ph or pw) and not allow_pad:
        raise ValidationError(f"image {h}x{w} not divisible by {mult} and padding is disabled")
    t = torch.from_numpy(arr).unsqueeze(0).unsqueeze(0)
    if ph or pw:
        t = torch.nn.functional.pad(t, (0, pw, 0, ph), mode="reflect")
    model.eval()
    with torch.no_grad():
        out = model(t) if dose_arg is None else model(t, dose=dose_arg)
    return out[0, 0, :h, :w].numpy().astype(np.float32)
