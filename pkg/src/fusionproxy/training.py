"""Training loop over cached supervision, plus the sweep harnesses.

Each step samples a batch of pairs (uniform with replacement), crops inputs
and their cached statistics together, optionally warps only the infrared
input by a random affine perturbation, and applies one optimizer update of
the batch-mean loss. Statistics always come from the cache of the aligned
pair; nothing is recomputed on perturbed inputs.

Single-threaded torch plus one numpy generator for every random choice makes
runs bit-reproducible and resumable: the full state file carries model and
optimizer tensors along with the generator state.
"""

from __future__ import annotations

import json
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import fpx
from .cache import CachedPair, list_pairs, load_manifest, load_norms, load_pair
from .images import AffinePerturbation, PerturbationSpec, apply_affine, sample_perturbation
from .losses import LossBreakdown, LossWeights, total_loss
from .metrics import evaluate_pair, ssim_value
from .panel import (
    FeatureStats,
    PanelNormStats,
    panel_hash,
    routing_entropy,
    routing_weights,
)
from .student import FusionStudent, build_student, save_checkpoint
from .teachers import EnsembleStats

STATE_FORMAT = "FPX1"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 160
    batch_size: int = 8
    crop: int = 256
    tau: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    misalign: PerturbationSpec = field(default_factory=PerturbationSpec)
    variant: str = "default"
    seed: int = 0
    lr: float = 1e-4
    lr_final: float = 1e-6
    warmup_steps: int = 0
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    max_steps: int | None = None
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.crop < 16 or self.crop % 16:
            raise ValueError(f"crop must be a positive multiple of 16, got {self.crop}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be nonnegative")
        if self.lr <= 0 or self.lr_final < 0:
            raise ValueError("learning rates must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1 when given")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        d["misalign"] = asdict(self.misalign)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        d["misalign"] = PerturbationSpec(**d["misalign"])
        return TrainConfig(**d)


@dataclass(frozen=True)
class TrainLogRecord:
    step: int
    epoch: int
    pixel: float
    mfm: float
    ssim: float
    total: float
    lr: float
    step_ms: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StepProbe:
    """Snapshot of what actually entered the model and the loss on one batch
    element; used to verify the misalignment contract."""

    pair_id: str
    perturbation: AffinePerturbation
    crop: tuple[int, int, int]
    ir_input: np.ndarray
    vis_input: np.ndarray
    ensemble: EnsembleStats
    feats: FeatureStats


def crop_supervision(
    pair: CachedPair, r0: int, c0: int, size: int, grid: int
) -> tuple[np.ndarray, np.ndarray, EnsembleStats, FeatureStats]:
    """Crop inputs and their cached statistics together.

    A full-frame crop returns the cached statistics objects untouched (byte
    identical). Real crops slice the pixel fields, renormalize the sliced
    pixel weights, and slice the matching span of feature-grid cells.
    """
    h, w = pair.ir.shape
    if r0 < 0 or c0 < 0 or size < 1 or r0 + size > h or c0 + size > w:
        raise ValueError(
            f"crop ({r0}, {c0}, {size}) exceeds pair {pair.pair_id!r} extent {h}x{w}"
        )
    if r0 == 0 and c0 == 0 and size == h and size == w:
        return pair.ir, pair.vis, pair.ensemble, pair.feats
    ir = pair.ir[r0 : r0 + size, c0 : c0 + size]
    vis = pair.vis[r0 : r0 + size, c0 : c0 + size]
    e = pair.ensemble
    w_slice = e.pixel_weights[r0 : r0 + size, c0 : c0 + size]
    ensemble = EnsembleStats(
        pair_id=e.pair_id,
        mean=e.mean[r0 : r0 + size, c0 : c0 + size],
        pixel_var=e.pixel_var[r0 : r0 + size, c0 : c0 + size],
        pixel_weights=w_slice / w_slice.sum(),
    )
    gr0 = round(r0 * grid / h)
    gr1 = max(gr0 + 1, round((r0 + size) * grid / h))
    gc0 = round(c0 * grid / w)
    gc1 = max(gc0 + 1, round((c0 + size) * grid / w))
    f = pair.feats
    feats = FeatureStats(
        pair_id=f.pair_id,
        targets=tuple(t[gr0:gr1, gc0:gc1] for t in f.targets),
        var=f.var[:, gr0:gr1, gc0:gc1],
        routing=f.routing[:, gr0:gr1, gc0:gc1],
    )
    return ir, vis, ensemble, feats


class Trainer:
    """Seeded training over one statistics cache.

    ``probe`` (if given) is called with a StepProbe for every batch element
    before the forward pass; ``on_record`` is called after every step.
    """

    def __init__(
        self,
        cache_root: str | Path,
        config: TrainConfig = TrainConfig(),
        out_dir: str | Path | None = None,
        probe: Callable[[StepProbe], None] | None = None,
        on_record: Callable[[TrainLogRecord], None] | None = None,
        log: Callable[[str], None] | None = None,
    ):
        torch.set_num_threads(1)
        self.cache_root = Path(cache_root)
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.probe = probe
        self.on_record = on_record
        self.say = log if log is not None else (lambda msg: None)

        self.manifest = load_manifest(self.cache_root)
        try:
            self.panel, self.norms, cache_tau = load_norms(self.cache_root)
        except FileNotFoundError as exc:
            raise FileNotFoundError(
                f"{exc}; the cache has no normalization stats - run the cache build first"
            ) from exc
        self.pairs = [
            load_pair(self.cache_root, pid, self.manifest) for pid in list_pairs(self.manifest)
        ]
        if not self.pairs:
            raise ValueError(f"cache at {self.cache_root} holds no pairs")
        if config.tau != cache_tau:
            self.say(
                f"requested tau {config.tau} differs from cached {cache_tau}; "
                "re-deriving routing from cached feature variances"
            )
            self.pairs = [
                replace(
                    p,
                    feats=replace(
                        p.feats,
                        routing=routing_weights(p.feats.var, self.norms, tau=config.tau),
                    ),
                )
                for p in self.pairs
            ]
        self.panel_hash_start = panel_hash(self.panel)
        self.student = build_student(config.variant, seed=config.seed)
        self.optimizer = torch.optim.AdamW(
            self.student.parameters(),
            lr=config.lr,
            weight_decay=config.weight_decay,
            foreach=False,
        )
        self.rng = np.random.default_rng(config.seed)
        self.global_step = 0
        self.records: list[TrainLogRecord] = []
        self._log_file = None

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.pairs) / self.config.batch_size)

    @property
    def total_steps(self) -> int:
        if self.config.max_steps is not None:
            return self.config.max_steps
        return self.config.epochs * self.steps_per_epoch

    def _lr_at(self, step: int) -> float:
        cfg = self.config
        if step < cfg.warmup_steps:
            return cfg.lr * (step + 1) / cfg.warmup_steps
        total = max(self.total_steps - cfg.warmup_steps, 1)
        t = min(step - cfg.warmup_steps, total - 1) / max(total - 1, 1)
        return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + math.cos(math.pi * t))

    def _choose_crop(self, pair: CachedPair) -> tuple[int, int, int]:
        h, w = pair.ir.shape
        size = min(self.config.crop, h, w)
        size -= size % 16
        if size < 16:
            raise ValueError(f"pair {pair.pair_id!r} too small to crop ({h}x{w})")
        grid = self.norms.grid

        def offset(dim: int) -> int:
            span = dim - size
            if span == 0:
                return 0
            if dim % grid == 0:
                pitch = dim // grid
                return int(self.rng.integers(0, span // pitch + 1)) * pitch
            return int(self.rng.integers(0, span + 1))

        return offset(h), offset(w), size

    def step(self) -> TrainLogRecord:
        t0 = time.perf_counter()
        cfg = self.config
        lr = self._lr_at(self.global_step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        idxs = self.rng.integers(0, len(self.pairs), size=cfg.batch_size)
        items = []
        for i in idxs:
            pair = self.pairs[int(i)]
            r0, c0, size = self._choose_crop(pair)
            ir, vis, ensemble, feats = crop_supervision(pair, r0, c0, size, self.norms.grid)
            pert = sample_perturbation(self.rng, cfg.misalign)
            ir_in = ir if pert.is_identity() else apply_affine(ir, pert)
            if self.probe is not None:
                self.probe(
                    StepProbe(
                        pair_id=pair.pair_id,
                        perturbation=pert,
                        crop=(r0, c0, size),
                        ir_input=ir_in,
                        vis_input=vis,
                        ensemble=ensemble,
                        feats=feats,
                    )
                )
            items.append((pair.pair_id, ir_in, vis, ensemble, feats))

        size = items[0][1].shape[0]
        batched = all(it[1].shape == (size, size) for it in items)
        if batched:
            ir_t = torch.from_numpy(np.stack([it[1] for it in items]))[:, None]
            vis_t = torch.from_numpy(np.stack([it[2] for it in items])).permute(0, 3, 1, 2)
            preds = self.student(ir_t, vis_t).permute(0, 2, 3, 1)
        else:
            preds = None

        losses = []
        sums = {"pixel": 0.0, "mfm": 0.0, "ssim": 0.0, "total": 0.0}
        bad = []
        for j, (pid, ir_in, vis, ensemble, feats) in enumerate(items):
            if batched:
                pred = preds[j]
            else:
                ir_t = torch.from_numpy(ir_in)[None, None]
                vis_t = torch.from_numpy(vis).permute(2, 0, 1)[None]
                pred = self.student(ir_t, vis_t)[0].permute(1, 2, 0)
            loss, bd = total_loss(pred, ensemble, feats, self.panel, self.norms, cfg.weights)
            if not math.isfinite(bd.total):
                bad.append(pid)
            losses.append(loss)
            for key in sums:
                sums[key] += getattr(bd, key)
        if bad:
            raise RuntimeError(f"non-finite loss on pairs {sorted(set(bad))} at step {self.global_step}")

        batch_loss = torch.stack(losses).mean()
        if not cfg.weights.all_zero():
            self.optimizer.zero_grad(set_to_none=True)
            batch_loss.backward()
            if cfg.clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(self.student.parameters(), cfg.clip_norm)
            self.optimizer.step()

        self.global_step += 1
        n = len(items)
        record = TrainLogRecord(
            step=self.global_step,
            epoch=(self.global_step - 1) // self.steps_per_epoch,
            pixel=sums["pixel"] / n,
            mfm=sums["mfm"] / n,
            ssim=sums["ssim"] / n,
            total=sums["total"] / n,
            lr=lr,
            step_ms=(time.perf_counter() - t0) * 1000.0,
        )
        self.records.append(record)
        self._emit(record)
        return record

    def _emit(self, record: TrainLogRecord) -> None:
        if self.out_dir is not None:
            if self._log_file is None:
                self.out_dir.mkdir(parents=True, exist_ok=True)
                self._log_file = open(self.out_dir / "train_log.ndjson", "a")
            self._log_file.write(json.dumps(record.as_dict()) + "\n")
            self._log_file.flush()
        if self.on_record is not None:
            self.on_record(record)

    def train(self) -> list[TrainLogRecord]:
        """Run to the configured step budget, checkpointing per epoch."""
        cfg = self.config
        while self.global_step < self.total_steps:
            record = self.step()
            end_of_epoch = self.global_step % self.steps_per_epoch == 0
            if (
                self.out_dir is not None
                and end_of_epoch
                and (record.epoch + 1) % cfg.checkpoint_every == 0
            ):
                self.save(self.out_dir / "student.fpz")
                self.save_state(self.out_dir / "train_state.fpz")
        if self.out_dir is not None:
            self.save(self.out_dir / "student.fpz")
            self.save_state(self.out_dir / "train_state.fpz")
        if panel_hash(self.panel) != self.panel_hash_start:
            raise RuntimeError("frozen panel parameters changed during training")
        return self.records

    def save(self, path: str | Path) -> None:
        save_checkpoint(
            self.student,
            path,
            extra={"config": self.config.as_dict(), "step": self.global_step},
        )

    def save_state(self, path: str | Path) -> None:
        """Full resumable state: model, optimizer, RNG, step counter."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        opt_sd = self.optimizer.state_dict()
        descriptor = {
            "format": STATE_FORMAT,
            "kind": "train_state",
            "config": self.config.as_dict(),
            "step": self.global_step,
            "rng_state": self.rng.bit_generator.state,
            "param_groups": opt_sd["param_groups"],
            "model_tensors": {},
            "opt_tensors": {},
            "opt_scalars": {},
        }
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            for i, (key, tensor) in enumerate(self.student.state_dict().items()):
                fname = f"model/{i:04d}.fpx"
                descriptor["model_tensors"][key] = fname
                zf.writestr(fname, fpx.encode_tensor(tensor.detach().numpy()))
            for pid, entry in opt_sd["state"].items():
                for key, value in entry.items():
                    if isinstance(value, torch.Tensor):
                        fname = f"opt/{pid}_{key}.fpx"
                        descriptor["opt_tensors"][f"{pid}/{key}"] = fname
                        zf.writestr(fname, fpx.encode_tensor(value.detach().numpy()))
                    else:
                        descriptor["opt_scalars"][f"{pid}/{key}"] = value
            zf.writestr("descriptor.json", json.dumps(descriptor))

    @classmethod
    def restore(
        cls,
        cache_root: str | Path,
        state_path: str | Path,
        out_dir: str | Path | None = None,
        probe: Callable[[StepProbe], None] | None = None,
        on_record: Callable[[TrainLogRecord], None] | None = None,
        log: Callable[[str], None] | None = None,
    ) -> "Trainer":
        """Rebuild a trainer from a state file; continuing matches the
        uninterrupted run bit for bit."""
        state_path = Path(state_path)
        with zipfile.ZipFile(state_path) as zf:
            descriptor = json.loads(zf.read("descriptor.json"))
            if descriptor.get("format") != STATE_FORMAT:
                raise ValueError(
                    f"train state version mismatch: file says {descriptor.get('format')!r}, "
                    f"reader supports {STATE_FORMAT!r}"
                )
            config = TrainConfig.from_dict(descriptor["config"])
            trainer = cls(
                cache_root, config, out_dir=out_dir, probe=probe, on_record=on_record, log=log
            )
            model_state = trainer.student.state_dict()
            for key, fname in descriptor["model_tensors"].items():
                arr = fpx.decode_tensor(zf.read(fname))
                if tuple(arr.shape) != tuple(model_state[key].shape):
                    raise ValueError(
                        f"train state tensor {key!r}: file has shape {tuple(arr.shape)}, "
                        f"model expects {tuple(model_state[key].shape)}"
                    )
                with torch.no_grad():
                    model_state[key].copy_(torch.from_numpy(arr))
            opt_state: dict[int, dict] = {}
            for joint, fname in descriptor["opt_tensors"].items():
                pid, key = joint.split("/", 1)
                opt_state.setdefault(int(pid), {})[key] = torch.from_numpy(
                    fpx.decode_tensor(zf.read(fname)).copy()
                )
            for joint, value in descriptor["opt_scalars"].items():
                pid, key = joint.split("/", 1)
                opt_state.setdefault(int(pid), {})[key] = value
            trainer.optimizer.load_state_dict(
                {"state": opt_state, "param_groups": descriptor["param_groups"]}
            )
            trainer.rng.bit_generator.state = descriptor["rng_state"]
            trainer.global_step = int(descriptor["step"])
        return trainer


def train(
    cache_root: str | Path,
    config: TrainConfig = TrainConfig(),
    out_dir: str | Path | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[FusionStudent, list[TrainLogRecord]]:
    trainer = Trainer(cache_root, config, out_dir=out_dir, log=log)
    records = trainer.train()
    return trainer.student, records


def evaluate_losses(
    student: FusionStudent,
    pairs: Sequence[CachedPair],
    panel,
    norms: PanelNormStats,
    weights: LossWeights = LossWeights(),
    routing_override: dict[str, np.ndarray] | None = None,
) -> LossBreakdown:
    """Mean full-frame loss breakdown of a student over cached pairs."""
    sums = {"pixel": 0.0, "mfm": 0.0, "ssim": 0.0, "total": 0.0}
    for pair in pairs:
        feats = pair.feats
        if routing_override is not None:
            feats = replace(feats, routing=routing_override[pair.pair_id])
        ir_t = torch.from_numpy(pair.ir)[None, None]
        vis_t = torch.from_numpy(pair.vis).permute(2, 0, 1)[None]
        with torch.no_grad():
            pred = student(ir_t, vis_t)[0].permute(1, 2, 0)
        _, bd = total_loss(pred, pair.ensemble, feats, panel, norms, weights)
        for key in sums:
            sums[key] += getattr(bd, key)
    n = len(pairs)
    return LossBreakdown(
        pixel=sums["pixel"] / n, mfm=sums["mfm"] / n, ssim=sums["ssim"] / n, total=sums["total"] / n
    )


def tau_sweep(
    cache_root: str | Path,
    config: TrainConfig,
    taus: Sequence[float],
    student: FusionStudent | None = None,
    retrain_steps: int = 0,
    log: Callable[[str], None] | None = None,
) -> list[dict]:
    """Routing-temperature sweep.

    For each tau, routing is re-derived from the cached feature variances;
    the row reports mean routing entropy plus the loss breakdown of either a
    freshly retrained student (``retrain_steps`` > 0), the given student, or
    an untrained one.
    """
    for tau in taus:
        if tau <= 0:
            raise ValueError(f"tau must be positive, got {tau}")
    torch.set_num_threads(1)
    cache_root = Path(cache_root)
    manifest = load_manifest(cache_root)
    panel, norms, _ = load_norms(cache_root)
    pairs = [load_pair(cache_root, pid, manifest) for pid in list_pairs(manifest)]
    rows = []
    for tau in taus:
        routing = {p.pair_id: routing_weights(p.feats.var, norms, tau=tau) for p in pairs}
        per_pair_entropy = {
            pid: float(routing_entropy(r).mean()) for pid, r in routing.items()
        }
        if retrain_steps > 0:
            cfg = replace(config, tau=tau, max_steps=retrain_steps)
            trainer = Trainer(cache_root, cfg, log=log)
            trainer.train()
            model = trainer.student
        else:
            model = student if student is not None else build_student(config.variant, config.seed)
        bd = evaluate_losses(model, pairs, panel, norms, config.weights, routing_override=routing)
        rows.append(
            {
                "tau": float(tau),
                "mean_routing_entropy": float(np.mean(list(per_pair_entropy.values()))),
                "routing_entropy_per_pair": per_pair_entropy,
                "pixel": bd.pixel,
                "mfm": bd.mfm,
                "ssim": bd.ssim,
                "total": bd.total,
            }
        )
        if log is not None:
            log(f"tau {tau}: entropy {rows[-1]['mean_routing_entropy']:.4f}, total {bd.total:.4f}")
    return rows


def misalign_sweep(
    student: FusionStudent,
    pairs: Sequence[CachedPair],
    magnitudes: Sequence[tuple[float, float]],
) -> list[dict]:
    """Robustness table: fuse with the IR input perturbed by the corner case
    of each magnitude (dx = dy = px, theta = deg) and score against aligned
    references. The (0, 0) row is exactly the aligned evaluation."""
    rows = []
    for px, deg in magnitudes:
        pert = AffinePerturbation(dx=float(px), dy=float(px), theta=float(deg))
        sums: dict[str, float] = {}
        for pair in pairs:
            ir_in = pair.ir if pert.is_identity() else apply_affine(pair.ir, pert)
            fused = student.fuse_arrays(ir_in, pair.vis)
            scores = evaluate_pair(fused, pair.ir, pair.vis)
            scores["ssim_vs_mean"] = ssim_value(fused, pair.ensemble.mean)
            for key, val in scores.items():
                sums[key] = sums.get(key, 0.0) + val
        row = {"px": float(px), "deg": float(deg)}
        row.update({key: val / len(pairs) for key, val in sums.items()})
        rows.append(row)
    return rows
