"""Stage 1 (Siamese change detection) and Stage 2 (forecast / time-range) training."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentConfig, augment
from .evaluation import Counter, TimeRangeAccumulator, oracle_threshold
from .losses import LossConfig, combined_loss_from_logits, forecast_loss
from .network import (BackboneConfig, ModelBundle, Task, save_bundle, split_logits,
                      timerange_probs, transfer_backbone)
from .sampling import DEFAULT_SMOOTHING, ChangeSampler
from .thresholding import ThresholdTracker, batch_optimal_threshold

log = logging.getLogger(__name__)

SMALL_BATCH_RANGES = (21, 24)


class TrainingDiverged(RuntimeError):
    def __init__(self, step, last_good):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_good}")
        self.step = step
        self.last_good = last_good


@dataclass
class TrainConfig:
    stage: int = 1
    task: str = "detect"
    base_lr: float = 1e-4
    fine_lr: float | None = None  # defaults to base_lr / 10
    freeze_steps: int = 5000
    batch_size: int | None = None  # None: 16, or 4 for the 21/24-month ranges
    max_steps: int | None = None  # None: 20,000 (stage 1) / 10,000 (stage 2)
    seed: int = 0
    smoothing: float = DEFAULT_SMOOTHING
    lambda_mix: float = 1000.0
    threshold_window: int = 500
    init: str = "scratch"  # stage 2: scratch | stage1 | external
    init_path: str | None = None
    encoder_scale: str = "tiny"
    feature_dim: int = 16
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    log_every: int = 1
    val_every: int = 0  # 0: validate only at the end
    val_max_samples: int | None = None
    checkpoint_every: int = 0
    eval_batch_size: int = 16
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        elif isinstance(self.augment, bool):
            self.augment = AugmentConfig() if self.augment else AugmentConfig.off()
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        task = self.parsed_task
        if (self.stage == 1) != (task.kind == "detect"):
            raise ValueError(f"stage {self.stage} cannot train task {task}")
        if self.stage == 2 and self.init not in ("scratch", "stage1", "external"):
            raise ValueError("stage 2 needs init in {scratch, stage1, external}")

    @property
    def parsed_task(self) -> Task:
        return Task.parse(self.task)

    @property
    def effective_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        t = self.parsed_task
        return 4 if t.kind != "detect" and t.horizon in SMALL_BATCH_RANGES else 16

    @property
    def effective_fine_lr(self) -> float:
        return self.base_lr / 10.0 if self.fine_lr is None else self.fine_lr

    @property
    def effective_max_steps(self) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return 20_000 if self.stage == 1 else 10_000

    @property
    def default_threshold(self) -> float:
        return 0.33 if self.parsed_task.kind == "timerange" else 0.5

    def seeds(self) -> dict[str, int]:
        """Independent per-subsystem seeds split from the root seed."""
        children = np.random.SeedSequence(self.seed).spawn(3)
        return {name: int(c.generate_state(1)[0]) for name, c in zip(("init", "sampler", "augment"), children)}

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("augment"), dict):
            aug_known = {f.name for f in dataclasses.fields(AugmentConfig)}
            bad = set(d["augment"]) - aug_known
            if bad:
                raise ValueError(f"unknown augment keys: {sorted(bad)}")
        return cls(**d)


@dataclass
class TrainResult:
    bundle: ModelBundle
    tracker: ThresholdTracker
    history: list[dict]
    best_val: dict | None = None
    checkpoints: list[str] = field(default_factory=list)


# ---------------------------------------------------------------- batching

def _stack(arrs, dtype=torch.float32):
    return torch.from_numpy(np.stack(arrs)).to(dtype)


def make_batch(samples, task: Task):
    x0 = _stack([s.image_t0 for s in samples])
    x1 = _stack([s.image_t1 for s in samples]) if task.kind == "detect" else None
    y_c = _stack([s.change_mask for s in samples])
    fcm = _stack([s.first_change_month for s in samples], torch.int64)
    return x0, x1, y_c, fcm


def _logits(bundle, x0, x1):
    out = bundle(x0, x1) if bundle.task.kind == "detect" else bundle(x0)
    return out


def _loss(bundle, logits, y_c, fcm, loss_cfg):
    """(total, time term, binary term, change scores, change labels)."""
    if bundle.task.kind == "timerange":
        total, l_time, l_bin = combined_loss_from_logits(logits, fcm, loss_cfg, bundle.task.horizon or 24)
        q_e, q_l, q_0 = split_logits(logits)
        _, p_c = timerange_probs(q_e, q_l, q_0)
        labels = ((fcm >= 1) & (fcm <= (bundle.task.horizon or 24))).float()
        return total, l_time, l_bin, p_c, labels
    logits = logits[:, 0]
    l_bin = forecast_loss(logits, y_c)
    return l_bin, torch.zeros(()), l_bin, torch.sigmoid(logits), y_c


# ---------------------------------------------------------------- inference

@torch.no_grad()
def predict(bundle: ModelBundle, dataset, indices=None, batch_size: int = 16):
    """Yield (sample, output maps) with output maps = change probability (N,H,W) for
    detect/forecast, or (p_e, p_c) stacked as (N,2,H,W) for time-range."""
    bundle.eval()
    idx = list(range(len(dataset))) if indices is None else list(indices)
    for start in range(0, len(idx), batch_size):
        samples = [dataset[i] for i in idx[start:start + batch_size]]
        x0, x1, _, _ = make_batch(samples, bundle.task)
        logits = _logits(bundle, x0, x1)
        if bundle.task.kind == "timerange":
            p_e, p_c = timerange_probs(*split_logits(logits))
            out = torch.stack([p_e, p_c], dim=1)
        else:
            out = torch.sigmoid(logits[:, 0])
        for s, o in zip(samples, out.numpy()):
            yield s, o


def evaluate(bundle: ModelBundle, dataset, threshold: float, indices=None, batch_size: int = 16,
             keep_scores: bool = False) -> dict:
    """Micro-averaged foreground metrics at `threshold`; time-range bundles also get
    the early/late report. With keep_scores, adds the test-set oracle threshold."""
    if bundle.task.kind == "timerange":
        acc = TimeRangeAccumulator(threshold, bundle.task.horizon or 24)
        scores, labels = [], []
        for s, o in predict(bundle, dataset, indices, batch_size):
            acc.add(o[0], o[1], s.first_change_month)
            if keep_scores:
                scores.append(o[1].ravel())
                labels.append(((s.first_change_month >= 1) & (s.first_change_month <= 24)).ravel())
        rep = acc.report()
        out = dict(rep["change_forecast"])
        out["timerange"] = rep
    else:
        counter = Counter()
        scores, labels = [], []
        for s, o in predict(bundle, dataset, indices, batch_size):
            counter.add(o > threshold, s.change_mask)
            if keep_scores:
                scores.append(o.ravel())
                labels.append(s.change_mask.ravel().astype(bool))
        out = counter.metrics()
        out["threshold_used"] = threshold
    if keep_scores and scores:
        s = np.concatenate(scores)
        y = np.concatenate(labels)
        out["scores"], out["labels"] = s, y
        if y.any():
            out["oracle_threshold"], out["oracle_f1"] = oracle_threshold(s, y)
    return out


# ---------------------------------------------------------------- training loop

def _subsample_indices(n, limit, seed=0):
    if limit is None or n <= limit:
        return None
    return np.sort(np.random.default_rng(seed).choice(n, limit, replace=False))


def _params_snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


class _Run:
    """Shared machinery for one training run (one bundle, one log, one sampler)."""

    def __init__(self, bundle, cfg: TrainConfig, train_set, val_set, out_dir):
        self.bundle = bundle
        self.cfg = cfg
        self.train_set = train_set
        self.val_set = val_set
        self.out_dir = Path(out_dir) if out_dir else None
        seeds = cfg.seeds()
        self.sampler = ChangeSampler(train_set.n_change, cfg.smoothing, seeds["sampler"])
        self.aug_rng = np.random.default_rng(seeds["augment"])
        self.thr_rng = np.random.default_rng(seeds["augment"] + 1)
        self.loss_cfg = LossConfig(lambda_mix=cfg.lambda_mix)
        self.tracker = ThresholdTracker(cfg.threshold_window, cfg.default_threshold)
        self.history = []
        self.step = 0
        self.best_val = None
        self.best_state = None
        self.checkpoints = []
        self.last_good = None
        self.val_idx = _subsample_indices(len(val_set), cfg.val_max_samples) if val_set is not None else None
        self.log_file = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.log_file = (self.out_dir / "train_log.jsonl").open("w")

    def checkpoint(self, name):
        if not self.out_dir:
            return None
        path = self.out_dir / name
        save_bundle(self.bundle, path, step=self.step, tracker=self.tracker.to_json())
        self.checkpoints.append(str(path))
        return str(path)

    def validate(self):
        if self.val_set is None or len(self.val_set) == 0:
            return None
        m = evaluate(self.bundle, self.val_set, self.tracker.current, self.val_idx, self.cfg.eval_batch_size)
        m["step"] = self.step
        rec = {"step": self.step, "val_f1": m["f1"], "val_precision": m["precision"], "val_recall": m["recall"],
               "threshold": self.tracker.current}
        self.history.append(rec)
        if self.log_file:
            self.log_file.write(json.dumps(rec) + "\n")
        if self.best_val is None or m["f1"] > self.best_val["f1"]:
            self.best_val = m
            self.best_state = (_params_snapshot(self.bundle), ThresholdTracker.from_json(self.tracker.to_json()))
            if self.out_dir:
                self.checkpoint("best.pt")
        return m

    def phase(self, params, lr, steps, frozen_backbone=False, phase_name=""):
        if steps <= 0:
            return
        opt = torch.optim.Adam(params, lr=lr)
        task = self.bundle.task
        bs = self.cfg.effective_batch_size
        for _ in range(steps):
            self.bundle.train()
            if frozen_backbone:
                self.bundle.backbone.eval()
            idx = self.sampler.draw_batch(bs)
            samples = [augment(self.train_set[int(i)], self.aug_rng, self.cfg.augment) for i in idx]
            x0, x1, y_c, fcm = make_batch(samples, task)
            logits = _logits(self.bundle, x0, x1)
            total, l_time, l_bin, scores, labels = self._loss(logits, y_c, fcm)
            if not torch.isfinite(total):
                raise TrainingDiverged(self.step, self.last_good)
            opt.zero_grad()
            total.backward()
            opt.step()
            self.step += 1
            self.tracker.update(batch_optimal_threshold(scores.detach().numpy(), labels.numpy(), rng=self.thr_rng))
            rec = {"step": self.step, "loss": total.item(), "loss_time": l_time.item(), "loss_binary": l_bin.item(),
                   "lr": lr, "tracked_threshold": self.tracker.current, "phase": phase_name}
            if self.cfg.log_every and self.step % self.cfg.log_every == 0:
                self.history.append(rec)
                if self.log_file:
                    self.log_file.write(json.dumps(rec) + "\n")
            if self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.last_good = self.checkpoint(f"step{self.step:06d}.pt")
            if self.cfg.val_every and self.step % self.cfg.val_every == 0:
                self.validate()

    def _loss(self, logits, y_c, fcm):
        return _loss(self.bundle, logits, y_c, fcm, self.loss_cfg)

    def finish(self) -> TrainResult:
        if self.val_set is not None and len(self.val_set) and (not self.cfg.val_every or self.step % self.cfg.val_every):
            self.validate()
        if self.best_state is not None:
            state, tracker = self.best_state
            self.bundle.load_state_dict(state)
            self.tracker = tracker
        self.checkpoint("final.pt")
        if self.log_file:
            self.log_file.close()
        return TrainResult(self.bundle, self.tracker, self.history, self.best_val, self.checkpoints)


def _seed_torch(cfg):
    torch.manual_seed(cfg.seeds()["init"])
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def train_stage1(train_set, cfg: TrainConfig, val_set=None, out_dir=None) -> TrainResult:
    """Siamese change detection on pairs of any month gap."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    _seed_torch(cfg)
    bundle = ModelBundle(Task("detect"), backbone_cfg=BackboneConfig(cfg.encoder_scale, cfg.feature_dim))
    run = _Run(bundle, cfg, train_set, val_set, out_dir)
    run.phase(bundle.parameters(), cfg.base_lr, cfg.effective_max_steps, phase_name="detect")
    return run.finish()


def build_stage2_bundle(cfg: TrainConfig, init: ModelBundle | None = None) -> ModelBundle:
    task = cfg.parsed_task
    if init is not None:
        if init.backbone.cfg.encoder_scale != cfg.encoder_scale or init.backbone.cfg.feature_dim != cfg.feature_dim:
            raise ValueError("init backbone config does not match the training config")
        provenance = cfg.init if cfg.init != "scratch" else "stage1"
        return transfer_backbone(init, task, provenance)
    bundle = ModelBundle(task, backbone_cfg=BackboneConfig(cfg.encoder_scale, cfg.feature_dim))
    if cfg.init == "external":
        from .network import load_external_encoder

        if not cfg.init_path:
            raise ValueError("external init needs init_path")
        load_external_encoder(bundle, cfg.init_path)
    return bundle


def train_stage2(train_set, cfg: TrainConfig, init: ModelBundle | None = None, val_set=None,
                 out_dir=None) -> TrainResult:
    """Forecast(r) or time-range training.

    Phase A trains a fresh head on the frozen backbone for `freeze_steps` at
    the base rate; phase B trains everything at the fine rate for the rest of
    `max_steps`. The threshold tracker restarts at the phase boundary.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    _seed_torch(cfg)
    bundle = build_stage2_bundle(cfg, init)
    run = _Run(bundle, cfg, train_set, val_set, out_dir)
    total = cfg.effective_max_steps
    steps_a = min(cfg.freeze_steps, total)
    for p in bundle.backbone.parameters():
        p.requires_grad_(False)
    run.phase(bundle.head.parameters(), cfg.base_lr, steps_a, frozen_backbone=True, phase_name="frozen")
    for p in bundle.backbone.parameters():
        p.requires_grad_(True)
    run.tracker.reset()
    run.phase(bundle.parameters(), cfg.effective_fine_lr, total - steps_a, phase_name="finetune")
    return run.finish()


# ---------------------------------------------------------------- manifests

def run_manifest(cfg: TrainConfig, results: dict, path, data_hashes: dict | None = None) -> Path:
    """Reproducibility record: config, seeds, data hashes, metrics, checkpoints."""
    path = Path(path)
    record = {
        "config": cfg.to_json(),
        "seeds": {"root": cfg.seed, **cfg.seeds()},
        "data_hashes": data_hashes or {},
        "results": _jsonable(results),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(record, indent=2, sort_keys=True))
    except OSError as e:
        raise RuntimeError(f"cannot write manifest {path}: {e}") from e
    return path


def load_manifest(path) -> tuple[TrainConfig, dict]:
    record = json.loads(Path(path).read_text())
    return TrainConfig.from_json(record["config"]), record


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items() if not isinstance(v, np.ndarray)}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x
