"""Chamfer-loss training of the generator head with a frozen backbone."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .data import DatasetManifest, PreprocessSpec, Record, load_gt_cloud, preprocess_image
from .errors import EmptyCloudError, NonFiniteLossError, ResolutionMismatchError
from .model import GeneratorModel, load_model_checkpoint, save_model_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float = 5.0
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    max_steps: Optional[int] = None
    seed: int = 0
    eval_every: int = 0  # steps between validation passes; 0 = once per epoch
    checkpoint_every: int = 0  # steps between periodic checkpoints; 0 = once per epoch
    cache_features: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainState:
    model: GeneratorModel
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf
    history: List[dict] = field(default_factory=list)
    backbone_checksum: str = ""


# --------------------------------------------------------------------------
# loss


def _safe_norm(diff: torch.Tensor) -> torch.Tensor:
    # zero vector gets norm 0 and zero gradient; NaN still propagates
    sq = (diff * diff).sum(-1)
    zero = sq == 0
    return torch.where(zero, torch.zeros_like(sq), torch.sqrt(torch.where(zero, torch.ones_like(sq), sq)))


def nearest_indices(src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
    """Index into ``dst`` of each ``src`` point's nearest neighbor; lowest index on ties."""
    with torch.no_grad():
        d = torch.cdist(src, dst, compute_mode="donot_use_mm_for_euclid_dist")
        return d.argmin(dim=-1)


def chamfer_loss(G: torch.Tensor, R: torch.Tensor) -> torch.Tensor:
    """Unsquared symmetric Chamfer distance, averaged over the batch.

    ``G`` and ``R`` are ``(n, 3)`` or ``(B, n, 3)``. Neighbor selection is not
    differentiated; the gradient flows through the selected pairs only.
    """
    if G.ndim == 2:
        G, R = G.unsqueeze(0), R.unsqueeze(0)
    if G.shape[-2] == 0 or R.shape[-2] == 0:
        raise EmptyCloudError("chamfer loss needs nonempty clouds")
    g_to_r = nearest_indices(G, R)
    r_to_g = nearest_indices(R, G)
    nn_r = torch.gather(R, 1, g_to_r.unsqueeze(-1).expand(-1, -1, 3))
    nn_g = torch.gather(G, 1, r_to_g.unsqueeze(-1).expand(-1, -1, 3))
    per_cloud = 0.5 * _safe_norm(G - nn_r).mean(-1) + 0.5 * _safe_norm(R - nn_g).mean(-1)
    return per_cloud.mean()


def training_objective(G: torch.Tensor, R: torch.Tensor, alpha: float = 5.0) -> torch.Tensor:
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    return alpha * chamfer_loss(G, R)


# --------------------------------------------------------------------------
# data plumbing


class SampleSource:
    """Loads (features, ground truth) for manifest records, caching what is static.

    The backbone is frozen and runs in eval mode, so its output for a given
    image never changes; caching it is exact, not an approximation.
    """

    def __init__(self, model: GeneratorModel, records: Sequence[Record], seed: int, cache_features: bool = True,
                 preprocess: PreprocessSpec = PreprocessSpec()):
        self.model = model
        self.records = list(records)
        self.cache_features = cache_features
        self.preprocess = preprocess
        n = model.config.n_points
        self.targets = []
        for r in self.records:
            cloud = load_gt_cloud(r, n, seed=seed)
            if len(cloud) != n:
                raise ResolutionMismatchError(f"record {r.sample_id}: GT has {len(cloud)} points, model emits {n}")
            self.targets.append(torch.tensor(cloud.points, dtype=torch.float32))
        self._features: Dict[str, torch.Tensor] = {}

    def __len__(self):
        return len(self.records)

    def features(self, paths: Sequence[str]) -> torch.Tensor:
        missing = [p for p in dict.fromkeys(paths) if p not in self._features]
        if missing:
            imgs = np.stack([preprocess_image(p, self.preprocess) for p in missing])
            feats = self.model.extract_features(imgs)
            if not self.cache_features:
                lookup = dict(zip(missing, feats))
                return torch.stack([lookup[p] for p in paths])
            for p, f in zip(missing, feats):
                self._features[p] = f
        return torch.stack([self._features[p] for p in paths])

    def batch(self, indices: Sequence[int], epoch: int):
        paths = [self.records[i].image_for_epoch(epoch) for i in indices]
        target = torch.stack([self.targets[i] for i in indices]).to(self.model.device)
        return self.features(paths), target


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


@torch.no_grad()
def mean_chamfer(model: GeneratorModel, source: SampleSource, epoch: int = 0, batch_size: int = 32) -> float:
    was_training = model.training
    model.eval()
    total = 0.0
    for start in range(0, len(source), batch_size):
        idx = list(range(start, min(start + batch_size, len(source))))
        feats, target = source.batch(idx, epoch)
        pred = model.head(feats)
        total += float(chamfer_loss(target.double(), pred.double())) * len(idx)
    model.train(was_training)
    return total / len(source)


# --------------------------------------------------------------------------
# fitting


def new_state(model: GeneratorModel, cfg: TrainConfig) -> TrainState:
    opt = torch.optim.Adam(model.trainable_parameters(), lr=cfg.learning_rate)
    return TrainState(model, opt, cfg, backbone_checksum=model.backbone_checksum())


def fit(
    model: GeneratorModel,
    data: DatasetManifest,
    cfg: TrainConfig,
    *,
    out_dir: Optional[os.PathLike] = None,
    state: Optional[TrainState] = None,
    val: Optional[Sequence[Record]] = None,
    source: Optional[SampleSource] = None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainState:
    """Mini-batch Adam on ``alpha * chamfer`` over the manifest's train split.

    Writes ``train_log.jsonl``, ``last.pt`` and (with ``val``) ``best.pt``
    into ``out_dir`` when given. Pass ``state`` to resume; the data order is a
    pure function of (seed, epoch), so a resumed run retraces the original.
    """
    records = data.split("train")
    if not records:
        raise ValueError("manifest has no training records")
    if data.gt_resolution != model.config.n_points:
        raise ResolutionMismatchError(
            f"manifest GT resolution {data.gt_resolution} != model output size {model.config.n_points}"
        )
    if state is None:
        state = new_state(model, cfg)
    source = source or SampleSource(model, records, cfg.seed, cfg.cache_features)
    val_source = SampleSource(model, val, cfg.seed, cfg.cache_features) if val else None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = open(out / "train_log.jsonl", "a") if out is not None else None

    steps_per_epoch = math.ceil(len(source) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.max_epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    eval_every = cfg.eval_every or steps_per_epoch
    ckpt_every = cfg.checkpoint_every or steps_per_epoch

    model.train()
    try:
        while state.step < total_steps:
            epoch, pos = divmod(state.step, steps_per_epoch)
            order = epoch_order(len(source), cfg.seed, epoch)
            idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
            t0 = time.perf_counter()
            feats, target = source.batch(idx, epoch)
            pred = model.head(feats)
            loss = training_objective(target, pred, cfg.alpha)
            if not torch.isfinite(loss):
                if out is not None:
                    save_checkpoint(state, out / "diagnostic.pt")
                raise NonFiniteLossError(f"non-finite loss at step {state.step} (epoch {epoch})")
            state.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            state.optimizer.step()
            state.step += 1
            state.epoch = state.step // steps_per_epoch
            row = {
                "step": state.step,
                "epoch": epoch,
                "loss": float(loss.detach()),
                "lr": cfg.learning_rate,
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
            }
            state.history.append(row)
            if log_fh is not None:
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()
            if on_step is not None:
                on_step(row)
            if val_source is not None and (state.step % eval_every == 0 or state.step == total_steps):
                cd = mean_chamfer(model, val_source, epoch)
                log.info("step %d validation CD %.5f", state.step, cd)
                if cd < state.best_val:
                    state.best_val = cd
                    if out is not None:
                        save_checkpoint(state, out / "best.pt")
            if out is not None and (state.step % ckpt_every == 0 or state.step == total_steps):
                save_checkpoint(state, out / "last.pt")
    finally:
        if log_fh is not None:
            log_fh.close()
    if model.backbone_checksum() != state.backbone_checksum:
        raise RuntimeError("backbone weights changed during training")
    return state


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, path: os.PathLike) -> None:
    extra = {
        "train_config": json.dumps(state.config.to_dict(), sort_keys=True),
        "optimizer": state.optimizer.state_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "best_val": state.best_val if math.isfinite(state.best_val) else None,
    }
    save_model_checkpoint(state.model, path, extra=extra)


def load_checkpoint(path: os.PathLike, weights_path: Optional[str] = None) -> TrainState:
    model, extra = load_model_checkpoint(path, weights_path)
    cfg = TrainConfig.from_dict(json.loads(extra["train_config"])) if "train_config" in extra else TrainConfig()
    state = new_state(model, cfg)
    if "optimizer" in extra:
        state.optimizer.load_state_dict(extra["optimizer"])
    state.step = int(extra.get("step", 0))
    state.epoch = int(extra.get("epoch", 0))
    best = extra.get("best_val")
    state.best_val = math.inf if best is None else float(best)
    return state
