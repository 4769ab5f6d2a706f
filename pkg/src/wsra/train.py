"""Run configuration, checkpoints, the training loop and manifest evaluation."""
from __future__ import annotations

import logging
import math
import shutil
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numgrad as ng
from .data import DatasetManifest, TrainingSet
from .grounding import HEADS, SCORINGS, GroundingResult, build_proposals, didemo_feature_augment, ground
from .losses import LossWeights, total_loss
from .metrics import EvalReport, evaluate, recall_at_k
from .sampling import SamplingConfig, batch_seed_for, epoch_batches
from .scoring import WsraModel
from .spans import SNIPPET, TIME

log = logging.getLogger(__name__)

MODES = ("segment", "sliding", "didemo")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    alpha_w: float = 0.1
    beta_w: float = 1.0
    delta_w: float = 0.1
    margin: float = 0.4
    tau: float = 1.0
    pairing: str = "printed"
    batch_size: int = 42
    k_top: int = 3
    k_last: int = 3
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 30
    seed: int = 0
    hidden: int = 0
    bilinear: int = 1
    dataset_mode: str = "segment"
    fractions: str = "0.2,0.3,0.4,0.5"
    overlap: float = 0.8
    head: str = "snippet"
    proposal_scoring: str = "auto"  # contrast, except pooled in didemo mode
    top_k: int = 0  # 0: 5 for segment/didemo, 1 for sliding
    select_iou: float = 0.0  # 0: exact match for segment/didemo, 0.7 for sliding

    def __post_init__(self):
        if self.dataset_mode not in MODES:
            raise ValueError(f"dataset_mode must be one of {MODES}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.proposal_scoring not in ("auto",) + SCORINGS:
            raise ValueError(f"proposal_scoring must be auto or one of {SCORINGS}, got {self.proposal_scoring!r}")
        if self.dataset_mode == "didemo" and self.effective_scoring() == "contrast":
            raise ValueError("contrast scoring needs per-snippet features; didemo mode only supports pooled")
        if self.hidden < 0 or self.bilinear not in (0, 1):
            raise ValueError("hidden must be >= 0 and bilinear 0 or 1")
        self.loss_weights()
        self.sampling()

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha_w, self.beta_w, self.delta_w, self.margin, self.tau, self.pairing)

    def sampling(self) -> SamplingConfig:
        return SamplingConfig(self.batch_size, self.k_top, self.k_last)

    def window_fractions(self) -> tuple[float, ...]:
        return tuple(float(x) for x in self.fractions.split(","))

    def effective_top_k(self) -> int:
        if self.top_k > 0:
            return self.top_k
        return 1 if self.dataset_mode == "sliding" else 5

    def effective_scoring(self) -> str:
        if self.proposal_scoring != "auto":
            return self.proposal_scoring
        return "pooled" if self.dataset_mode == "didemo" else "contrast"

    def effective_select_iou(self) -> float:
        if self.select_iou > 0:
            return self.select_iou
        return 0.7 if self.dataset_mode == "sliding" else 1.0

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = (s.strip() for s in line.split("=", 1))
                kw[k.replace("-", "_")] = v
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.coerce(**kw)

    @classmethod
    def coerce(cls, **kw) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in kw.items():
            if k not in types:
                raise ValueError(f"unknown config key {k!r}")
            t = types[k]
            out[k] = int(v) if t == "int" else float(v) if t == "float" else str(v)
        return cls(**out)


def feature_transform(config: RunConfig):
    return didemo_feature_augment if config.dataset_mode == "didemo" else None


def build_model(config: RunConfig, d_visual: int, d_text: int) -> WsraModel:
    return WsraModel.init(
        d_visual, d_text, hidden=config.hidden, bilinear=bool(config.bilinear), seed=int(np.random.SeedSequence([config.seed, 7]).generate_state(1)[0]),
        margin=config.margin, tau=config.tau,
    )


# checkpoints


@dataclass
class Checkpoint:
    model: WsraModel
    adam: ng.AdamState
    config: RunConfig
    epoch: int
    best_score: float = -1.0
    best_epoch: int = -1


def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = ckpt.model.state_arrays()
    names = list(ckpt.model.named_parameters())
    if ckpt.adam.first_moment:
        for name, m, v in zip(names, ckpt.adam.first_moment, ckpt.adam.second_moment):
            arrays[f"adam.m.{name}"] = m
            arrays[f"adam.v.{name}"] = v
    meta = {
        "epoch": str(ckpt.epoch),
        "adam_step_count": str(ckpt.adam.step_count),
        "best_score": repr(float(ckpt.best_score)),
        "best_epoch": str(ckpt.best_epoch),
        "d_visual": str(ckpt.model.d_visual),
        "d_text": str(ckpt.model.d_text),
        "rng": f"seed={ckpt.config.seed};epoch={ckpt.epoch}",
    }
    ng.save_arrays(directory / "checkpoint.txt", arrays, meta)
    (directory / "config.txt").write_text(ckpt.config.to_text())
    return directory


def load_checkpoint(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    config = RunConfig.from_text((directory / "config.txt").read_text())
    arrays, meta = ng.load_arrays(directory / "checkpoint.txt")
    model = build_model(config, int(meta["d_visual"]), int(meta["d_text"]))
    model.load_state_arrays(arrays)
    adam = ng.AdamState(config.learning_rate, config.beta1, config.beta2, config.epsilon, int(meta["adam_step_count"]))
    names = list(model.named_parameters())
    if f"adam.m.{names[0]}" in arrays:
        adam.first_moment = [arrays[f"adam.m.{n}"].copy() for n in names]
        adam.second_moment = [arrays[f"adam.v.{n}"].copy() for n in names]
    return Checkpoint(model, adam, config, int(meta["epoch"]), float(meta["best_score"]), int(meta["best_epoch"]))


# inference over manifests


def eval_truth(manifest: DatasetManifest, config: RunConfig) -> dict:
    """Ground truth expressed in the unit the proposals use."""
    out = {}
    for qid, span in manifest.truth.items():
        v = manifest.video(manifest.query(qid).video_id)
        if config.dataset_mode == "sliding":
            out[qid] = span.to_time(v.snippet_duration)
        elif span.mode != SNIPPET:
            raise ValueError(f"query {qid!r}: segment-mode evaluation needs snippet-indexed truth")
        else:
            out[qid] = span
    return out


def ground_manifest(model: WsraModel, manifest: DatasetManifest, config: RunConfig, query_ids: Sequence[str] | None = None, top_k: int | None = None) -> list[GroundingResult]:
    transform = feature_transform(config)
    fractions = config.window_fractions()
    top_k = config.effective_top_k() if top_k is None else top_k
    proposals = {}
    results = []
    queries = manifest.queries if query_ids is None else [manifest.query(q) for q in query_ids]
    for q in queries:
        if q.video_id not in proposals:
            v = manifest.video(q.video_id)
            V = np.array(manifest.features(q.video_id))
            if transform is not None:
                V = transform(V)
            proposals[q.video_id] = build_proposals(V, config.dataset_mode, v.snippet_duration, fractions, config.overlap)
        emb = np.array(manifest.embedding(q.query_id))
        results.append(ground(model, q.query_id, emb, proposals[q.video_id], config.head, top_k, config.effective_scoring()))
    return results


def evaluate_manifest(model: WsraModel, manifest: DatasetManifest, config: RunConfig) -> tuple[EvalReport, list[GroundingResult]]:
    if not manifest.truth:
        raise ValueError("evaluation needs ground-truth spans (manifest spans or a truth file)")
    missing = [q.query_id for q in manifest.queries if q.query_id not in manifest.truth]
    if missing:
        raise ValueError(f"no ground-truth span for query {missing[0]!r}")
    results = ground_manifest(model, manifest, config, top_k=max(5, config.effective_top_k()))
    truth = eval_truth(manifest, config)
    thresholds = (0.3, 0.5, 0.7)
    if config.dataset_mode != "sliding":
        thresholds = thresholds + (1.0,)
    report = evaluate(results, truth, thresholds)
    th = config.effective_select_iou()
    report.extra[f"select_R@1,IoU={th:g}"] = recall_at_k(results, truth, 1, th)
    return report, results


def selection_score(model: WsraModel, manifest: DatasetManifest, config: RunConfig) -> float:
    results = ground_manifest(model, manifest, config, top_k=1)
    return recall_at_k(results, eval_truth(manifest, config), 1, config.effective_select_iou())


# training


@dataclass
class TrainResult:
    model: WsraModel
    final: Checkpoint
    best_dir: Path
    losses: list[dict]


def train(
    config: RunConfig,
    train_set: TrainingSet,
    out_dir: str | Path,
    val_manifest: DatasetManifest | None = None,
    resume: str | Path | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Train both heads with Adam on the weighted loss.

    One checkpoint per epoch goes to ``out_dir/checkpoints/epoch_XXXX``
    (``epoch_0000`` is the initial model) and the best one by validation
    Recall@1 is copied to ``out_dir/best``. ``stop_after`` ends the run
    after that many epochs in total, for interruption tests.
    """
    config.sampling().check_batch(min(config.batch_size, len(train_set.items)))
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    weights = config.loss_weights()
    sampling = config.sampling()
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config != config:
            raise ValueError("resume: checkpoint config differs from the requested config")
        log_mode = "a"
    else:
        model = build_model(config, train_set.d_visual, train_set.d_text)
        adam = ng.AdamState(config.learning_rate, config.beta1, config.beta2, config.epsilon)
        ckpt = Checkpoint(model, adam, config, 0)
        if val_manifest is not None:
            ckpt.best_score = selection_score(model, val_manifest, config)
        ckpt.best_epoch = 0
        save_checkpoint(ckpt, ckpt_dir / "epoch_0000")
        _copy_best(ckpt_dir / "epoch_0000", out_dir / "best")
        log_mode = "w"
    model, adam = ckpt.model, ckpt.adam
    params = model.parameters()
    losses: list[dict] = []
    last_epoch = config.epochs if stop_after is None else min(config.epochs, stop_after)
    with open(out_dir / "train.log", log_mode) as logf:
        for epoch in range(ckpt.epoch, last_epoch):
            for b, batch in enumerate(epoch_batches(train_set, sampling, config.seed, epoch)):
                br = total_loss(model, batch, weights)
                vals = br.values()
                if not all(math.isfinite(x) for x in vals.values()):
                    _dump_nan(out_dir, config, epoch, b, batch, vals)
                if not br.total.requires_grad:
                    raise ValueError("all loss weights are zero; nothing to train")
                br.total.backward()
                for p in params:
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                ng.adam_step(params, adam)
                vals.update(step=adam.step_count, epoch=epoch)
                losses.append(vals)
                logf.write(
                    f"step={adam.step_count} epoch={epoch} video={vals['video']!r} snippet={vals['snippet']!r} "
                    f"batch={vals['batch']!r} total={vals['total']!r}\n"
                )
            ckpt.epoch = epoch + 1
            if val_manifest is not None:
                score = selection_score(model, val_manifest, config)
                logf.write(f"epoch={epoch + 1} val_R@1={score!r}\n")
                if score > ckpt.best_score:
                    ckpt.best_score, ckpt.best_epoch = score, epoch + 1
            else:
                ckpt.best_epoch = epoch + 1
            d = save_checkpoint(ckpt, ckpt_dir / f"epoch_{epoch + 1:04d}")
            if ckpt.best_epoch == epoch + 1:
                _copy_best(d, out_dir / "best")
    return TrainResult(model, ckpt, out_dir / "best", losses)


def _copy_best(src: Path, dst: Path) -> None:
    if dst.exists():
        shutil.rmtree(dst)
    shutil.copytree(src, dst)


def _dump_nan(out_dir: Path, config: RunConfig, epoch: int, index: int, batch, vals: dict) -> None:
    seed = batch_seed_for(config.seed, epoch, index)
    path = out_dir / "nan_dump.txt"
    lines = [
        f"epoch={epoch}",
        f"batch_index={index}",
        f"batch_seed={seed}",
        *(f"{k}={v!r}" for k, v in vals.items()),
        *(f"item={it.video_id}:{it.query_id}" for it in batch.items),
    ]
    path.write_text("\n".join(lines) + "\n")
    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {index} (batch seed {seed}); details in {path}")


def train_and_evaluate(config: RunConfig, train_manifest: DatasetManifest, out_dir, val_manifest=None, test_manifest=None):
    ts = train_manifest.training_set(feature_transform(config))
    res = train(config, ts, out_dir, val_manifest)
    best = load_checkpoint(res.best_dir)
    target = test_manifest if test_manifest is not None else val_manifest
    report = evaluate_manifest(best.model, target, config)[0] if target is not None else None
    return res, best, report
