"""Training, evaluation, the part-swap probe, and routing inspection.

A run is described by a RunConfig (parsed from a flat config file), trains
deterministically given its seed, and leaves behind per-epoch metrics
(JSON lines), a best and a final checkpoint, and JSON reports. Wall-clock
time is recorded in its own metrics field and is the only value excluded
from the byte-identical reproducibility contract.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dataset as ds
from . import losses as ls
from . import models as md
from . import routing as rt
from .autodiff import Tensor
from .config import ConfigError, typed
from .optim import Adam

EVAL_BATCH = 64


@dataclass(frozen=True)
class RunConfig:
    dataset_dir: str
    out_dir: str
    seed: int = 7
    model_kind: str = "capsnet"  # capsnet | cnn
    routing_mode: str = "dynamic"  # dynamic | equal
    iters: int = 3
    cnn_head: str = "margin_scores"  # margin_scores | cross_entropy_logits
    loss_mode: str = "fixed"  # fixed | linear_ramp | linear_ramp_unweighted
    w_ent: float = 0.0
    w_ent_start: float = 0.0
    w_ent_end: float = 0.8
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    precision: str = "narrow"  # narrow | wide

    def __post_init__(self):
        if self.model_kind not in ("capsnet", "cnn"):
            raise ConfigError(f"model.kind must be capsnet|cnn, got {self.model_kind!r}")
        if self.routing_mode not in ("dynamic", "equal"):
            raise ConfigError(f"model.routing must be dynamic|equal, got {self.routing_mode!r}")
        if self.precision not in ("narrow", "wide"):
            raise ConfigError(f"train.precision must be narrow|wide, got {self.precision!r}")
        if self.cnn_head not in ("margin_scores", "cross_entropy_logits"):
            raise ConfigError(f"model.head invalid: {self.cnn_head!r}")
        if self.loss_mode not in ("fixed", "linear_ramp", "linear_ramp_unweighted"):
            raise ConfigError(f"loss.mode invalid: {self.loss_mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("train.epochs and train.batch must be positive")

    @property
    def dtype(self):
        return np.float32 if self.precision == "narrow" else np.float64

    def schedule(self):
        if self.loss_mode == "fixed":
            return ls.LossSchedule("fixed", self.w_ent, self.w_ent, self.epochs)
        return ls.LossSchedule(self.loss_mode, self.w_ent_start, self.w_ent_end, self.epochs)


CONFIG_KEYS = {
    "dataset.dir": ("dataset_dir", str),
    "run.out": ("out_dir", str),
    "run.seed": ("seed", int),
    "model.kind": ("model_kind", str),
    "model.routing": ("routing_mode", str),
    "model.iters": ("iters", int),
    "model.head": ("cnn_head", str),
    "loss.mode": ("loss_mode", str),
    "loss.w_ent": ("w_ent", float),
    "loss.w_ent_start": ("w_ent_start", float),
    "loss.w_ent_end": ("w_ent_end", float),
    "train.epochs": ("epochs", int),
    "train.batch": ("batch_size", int),
    "train.lr": ("lr", float),
    "train.precision": ("precision", str),
}

DATASET_KEYS = {
    "dataset.n_train": ("n_train", int),
    "dataset.n_val": ("n_val", int),
    "dataset.n_probe": ("n_probe", int),
    "dataset.face_fraction": ("face_fraction", float),
    "dataset.canvas": ("canvas", int),
    "run.seed": ("seed", int),
}


def run_config_from_mapping(mapping, out_dir=None, seed=None):
    unknown = set(mapping) - set(CONFIG_KEYS) - set(DATASET_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, (fieldname, kind) in CONFIG_KEYS.items():
        value = typed(mapping, key, kind)
        if value is not None:
            kwargs[fieldname] = value
    if out_dir is not None:
        kwargs["out_dir"] = str(out_dir)
    if seed is not None:
        kwargs["seed"] = int(seed)
    if "dataset_dir" not in kwargs:
        raise ConfigError("missing required config key 'dataset.dir'")
    if "out_dir" not in kwargs:
        raise ConfigError("missing output directory: set run.out or pass --out")
    return RunConfig(**kwargs)


def dataset_config_from_mapping(mapping, seed=None):
    known = set(CONFIG_KEYS) | set(DATASET_KEYS)
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, (fieldname, kind) in DATASET_KEYS.items():
        value = typed(mapping, key, kind)
        if value is not None:
            kwargs[fieldname] = value
    if seed is not None:
        kwargs["seed"] = int(seed)
    return ds.DatasetConfig(**kwargs)


# experiment matrix naming mirrors the regularization variants compared in
# the probe study: unregularized, two fixed mixes, a ramp schedule, uniform
# routing, and the convolutional baseline
VARIANTS = {
    "unregcaps": dict(model_kind="capsnet", routing_mode="dynamic", loss_mode="fixed", w_ent=0.0),
    "0.4caps": dict(model_kind="capsnet", routing_mode="dynamic", loss_mode="fixed", w_ent=0.4),
    "0.8caps": dict(model_kind="capsnet", routing_mode="dynamic", loss_mode="fixed", w_ent=0.8),
    "schcaps": dict(
        model_kind="capsnet",
        routing_mode="dynamic",
        loss_mode="linear_ramp",
        w_ent_start=0.0,
        w_ent_end=0.8,
    ),
    "equalcaps": dict(model_kind="capsnet", routing_mode="equal", loss_mode="fixed", w_ent=0.0),
    "cnn": dict(model_kind="cnn", loss_mode="fixed", w_ent=0.0),
}


def variant_config(name, dataset_dir, out_dir, seed=7, **overrides):
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    kwargs = dict(VARIANTS[name])
    kwargs.update(overrides)
    return RunConfig(dataset_dir=str(dataset_dir), out_dir=str(out_dir), seed=seed, **kwargs)


def build_model(cfg):
    if cfg.model_kind == "cnn":
        return md.build_cnn(md.CNNConfig(head=cfg.cnn_head), seed=cfg.seed, dtype=cfg.dtype)
    base = md.CapsNetConfig(routing_mode=cfg.routing_mode)
    routed = tuple(replace(spec, iters=cfg.iters) for spec in base.routed)
    return md.build_capsnet(replace(base, routed=routed), seed=cfg.seed, dtype=cfg.dtype)


def _classification_loss(out, targets, cfg):
    if cfg.model_kind == "cnn" and cfg.cnn_head == "cross_entropy_logits":
        B, K = out.class_activations.shape
        onehot = np.zeros((B, K), dtype=out.class_activations.dtype)
        onehot[np.arange(B), targets] = 1.0
        picked = ad.reduce_sum(
            ad.mul(
                Tensor(onehot),
                ad.log(ad.add_scalar(out.class_activations, rt.ENTROPY_LOG_GUARD)),
            ),
            axis=1,
        )
        return ad.neg(ad.reduce_mean(picked))
    return ls.margin_loss(out.class_activations, targets)


def _epoch_rng(seed, epoch):
    return np.random.default_rng(np.random.PCG64(np.random.SeedSequence((seed, 7919, epoch))))


@dataclass
class ProbeReport:
    mean_activation_intact: float
    mean_activation_swapped: float
    activation_drop: float
    metadata: dict = dc_field(default_factory=dict)


def train(cfg, log=print):
    """Train one run; returns a summary dict with artifact paths."""
    data = ds.load_dataset(cfg.dataset_dir)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    schedule = cfg.schedule()
    images = data.images_float("train", dtype=cfg.dtype)
    labels = data.labels["train"].astype(np.int64)
    n = images.shape[0]
    metrics_path = out_dir / "metrics.jsonl"
    best_path = out_dir / "best.ckpt"
    final_path = out_dir / "final.ckpt"
    best_acc = -1.0
    t_start = time.time()
    with open(metrics_path, "w") as metrics_fh:
        for epoch in range(cfg.epochs):
            weights = ls.schedule_weights(epoch, schedule)
            order = _epoch_rng(cfg.seed, epoch).permutation(n)
            sums = {"total": 0.0, "margin": 0.0, "entropy": 0.0}
            batches = 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                batch = Tensor(images[idx])
                targets = labels[idx]
                try:
                    out = model.forward(batch)
                    margin = _classification_loss(out, targets, cfg)
                    if out.traces:
                        entropy_value = float(sum(t.entropy_mean[-1] for t in out.traces))
                        if weights.w_ent > 0.0:
                            total = ls.combined_loss(
                                margin, ls.entropy_loss(out.traces), weights
                            )
                        else:
                            # reported but kept out of the graph: a w_ent = 0
                            # run is bit-identical to a margin-only run
                            total = ad.scale(margin, weights.w_cls)
                    else:
                        entropy_value = 0.0
                        total = margin
                except ValueError as exc:
                    # diverged activations trip the finiteness guards inside
                    # softmax/log before the loss itself is evaluated
                    raise RuntimeError(
                        f"non-finite values at epoch {epoch}, batch {batches}: {exc}"
                    ) from exc
                total_value = total.item()
                if not np.isfinite(total_value):
                    raise RuntimeError(
                        f"non-finite loss {total_value} at epoch {epoch}, "
                        f"batch {batches} (samples {start}..{start + len(idx)})"
                    )
                total.backward()
                optimizer.step()
                optimizer.zero_grad()
                sums["total"] += total_value
                sums["margin"] += margin.item()
                sums["entropy"] += entropy_value
                batches += 1
            val_acc, val_entropy = evaluate_model(model, data, "val", cfg.dtype)
            record = {
                "epoch": epoch,
                "loss_total": sums["total"] / batches,
                "loss_margin": sums["margin"] / batches,
                "loss_entropy": sums["entropy"] / batches,
                "w_ent": weights.w_ent,
                "val_accuracy": val_acc,
                "entropy_per_layer": val_entropy,
                "wall_time_s": round(time.time() - t_start, 3),
            }
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
            metrics_fh.flush()
            if val_acc > best_acc:
                best_acc = val_acc
                md.save_checkpoint(model, best_path)
            log(
                f"epoch {epoch:3d}  loss {record['loss_total']:.4f}  "
                f"margin {record['loss_margin']:.4f}  entropy {record['loss_entropy']:.3f}  "
                f"w_ent {weights.w_ent:.3f}  val acc {val_acc:.4f}"
            )
    md.save_checkpoint(model, final_path)
    return {
        "metrics": str(metrics_path),
        "best_checkpoint": str(best_path),
        "final_checkpoint": str(final_path),
        "best_val_accuracy": best_acc,
        "wall_time_s": time.time() - t_start,
    }


def evaluate_model(model, data, split, dtype):
    """Accuracy and per-layer mean routing entropy over one split."""
    images = data.images_float(split, dtype=dtype)
    labels = data.labels[split].astype(np.int64)
    n = images.shape[0]
    correct = 0
    entropy_sums = None
    with ad.no_grad():
        for start in range(0, n, EVAL_BATCH):
            batch = Tensor(images[start : start + EVAL_BATCH])
            out = model.forward(batch)
            pred = out.class_activations.data.argmax(axis=1)
            correct += int((pred == labels[start : start + len(pred)]).sum())
            if out.traces:
                if entropy_sums is None:
                    entropy_sums = [0.0] * len(out.traces)
                for l, trace in enumerate(out.traces):
                    entropy_sums[l] += trace.entropy_mean[-1] * len(pred)
    per_layer = [s / n for s in entropy_sums] if entropy_sums else []
    return correct / n, per_layer


def evaluate(cfg, checkpoint, split="val"):
    data = ds.load_dataset(cfg.dataset_dir)
    model = build_model(cfg)
    md.load_state(model, md.load_checkpoint(checkpoint))
    accuracy, per_layer = evaluate_model(model, data, split, cfg.dtype)
    return {
        "split": split,
        "accuracy": accuracy,
        "entropy_per_layer": per_layer,
        "entropy_total": float(sum(per_layer)),
        "n_samples": int(data.images[split].shape[0]),
    }


def _mean_face_activation(model, images, dtype):
    total = 0.0
    n = images.shape[0]
    with ad.no_grad():
        for start in range(0, n, EVAL_BATCH):
            out = model.forward(Tensor(images[start : start + EVAL_BATCH]))
            total += float(out.class_activations.data[:, ds.FACE_LABEL].sum())
    return total / n


def probe(cfg, checkpoint, faces_split="val", swapped_split="probe"):
    """Mean face-class activation on intact vs part-swapped faces."""
    data = ds.load_dataset(cfg.dataset_dir)
    model = build_model(cfg)
    md.load_state(model, md.load_checkpoint(checkpoint))
    face_mask = data.labels[faces_split] == ds.FACE_LABEL
    if not face_mask.any():
        raise ValueError(f"split {faces_split!r} contains no faces")
    if data.images[swapped_split].shape[0] == 0:
        raise ValueError(f"split {swapped_split!r} is empty")
    intact = data.images_float(faces_split, dtype=cfg.dtype)[face_mask]
    swapped = data.images_float(swapped_split, dtype=cfg.dtype)
    mean_intact = _mean_face_activation(model, intact, cfg.dtype)
    mean_swapped = _mean_face_activation(model, swapped, cfg.dtype)
    return ProbeReport(
        mean_activation_intact=mean_intact,
        mean_activation_swapped=mean_swapped,
        activation_drop=mean_intact - mean_swapped,
        metadata={
            "model_kind": cfg.model_kind,
            "routing_mode": cfg.routing_mode,
            "checkpoint": str(checkpoint),
            "faces_split": faces_split,
            "swapped_split": swapped_split,
            "activation": "face-class capsule norm (class index %d)" % ds.FACE_LABEL,
            "n_intact": int(intact.shape[0]),
            "n_swapped": int(swapped.shape[0]),
        },
    )


def inspect(cfg, checkpoint, index, split="val"):
    """Parse forests (DOT) and a per-layer entropy table for one sample."""
    data = ds.load_dataset(cfg.dataset_dir)
    if not 0 <= index < data.images[split].shape[0]:
        raise IndexError(f"index {index} out of range for split {split!r}")
    model = build_model(cfg)
    md.load_state(model, md.load_checkpoint(checkpoint))
    image = data.images_float(split, dtype=cfg.dtype)[index : index + 1]
    with ad.no_grad():
        out = model.forward(Tensor(image))
    if not out.traces:
        raise ValueError("model has no routing layers to inspect")
    dots = []
    rows = ["layer  iters  n_out  entropy(nats)  uniform(ln n_out)  per-iteration"]
    for l, trace in enumerate(out.traces):
        forest = rt.extract_parse(trace, sample=0)
        dots.append(
            rt.parse_to_dot(
                forest,
                in_labels=[f"L{l}.in{i}" for i in range(forest.parent.shape[0])],
                out_labels=[f"L{l}.out{j}" for j in range(forest.n_out)],
                name=f"parse_layer{l}",
            )
        )
        per_iter = ", ".join(f"{h:.4f}" for h in trace.entropy_mean)
        rows.append(
            f"{l:5d}  {trace.iterations:5d}  {trace.n_out:5d}  "
            f"{trace.entropy_mean[-1]:13.6f}  {np.log(trace.n_out):17.6f}  [{per_iter}]"
        )
    label = int(data.labels[split][index])
    acts = ", ".join(f"{a:.4f}" for a in out.class_activations.data[0])
    rows.append(f"sample {index} ({split}), label {label}, activations [{acts}]")
    return "".join(dots), "\n".join(rows) + "\n"
