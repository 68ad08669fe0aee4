"""Dataset generation and bit-exact serialization.

Splits: train and val scenes (balanced face/distractor classes), plus a
probe split of part-swapped faces built only from validation faces so the
probe never sees training content. Images are stored in IDX binary form
(count x H x W unsigned bytes), labels in IDX label form, and per-scene
manifests as one JSON object per line. Regenerating with the same config
and seed is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import grammar as gr

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

FACE_LABEL = 1
DISTRACTOR_LABEL = 0

SPLITS = ("train", "val", "probe")


@dataclass(frozen=True)
class DatasetConfig:
    n_train: int = 2000
    n_val: int = 400
    n_probe: int = 400
    face_fraction: float = 0.5
    canvas: int = 32
    seed: int = 42


@dataclass
class DatasetBundle:
    """In-memory dataset: uint8 images per split, labels, manifests, config."""

    config: DatasetConfig
    images: dict  # split -> uint8 [N, H, W]
    labels: dict  # split -> uint8 [N]
    manifests: dict  # split -> list of manifest dicts

    def images_float(self, split, dtype=np.float64):
        return (self.images[split].astype(dtype) / dtype(255.0))[:, None, :, :]


def quantize(img):
    """Float [0,1] image to uint8 via round(p * 255)."""
    return np.round(np.asarray(img) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# IDX files


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"images must be [N, H, W], got {images.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())


def read_idx_images(path):
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise ValueError(f"{path}: truncated IDX header")
        magic, count, h, w = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(f"{path}: bad image magic 0x{magic:08x}")
        data = fh.read()
    if len(data) != count * h * w:
        raise ValueError(
            f"{path}: expected {count * h * w} pixels, found {len(data)} bytes"
        )
    return np.frombuffer(data, dtype=np.uint8).reshape(count, h, w).copy()


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def read_idx_labels(path):
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise ValueError(f"{path}: truncated IDX header")
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(f"{path}: bad label magic 0x{magic:08x}")
        data = fh.read()
    if len(data) != count:
        raise ValueError(f"{path}: expected {count} labels, found {len(data)} bytes")
    return np.frombuffer(data, dtype=np.uint8).copy()


# ---------------------------------------------------------------------------
# manifests


def manifest_to_record(index, manifest):
    rec = {
        "index": int(index),
        "label": int(manifest.label),
        "parts": [
            {"name": p.name, "glyph": int(p.glyph), "box": [int(v) for v in p.box]}
            for p in manifest.parts
        ],
    }
    if manifest.swap is not None:
        rec["swap"] = [int(v) for v in manifest.swap]
    return rec


def write_manifests(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_manifests(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# generation


def _scene_rng(seed, index):
    return np.random.default_rng(np.random.PCG64(np.random.SeedSequence((seed, index))))


def _labels_for(count, face_fraction):
    n_face = round(count * face_fraction)
    return [FACE_LABEL] * n_face + [DISTRACTOR_LABEL] * (count - n_face)


def generate_dataset(config=None, out_dir=None):
    """Sample all splits; if ``out_dir`` is given, also write the files.

    Each scene draws from its own (seed, global index) random stream, so
    generation is order-independent and reproducible per scene.
    """
    config = config or DatasetConfig()
    face = gr.builtin_face_grammar()
    distractor = gr.builtin_distractor_grammar()
    grammars = {FACE_LABEL: face, DISTRACTOR_LABEL: distractor}

    images = {}
    labels = {}
    manifests = {}
    global_index = 0
    val_faces = []  # (val position, uint8 image, manifest)
    for split, count in (("train", config.n_train), ("val", config.n_val)):
        split_labels = _labels_for(count, config.face_fraction)
        imgs = np.zeros((count, config.canvas, config.canvas), dtype=np.uint8)
        recs = []
        for i, label in enumerate(split_labels):
            rng = _scene_rng(config.seed, global_index)
            img, manifest = gr.sample_scene(
                grammars[label], rng, config.canvas, label=label
            )
            imgs[i] = quantize(img[0])
            recs.append(manifest_to_record(i, manifest))
            if split == "val" and label == FACE_LABEL:
                val_faces.append((i, imgs[i].copy(), manifest))
            global_index += 1
        images[split] = imgs
        labels[split] = np.array(split_labels, dtype=np.uint8)
        manifests[split] = recs

    if config.n_probe and not val_faces:
        raise ValueError("probe split requested but the val split has no faces")
    probe_imgs = np.zeros((config.n_probe, config.canvas, config.canvas), dtype=np.uint8)
    probe_recs = []
    for k in range(config.n_probe):
        _, img_u8, manifest = val_faces[k % len(val_faces)]
        rng = _scene_rng(config.seed, global_index)
        swapped, swapped_manifest = gr.part_swap(
            (img_u8.astype(np.float64) / 255.0)[None], manifest, rng
        )
        probe_imgs[k] = quantize(swapped[0])
        probe_recs.append(manifest_to_record(k, swapped_manifest))
        global_index += 1
    images["probe"] = probe_imgs
    labels["probe"] = np.full(config.n_probe, FACE_LABEL, dtype=np.uint8)
    manifests["probe"] = probe_recs

    bundle = DatasetBundle(config=config, images=images, labels=labels, manifests=manifests)
    if out_dir is not None:
        save_dataset(bundle, out_dir)
    return bundle


def save_dataset(bundle, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        write_idx_images(out / f"{split}-images.idx", bundle.images[split])
        write_idx_labels(out / f"{split}-labels.idx", bundle.labels[split])
        write_manifests(out / f"{split}-manifests.jsonl", bundle.manifests[split])
    with open(out / "config.json", "w") as fh:
        json.dump(asdict(bundle.config), fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_dataset(path):
    root = Path(path)
    cfg_path = root / "config.json"
    if not cfg_path.exists():
        raise ValueError(f"{root}: not a dataset directory (missing config.json)")
    with open(cfg_path) as fh:
        config = DatasetConfig(**json.load(fh))
    images = {}
    labels = {}
    manifests = {}
    for split in SPLITS:
        images[split] = read_idx_images(root / f"{split}-images.idx")
        labels[split] = read_idx_labels(root / f"{split}-labels.idx")
        manifests[split] = read_manifests(root / f"{split}-manifests.jsonl")
        if not (len(images[split]) == len(labels[split]) == len(manifests[split])):
            raise ValueError(
                f"{root}: {split} counts disagree "
                f"({len(images[split])} images, {len(labels[split])} labels, "
                f"{len(manifests[split])} manifests)"
            )
    return DatasetBundle(config=config, images=images, labels=labels, manifests=manifests)
