"""Trajectory records, quality labels, and the JSONL dataset manifest.

A dataset directory looks like::

    data/<name>/manifest.jsonl
    data/<name>/stacks/*.atnp
    data/<name>/images/*.pgm        (optional, 8-bit portable graymap)

The manifest's first line is a header object with the format version; every
following line describes one (trajectory, capture step) pair: the stack
file it points at, the stack metadata needed to rehydrate it, prompt,
seed, labels, and the train/test split tag.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .errors import FormatError
from .stackio import AttentionStack, read_stack

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"

PROVENANCES = ("synthetic-known", "programmatic", "external")


@dataclass(frozen=True)
class QualityLabel:
    metric_name: str
    value: float
    provenance: str = "programmatic"

    def __post_init__(self):
        if not self.metric_name:
            raise ValueError("metric_name must be nonempty")
        if not np.isfinite(self.value):
            raise ValueError("label value must be finite")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def to_json(self) -> dict:
        return {"metric": self.metric_name, "value": self.value, "provenance": self.provenance}

    @classmethod
    def from_json(cls, d: dict) -> "QualityLabel":
        return cls(d["metric"], float(d["value"]), d["provenance"])


@dataclass(frozen=True)
class TrajectoryRecord:
    """One (prompt, seed) generation with its captured stacks and labels."""

    prompt_id: str
    prompt_tokens: tuple[str, ...]
    prompt_text: str
    seed: int
    total_steps: int
    capture_step: int
    stacks: tuple[AttentionStack, ...]
    final_image: Optional[np.ndarray] = None
    labels: tuple[QualityLabel, ...] = ()
    scene: Optional[dict] = None

    def validate(self) -> None:
        if self.capture_step > self.total_steps:
            raise ValueError("capture step exceeds total steps")
        for s in self.stacks:
            if (s.prompt_id, s.seed) != (self.prompt_id, self.seed):
                raise ValueError("stack identity does not match its record")
        if self.final_image is not None:
            img = np.asarray(self.final_image)
            if img.min() < 0 or img.max() > 1:
                raise ValueError("final image values must lie in [0, 1]")

    def stack_at(self, step: int) -> AttentionStack:
        for s in self.stacks:
            if s.step == step:
                return s
        raise KeyError(f"record {self.prompt_id}/{self.seed} has no stack at step {step}")

    def label_value(self, metric_name: str | None = None) -> float:
        if not self.labels:
            raise KeyError(f"record {self.prompt_id}/{self.seed} carries no labels")
        if metric_name is None:
            return self.labels[0].value
        for lab in self.labels:
            if lab.metric_name == metric_name:
                return lab.value
        raise KeyError(f"no label named {metric_name!r}")


@dataclass
class ManifestRecord:
    """One manifest line: a stack file plus everything needed to load it."""

    path: str
    prompt_id: str
    prompt_tokens: list[str]
    prompt_text: str
    seed: int
    step: int
    total_steps: int
    block_ids: list[int]
    n_real_tokens: int
    normalized: bool
    labels: list[QualityLabel]
    split: str
    image: Optional[str] = None
    scene: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {
            "path": self.path,
            "prompt_id": self.prompt_id,
            "prompt_tokens": self.prompt_tokens,
            "prompt_text": self.prompt_text,
            "seed": self.seed,
            "step": self.step,
            "total_steps": self.total_steps,
            "block_ids": self.block_ids,
            "n_real_tokens": self.n_real_tokens,
            "normalized": self.normalized,
            "labels": [lab.to_json() for lab in self.labels],
            "split": self.split,
        }
        if self.image is not None:
            d["image"] = self.image
        if self.scene is not None:
            d["scene"] = self.scene
        if self.extra:
            d["extra"] = self.extra
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ManifestRecord":
        return cls(
            path=d["path"],
            prompt_id=d["prompt_id"],
            prompt_tokens=list(d["prompt_tokens"]),
            prompt_text=d["prompt_text"],
            seed=int(d["seed"]),
            step=int(d["step"]),
            total_steps=int(d["total_steps"]),
            block_ids=[int(b) for b in d["block_ids"]],
            n_real_tokens=int(d["n_real_tokens"]),
            normalized=bool(d["normalized"]),
            labels=[QualityLabel.from_json(x) for x in d["labels"]],
            split=d["split"],
            image=d.get("image"),
            scene=d.get("scene"),
            extra=d.get("extra", {}),
        )


class DatasetManifest:
    """Ordered collection of manifest records rooted at a dataset directory."""

    def __init__(self, root: str | Path, records: Iterable[ManifestRecord] = ()):
        self.root = Path(root)
        self.records: list[ManifestRecord] = list(records)

    def append(self, record: ManifestRecord) -> None:
        self.records.append(record)

    def validate(self) -> None:
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest stack paths are not unique")
        bad = {r.split for r in self.records} - {"train", "test"}
        if bad:
            raise ValueError(f"unknown split tags: {sorted(bad)}")

    def select(self, split: str | None = None, step: int | None = None) -> list[ManifestRecord]:
        out = self.records
        if split is not None:
            out = [r for r in out if r.split == split]
        if step is not None:
            out = [r for r in out if r.step == step]
        return out

    def load_stack(self, record: ManifestRecord) -> AttentionStack:
        stack = read_stack(
            self.root / record.path,
            prompt_id=record.prompt_id,
            seed=record.seed,
            step=record.step,
            total_steps=record.total_steps,
            block_ids=tuple(record.block_ids),
            normalized=record.normalized,
        )
        mask = np.zeros(stack.n_token_slots, dtype=bool)
        mask[: record.n_real_tokens] = True
        return AttentionStack(
            prompt_id=stack.prompt_id,
            seed=stack.seed,
            step=stack.step,
            total_steps=stack.total_steps,
            block_ids=stack.block_ids,
            maps=stack.maps,
            token_mask=mask,
            normalized=stack.normalized,
        )

    def load_record(self, record: ManifestRecord) -> TrajectoryRecord:
        stack = self.load_stack(record)
        image = None
        if record.image is not None:
            image = read_pgm(self.root / record.image)
        return TrajectoryRecord(
            prompt_id=record.prompt_id,
            prompt_tokens=tuple(record.prompt_tokens),
            prompt_text=record.prompt_text,
            seed=record.seed,
            total_steps=record.total_steps,
            capture_step=record.step,
            stacks=(stack,),
            final_image=image,
            labels=tuple(record.labels),
            scene=record.scene,
        )

    def iter_records(self, split: str | None = None, step: int | None = None) -> Iterator[TrajectoryRecord]:
        for rec in self.select(split, step):
            yield self.load_record(rec)

    def save(self, path: str | Path | None = None) -> Path:
        self.validate()
        target = Path(path) if path is not None else self.root / MANIFEST_NAME
        with open(target, "w", encoding="utf-8") as f:
            header = {"format": "attnprobe-manifest", "version": MANIFEST_VERSION}
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in self.records:
                f.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
        return target

    @classmethod
    def load(cls, root: str | Path) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME if root.is_dir() else root
        if root.is_file():
            root = root.parent
        with open(path, encoding="utf-8") as f:
            lines = [ln for ln in f.read().splitlines() if ln.strip()]
        if not lines:
            raise FormatError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if header.get("format") != "attnprobe-manifest":
            raise FormatError(f"{path}: not an attnprobe manifest")
        if header.get("version") != MANIFEST_VERSION:
            raise FormatError(f"{path}: unsupported manifest version {header.get('version')}")
        manifest = cls(root, (ManifestRecord.from_json(json.loads(ln)) for ln in lines[1:]))
        manifest.validate()
        return manifest


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write a [0,1] grayscale array as binary PGM (P5, maxval 255)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export expects a 2-D grayscale image")
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(x) for x in fields)
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=pos, count=h * w)
    return pixels.reshape(h, w).astype(np.float64) / float(maxval)
