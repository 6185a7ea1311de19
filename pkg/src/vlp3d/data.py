"""Synthetic dataset directories: one volume file and one report file per case."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import TrainConfig
from .errors import ArgumentError, CorruptFileError
from .reportgen import StructuredReport, Vocab, report_from_text, report_to_text, synth_report
from .volstore import (
    Volume,
    crop,
    generate_phantom,
    normalize_hu,
    read_labels,
    read_volume,
    resample,
    write_labels,
    write_volume,
)

MANIFEST_VERSION = "vlp3d-dataset-1"
SPLITS = ("train", "val", "test", "unpaired")
# disjoint seed ranges per split so that enlarging one split never changes another
_SPLIT_OFFSET = {"train": 0, "val": 1_000_000, "test": 2_000_000, "unpaired": 3_000_000}


@dataclass
class Case:
    case_id: str
    split: str
    labels: np.ndarray
    report: Optional[StructuredReport]
    volume_path: Path


def case_seed(base_seed: int, split: str, index: int) -> int:
    return base_seed + _SPLIT_OFFSET[split] + index


def synth_dataset(out_dir, cfg: TrainConfig) -> Path:
    """Write volumes (raw HU), reports, labels, the vocabulary and a manifest.

    Case i of a split is generated from seed ``cfg.seed + offset(split) + i``,
    so parallel or partial generation reproduces the same files.
    """
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test, "unpaired": cfg.n_unpaired}
    entries, label_rows = [], []
    for split in SPLITS:
        for i in range(counts[split]):
            case_id = f"{split}-{i:05d}"
            seed = case_seed(cfg.seed, split, i)
            vol, gt = generate_phantom(
                seed,
                cfg.catalogue_size,
                cfg.phantom_shape,
                cfg.lesion_count_range,
                (cfg.phantom_spacing_mm,) * 3,
            )
            write_volume(out / "volumes" / f"{case_id}.vol", vol)
            entry = {"case_id": case_id, "split": split, "volume": f"volumes/{case_id}.vol", "seed": seed}
            if split != "unpaired":
                report = synth_report(gt.labels, seed)
                (out / "reports" / f"{case_id}.txt").write_text(report_to_text(report), encoding="utf-8")
                entry["report"] = f"reports/{case_id}.txt"
            entries.append(entry)
            label_rows.append((case_id, gt.labels))
    write_labels(out / "labels.csv", label_rows)
    Vocab.build().save(out / "vocab.txt")
    manifest = {
        "version": MANIFEST_VERSION,
        "code_version": __version__,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "catalogue_size": cfg.catalogue_size,
        "cases": entries,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return out


class Dataset:
    """Read-only view of a synthesized dataset directory with a preprocessing cache."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise ArgumentError(f"{self.root} holds no manifest.json")
        manifest = json.loads(path.read_text(encoding="utf-8"))
        if manifest.get("version") != MANIFEST_VERSION:
            raise CorruptFileError(f"{path}: unsupported manifest version {manifest.get('version')!r}")
        self.manifest = manifest
        self.catalogue_size = int(manifest["catalogue_size"])
        labels = read_labels(self.root / "labels.csv")
        self.vocab = Vocab.load(self.root / "vocab.txt")
        self.cases: list[Case] = []
        for e in manifest["cases"]:
            report = None
            if "report" in e:
                report = report_from_text((self.root / e["report"]).read_text(encoding="utf-8"))
            if e["case_id"] not in labels:
                raise CorruptFileError(f"labels.csv lacks case {e['case_id']}")
            self.cases.append(Case(e["case_id"], e["split"], labels[e["case_id"]], report, self.root / e["volume"]))
        self._cache: dict = {}

    def split(self, name: str) -> list[Case]:
        return [c for c in self.cases if c.split == name]

    def volume(self, case: Case, spacing_mm: float) -> Volume:
        """Normalized volume resampled to isotropic ``spacing_mm`` (cached)."""
        key = (case.case_id, float(spacing_mm))
        if key not in self._cache:
            v = normalize_hu(read_volume(case.volume_path))
            self._cache[key] = resample(v, (spacing_mm,) * 3)
        return self._cache[key]

    def center_crops(self, cases, spacing_mm: float, size) -> np.ndarray:
        return np.stack([crop(self.volume(c, spacing_mm), size, "center").data for c in cases])

    def labels(self, cases) -> np.ndarray:
        return np.stack([c.labels for c in cases])
