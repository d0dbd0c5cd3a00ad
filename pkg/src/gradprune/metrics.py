"""Clean accuracy (ACC), attack success rate (ASR) and recovery accuracy (RA)."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional

import numpy as np

from .data import LabeledDataset, TriggerSpec
from .errors import InputError
from .models import Model

CSV_COLUMNS = ("stage", "trial", "spc", "attack", "defense", "acc", "asr", "ra")


def predict(model, images: np.ndarray) -> np.ndarray:
    """Class predictions from a Model, an object with ``predict`` or a plain callable."""
    if isinstance(model, Model) or hasattr(model, "predict"):
        return np.asarray(model.predict(images))
    if callable(model):
        return np.asarray(model(images))
    raise InputError(f"cannot predict with {type(model).__name__}")


def _triggered_population(clean_test: LabeledDataset, trig: TriggerSpec):
    keep = clean_test.labels != trig.target
    if not keep.any():
        raise InputError("every test sample belongs to the target class; ASR/RA undefined")
    return trig.apply(clean_test.images[keep]), clean_test.labels[keep]


def eval_acc(model, clean_test: LabeledDataset) -> float:
    if len(clean_test) == 0:
        raise InputError("empty test set")
    return float(np.mean(predict(model, clean_test.images) == clean_test.labels))


def eval_asr(model, clean_test: LabeledDataset, trig: TriggerSpec) -> float:
    """Share of triggered non-target test images classified as the target."""
    images, _ = _triggered_population(clean_test, trig)
    return float(np.mean(predict(model, images) == trig.target))


def eval_ra(model, clean_test: LabeledDataset, trig: TriggerSpec) -> float:
    """Share of triggered non-target test images classified as their true label."""
    images, labels = _triggered_population(clean_test, trig)
    return float(np.mean(predict(model, images) == labels))


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    asr: float
    ra: float
    n_clean_eval: int
    n_trigger_eval: int
    stage: str = ""
    trial: int = 0
    seed: int = 0
    spc: int = 0
    attack: str = ""
    defense: str = ""

    def __post_init__(self):
        for name in ("acc", "asr", "ra"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InputError(f"{name}={value} outside [0, 1]")
        if self.asr + self.ra > 1.0 + 1e-12:
            raise InputError(f"ASR + RA = {self.asr + self.ra} exceeds 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricsReport":
        return cls(**json.loads(line))

    def csv_row(self) -> dict:
        return {col: getattr(self, col) for col in CSV_COLUMNS}


def evaluate(model, clean_test: LabeledDataset, trig: TriggerSpec, **tags) -> MetricsReport:
    """All three rates on one test set; ASR and RA share the non-target population."""
    preds_clean = predict(model, clean_test.images)
    images, labels = _triggered_population(clean_test, trig)
    preds_trig = predict(model, images)
    asr_hits = int(np.sum(preds_trig == trig.target))
    ra_hits = int(np.sum(preds_trig == labels))
    n = len(labels)
    return MetricsReport(
        acc=float(np.mean(preds_clean == clean_test.labels)),
        asr=asr_hits / n,
        ra=ra_hits / n,
        n_clean_eval=len(clean_test),
        n_trigger_eval=n,
        **tags,
    )


def reports_to_jsonl(reports: Iterable[MetricsReport]) -> str:
    return "".join(r.to_json() + "\n" for r in reports)


def reports_to_csv(reports: Iterable[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.csv_row().items()})
    return buf.getvalue()


def read_jsonl(text: str) -> List[MetricsReport]:
    return [MetricsReport.from_json(line) for line in text.splitlines() if line.strip()]
