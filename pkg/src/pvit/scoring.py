"""Confidence scores for OOD detection.

The composite score is the product of a base confidence (negative
energy, i.e. the logsumexp of the predicted logits) and a guidance term
measuring prior/prediction divergence: cross-entropy of the predicted
class under the prior distribution (CE), KL divergence from prior to
prediction (KL), or the Euclidean distance between the raw logit
vectors (ED).  MSP, MaxLogit and negative energy ride along as
baselines on the predicted logits.

Probabilities are clamped at 1e-12 before any log: near-one-hot priors
otherwise send -log q to infinity and poison downstream AUROC.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import FormatError, MissingPriorError, ShapeError
from .priors import PriorSource, TableSource, priors_for_indices

PROB_CLAMP = 1e-12

GUIDANCE_KINDS = ("ce", "kl", "ed")


@dataclass
class ScoreRecord:
    """Per-sample scores; ``pge`` is exactly ``base * guidance``."""

    id: str
    base: float
    guidance: float
    pge: float
    predicted_class: int
    baselines: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class DecisionRule:
    """Threshold rule: oriented score >= gamma means in-distribution."""

    threshold: float
    orientation: str = "as-is"  # as-is | negated


def _finite(z: np.ndarray, what: str) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ShapeError(f"{what} must be finite")
    return z


def _lse(z: np.ndarray) -> float:
    m = float(z.max())
    return m + float(np.log(np.exp(z - m).sum()))


def energy(logits) -> float:
    """Negative logsumexp of the logits; low for confident predictions."""
    z = _finite(logits, "logits")
    return -_lse(z)


def base_score(logits) -> float:
    """Negative energy: the logsumexp itself, higher for confident rows."""
    return -energy(logits)


def msp(logits) -> float:
    """Maximum softmax probability."""
    z = _finite(logits, "logits")
    e = np.exp(z - z.max())
    return float((e / e.sum()).max())


def max_logit(logits) -> float:
    """Largest raw logit."""
    return float(_finite(logits, "logits").max())


def _softmax_clamped(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return np.maximum(e / e.sum(), PROB_CLAMP)


def guidance_ce(prior_logits, predicted_class: int) -> float:
    """-log of the prior probability assigned to the predicted class."""
    p = _finite(prior_logits, "prior logits")
    k = int(predicted_class)
    if not 0 <= k < len(p):
        raise ShapeError(f"predicted class {k} out of range [0, {len(p)})")
    return float(-np.log(_softmax_clamped(p)[k]))


def guidance_kl(prior_logits, predicted_logits) -> float:
    """KL(prior distribution || predicted distribution), both clamped."""
    p = _finite(prior_logits, "prior logits")
    q = _finite(predicted_logits, "predicted logits")
    if p.shape != q.shape:
        raise ShapeError(f"logit vectors disagree in length: {p.shape} vs {q.shape}")
    pp = _softmax_clamped(p)
    qq = _softmax_clamped(q)
    return float(np.sum(pp * np.log(pp / qq)))


def guidance_ed(prior_logits, predicted_logits) -> float:
    """Euclidean distance between the raw logit vectors."""
    p = _finite(prior_logits, "prior logits")
    q = _finite(predicted_logits, "predicted logits")
    if p.shape != q.shape:
        raise ShapeError(f"logit vectors disagree in length: {p.shape} vs {q.shape}")
    return float(np.sqrt(np.sum((p - q) ** 2)))


def pge(base: float, guidance: float) -> float:
    """Exact product of the base confidence and the guidance term."""
    return base * guidance


def cefe_expand(z, k: int) -> tuple[float, float]:
    """Both sides of the score expansion identity for logits ``z``, class ``k``:
    (-z_k + LSE) * LSE must equal -z_k * LSE + LSE^2."""
    z = _finite(z, "logits")
    if not 0 <= k < len(z):
        raise ShapeError(f"class {k} out of range [0, {len(z)})")
    lse = _lse(z)
    factored = (-float(z[k]) + lse) * lse
    expanded = -float(z[k]) * lse + lse * lse
    return factored, expanded


def decide(score: float, rule: DecisionRule) -> str:
    """'ID' when the oriented score clears the threshold, else 'OOD'."""
    if not np.isfinite(score):
        raise ShapeError("decide needs a finite score")
    oriented = -score if rule.orientation == "negated" else score
    return "ID" if oriented >= rule.threshold else "OOD"


def _guidance_value(kind: str, prior_row: np.ndarray, pred_row: np.ndarray, pred_class: int) -> float:
    if kind == "ce":
        return guidance_ce(prior_row, pred_class)
    if kind == "kl":
        return guidance_kl(prior_row, pred_row)
    if kind == "ed":
        return guidance_ed(prior_row, pred_row)
    raise FormatError(f"unknown guidance kind {kind!r}; expected one of {GUIDANCE_KINDS}")


def _record_from_rows(sid: str, pred_row: np.ndarray, prior_row: np.ndarray, kind: str) -> ScoreRecord:
    pred_class = int(np.argmax(pred_row))
    base = base_score(pred_row)
    guidance = _guidance_value(kind, prior_row, pred_row, pred_class)
    return ScoreRecord(
        id=sid,
        base=base,
        guidance=guidance,
        pge=pge(base, guidance),
        predicted_class=pred_class,
        baselines={
            "msp": msp(pred_row),
            "max_logit": max_logit(pred_row),
            # oriented so that higher means in-distribution
            "energy": -energy(pred_row),
        },
    )


def score_dataset(
    model,
    prior_source: PriorSource,
    dataset: Optional[Dataset],
    guidance_kind: str = "ce",
    alpha: Optional[float] = None,
    batch_size: int = 64,
) -> list[ScoreRecord]:
    """Score every sample: transformer forward, then base/guidance/composite.

    ``model`` may instead be a loaded logits table (:class:`TableSource`),
    in which case predicted logits come from the table by sample id and no
    forward pass runs; with ``dataset`` None the table's own record order
    defines the samples.  That path drives the no-prior-token ablation
    from two logits files alone.
    """
    if guidance_kind not in GUIDANCE_KINDS:
        raise FormatError(f"unknown guidance kind {guidance_kind!r}; expected one of {GUIDANCE_KINDS}")
    records: list[ScoreRecord] = []
    if isinstance(model, TableSource):
        if dataset is None:
            sample_ids = list(model.records)
        else:
            sample_ids = list(dataset.ids)
        prior_table = prior_source
        if not isinstance(prior_table, TableSource):
            raise FormatError("logits-table scoring needs a table prior source")
        for sid in sample_ids:
            pred = model.records.get(sid)
            if pred is None:
                raise MissingPriorError(f"no predicted logits for sample id {sid!r}")
            prior = prior_table.records.get(sid)
            if prior is None:
                raise MissingPriorError(f"no prior logits for sample id {sid!r}")
            records.append(
                _record_from_rows(sid, np.asarray(pred.logits), np.asarray(prior.logits), guidance_kind)
            )
        return records

    if dataset is None:
        raise FormatError("model scoring needs a dataset")
    n = len(dataset)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        priors = priors_for_indices(prior_source, dataset, idx)
        out = model.forward_batch(dataset.images[idx], priors, alpha)
        for j, i in enumerate(idx):
            records.append(
                _record_from_rows(dataset.ids[int(i)], out.logits.data[j], priors[j], guidance_kind)
            )
    return records


# ---------------------------------------------------------------------------
# score file round trip


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_scores(path: str, records: list[ScoreRecord], guidance_kind: str, alpha: float, checkpoint_hash: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {"guidance": guidance_kind, "alpha": float(alpha), "checkpoint_sha256": checkpoint_hash}
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "id": rec.id,
                        "base": rec.base,
                        "guidance": rec.guidance,
                        "pge": rec.pge,
                        "predicted_class": rec.predicted_class,
                        "baselines": rec.baselines,
                    }
                )
                + "\n"
            )


def read_scores(path: str) -> tuple[dict, list[ScoreRecord]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty score file")
    header = json.loads(lines[0])
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            records.append(
                ScoreRecord(
                    id=obj["id"],
                    base=obj["base"],
                    guidance=obj["guidance"],
                    pge=obj["pge"],
                    predicted_class=obj["predicted_class"],
                    baselines=obj["baselines"],
                )
            )
        except (json.JSONDecodeError, KeyError) as exc:
            raise FormatError(f"{path}:{lineno}: malformed score line: {exc}") from None
    return header, records


def score_field(record: ScoreRecord, name: str) -> float:
    """Extract a named score from a record; baseline names included."""
    if name in ("pge", "base", "guidance"):
        return getattr(record, name)
    if name in record.baselines:
        return record.baselines[name]
    raise FormatError(f"unknown score field {name!r}")
