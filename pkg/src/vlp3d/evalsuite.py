"""Evaluation protocols: retrieval recall, ranking metrics, the linear-probe grid and zero-shot classification."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import average_precision_score, roc_auc_score

from .encoders import POOL_SCHEMES, Pool, PoolingSpec, TextEncoder, VisionEncoder, batch_token_sequences
from .errors import ArgumentError, ContractViolationError, UndefinedMetricError
from .reportgen import CATALOGUE, render_report, tokenize, zero_shot_prompts

log = logging.getLogger(__name__)

METRICS_SCHEMA = "vlp3d-metrics-1"
PROTOCOLS = ("retrieval", "probe", "zeroshot-native", "zeroshot-short")
PROBE_LRS = (1e-1, 3e-2, 1e-2, 3e-3)
PROBE_MOMENTUM = 0.95


# --- retrieval --------------------------------------------------------------------


def recall_at_k(sim, k: int, query: str = "text") -> float:
    """Fraction of paired queries whose partner ranks in the top ``k``.

    ``sim`` is (images x texts) with pairs on the diagonal. ``query="text"``
    ranks the images for each report (column-wise); ``query="image"`` ranks
    the reports for each image (row-wise). Equal similarities are ordered by
    ascending candidate index.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.size == 0:
        raise ArgumentError("similarity matrix must be a non-empty 2D array")
    if sim.shape[0] != sim.shape[1]:
        raise ArgumentError(f"paired retrieval needs a square matrix, got {sim.shape}")
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    if not np.isfinite(sim).all():
        raise ArgumentError("similarity matrix has non-finite entries")
    if query not in ("text", "image"):
        raise ArgumentError(f"query must be 'text' or 'image', got {query!r}")
    if query == "text":
        sim = sim.T
    n = sim.shape[0]
    diag = np.diag(sim)[:, None]
    cols = np.arange(n)[None, :]
    rows = np.arange(n)[:, None]
    rank = (sim > diag).sum(axis=1) + ((sim == diag) & (cols < rows)).sum(axis=1)
    return float(np.mean(rank < k))


# --- ranking metrics --------------------------------------------------------------


def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ArgumentError(f"scores {s.shape} and labels {y.shape} differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ArgumentError("labels must be 0/1")
    return s, y.astype(np.int64)


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    s, y = _binary(scores, labels)
    if y.min(initial=1) == y.max(initial=0) or y.size == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    return float(roc_auc_score(y, s))


def auprc(scores, labels) -> float:
    """Average precision; tied scores enter as one threshold."""
    s, y = _binary(scores, labels)
    if y.sum() == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    return float(average_precision_score(y, s))


@dataclass(frozen=True)
class ClassScores:
    f1: float
    balanced_accuracy: float
    flags: tuple[str, ...] = ()


def _safe_div(num: float, den: float, name: str, flags: list) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def f1_and_balanced_accuracy(scores, labels, threshold: float) -> ClassScores:
    """F1 and balanced accuracy when predicting positive for ``score > threshold``.

    Undefined rates (zero denominators) count as 0 and are named in ``flags``.
    """
    s, y = _binary(scores, labels)
    pred = s > threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    flags: list[str] = []
    precision = _safe_div(tp, tp + fp, "precision", flags)
    tpr = _safe_div(tp, tp + fn, "tpr", flags)
    tnr = _safe_div(tn, tn + fp, "tnr", flags)
    f1 = 0.0 if precision + tpr == 0 else 2 * precision * tpr / (precision + tpr)
    return ClassScores(f1, 0.5 * (tpr + tnr), tuple(flags))


def threshold_candidates(scores) -> np.ndarray:
    """-inf, midpoints between adjacent sorted unique scores, +inf (ascending)."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    return np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2, [np.inf]])


@dataclass(frozen=True)
class Thresholds:
    values: np.ndarray
    f1: np.ndarray
    no_positive: tuple[int, ...]


def pick_thresholds(scores, labels) -> Thresholds:
    """Per-class F1-optimal threshold; ties resolve to the lower threshold.

    ``scores`` and ``labels`` are (N, C). A class without positives gets the
    +inf sentinel (predict all-negative) and is listed in ``no_positive``.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    if s.shape != y.shape:
        raise ArgumentError(f"scores {s.shape} and labels {y.shape} differ")
    values, f1s, missing = [], [], []
    for c in range(s.shape[1]):
        if y[:, c].sum() == 0:
            values.append(np.inf)
            f1s.append(0.0)
            missing.append(c)
            continue
        best_t, best_f1 = np.inf, -1.0
        for t in threshold_candidates(s[:, c]):
            f1 = f1_and_balanced_accuracy(s[:, c], y[:, c], t).f1
            if f1 > best_f1:  # ascending scan, strict: the lowest maximizer wins
                best_t, best_f1 = t, f1
        values.append(best_t)
        f1s.append(best_f1)
    return Thresholds(np.array(values), np.array(f1s), tuple(missing))


@dataclass(frozen=True)
class ClassificationSummary:
    auroc: np.ndarray
    auprc: np.ndarray
    f1: np.ndarray
    balanced_accuracy: np.ndarray
    undefined: tuple[int, ...]

    def macro(self) -> dict[str, float]:
        return {
            name: float(np.nanmean(getattr(self, name))) if np.isfinite(getattr(self, name)).any() else float("nan")
            for name in ("auroc", "auprc", "f1", "balanced_accuracy")
        }


def classification_summary(scores, labels, thresholds=None, rank_scores=None,
                           exclude: Sequence[int] = ()) -> ClassificationSummary:
    """Per-class AUROC/AUPRC (on ``rank_scores`` if given) and F1/BA at ``thresholds``.

    Classes that are single-class in ``labels`` or listed in ``exclude`` are
    NaN for every metric and reported in ``undefined``.
    """
    s = np.asarray(scores, dtype=np.float64)
    r = s if rank_scores is None else np.asarray(rank_scores, dtype=np.float64)
    y = np.asarray(labels)
    n_cls = s.shape[1]
    out = {k: np.full(n_cls, np.nan) for k in ("auroc", "auprc", "f1", "balanced_accuracy")}
    undefined = []
    for c in range(n_cls):
        pos = int(y[:, c].sum())
        if c in exclude or pos == 0 or pos == len(y):
            undefined.append(c)
            continue
        out["auroc"][c] = auroc(r[:, c], y[:, c])
        out["auprc"][c] = auprc(r[:, c], y[:, c])
        if thresholds is not None:
            cs = f1_and_balanced_accuracy(s[:, c], y[:, c], thresholds[c])
            out["f1"][c], out["balanced_accuracy"][c] = cs.f1, cs.balanced_accuracy
    return ClassificationSummary(**out, undefined=tuple(undefined))


# --- metrics report ---------------------------------------------------------------


@dataclass
class MetricsReport:
    """One protocol's metric values, each in [0, 1]."""

    protocol: str
    metrics: dict[str, float]
    dataset: str
    config: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    schema: str = METRICS_SCHEMA

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ArgumentError(f"unknown protocol {self.protocol!r}")
        for name, value in self.metrics.items():
            if not (math.isfinite(value) and 0.0 <= value <= 1.0):
                raise ContractViolationError(f"metric {name}={value} is not a finite value in [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True, default=_json_default)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def percent(self) -> dict[str, float]:
        return {k: 100.0 * v for k, v in self.metrics.items()}


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return [None if not np.isfinite(x) else float(x) for x in v.ravel()]
    raise TypeError(f"not serializable: {type(v)}")


def _finite_list(a) -> list:
    return [None if not np.isfinite(x) else float(x) for x in np.asarray(a, dtype=np.float64)]


# --- embedding helpers ------------------------------------------------------------


@torch.no_grad()
def encode_volumes(encoder: VisionEncoder, arrays: np.ndarray, batch_size: int = 8):
    """(dense tokens, pooled) for an (N, X, Y, Z) stack, in eval mode."""
    was_training = encoder.training
    encoder.eval()
    dense, pooled = [], []
    for i in range(0, len(arrays), batch_size):
        out = encoder(torch.as_tensor(arrays[i:i + batch_size]))
        dense.append(out.dense_tokens)
        pooled.append(out.pooled)
    encoder.train(was_training)
    return torch.cat(dense), torch.cat(pooled)


@torch.no_grad()
def encode_texts(encoder: TextEncoder, texts: Sequence[str], vocab, max_len: int, batch_size: int = 16):
    was_training = encoder.training
    encoder.eval()
    pooled = []
    for i in range(0, len(texts), batch_size):
        ids, mask = batch_token_sequences([tokenize(t, vocab, max_len) for t in texts[i:i + batch_size]])
        pooled.append(encoder(ids, mask).pooled)
    encoder.train(was_training)
    return torch.cat(pooled)


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --- linear probes ----------------------------------------------------------------


@dataclass
class ProbeResult:
    scheme: str
    lr: float
    val_auprc: np.ndarray
    val_auroc: np.ndarray
    mean_val_auprc: float
    selected: bool = False
    thresholds: Optional[np.ndarray] = None
    diverged: bool = False
    head: Optional[nn.Module] = field(default=None, repr=False)

    def summary(self) -> dict:
        return {"scheme": self.scheme, "lr": self.lr, "mean_val_auprc": self.mean_val_auprc,
                "selected": self.selected, "diverged": self.diverged,
                "val_auprc": _finite_list(self.val_auprc), "val_auroc": _finite_list(self.val_auroc)}


class ProbeHead(nn.Module):
    """Pooling followed by a linear multi-label classifier."""

    def __init__(self, dim: int, n_classes: int, spec: PoolingSpec):
        super().__init__()
        self.pool = Pool(dim, spec)
        self.linear = nn.Linear(dim, n_classes)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.linear(self.pool(tokens))


def probe_grid_specs(heads: int = 12, query_count: int = 4) -> list[tuple[PoolingSpec, float]]:
    """The 20 (scheme, learning rate) pairs in selection tie-break order."""
    return [(PoolingSpec.make(s, heads, query_count), lr) for s in POOL_SCHEMES for lr in PROBE_LRS]


@torch.no_grad()
def _probe_scores(head: ProbeHead, tokens: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    head.eval()
    out = [torch.sigmoid(head(tokens[i:i + batch_size])) for i in range(0, len(tokens), batch_size)]
    return torch.cat(out).double().numpy()


def train_probe_grid_on_tokens(
    train_tokens: torch.Tensor,
    train_labels,
    val_tokens: torch.Tensor,
    val_labels,
    steps: int = 2000,
    batch_size: int = 16,
    seed: int = 0,
    heads: int = 12,
    query_count: int = 4,
) -> list[ProbeResult]:
    """Fit all 20 probes on fixed token sets; exactly one result is ``selected``.

    Every probe sees the same minibatch sequence. Selection maximizes the mean
    validation AUPRC over classes that have validation positives; the first
    probe in :func:`probe_grid_specs` order wins ties, and a probe whose
    loss became non-finite scores 0.
    """
    if steps < 1 or batch_size < 1:
        raise ArgumentError("probe steps and batch size must be positive")
    y_train = torch.as_tensor(np.asarray(train_labels), dtype=torch.float32)
    y_val = np.asarray(val_labels)
    n, dim = train_tokens.shape[0], train_tokens.shape[-1]
    n_cls = y_train.shape[1]
    train_tokens = train_tokens.detach().float()
    val_tokens = val_tokens.detach().float()
    specs = probe_grid_specs(heads, query_count)
    torch.manual_seed(seed)
    heads_ = [ProbeHead(dim, n_cls, spec) for spec, _ in specs]
    opts = [torch.optim.SGD(h.parameters(), lr=lr, momentum=PROBE_MOMENTUM, weight_decay=0.0)
            for h, (_, lr) in zip(heads_, specs)]
    scheds = [torch.optim.lr_scheduler.CosineAnnealingLR(o, T_max=steps) for o in opts]
    alive = [True] * len(specs)
    rng = np.random.default_rng([seed, 7])
    for _ in range(steps):
        idx = torch.as_tensor(rng.choice(n, size=min(batch_size, n), replace=False))
        xb, yb = train_tokens[idx], y_train[idx]
        for j, (head, opt, sched) in enumerate(zip(heads_, opts, scheds)):
            if alive[j]:
                head.train()
                loss = F.binary_cross_entropy_with_logits(head(xb), yb)
                if not bool(torch.isfinite(loss)):
                    alive[j] = False
                else:
                    opt.zero_grad(set_to_none=True)
                    loss.backward()
                    opt.step()
            sched.step()
    results = []
    for (spec, lr), head, ok in zip(specs, heads_, alive):
        scores = _probe_scores(head, val_tokens)
        ok = ok and bool(np.isfinite(scores).all())
        if ok:
            summary = classification_summary(scores, y_val)
            mean = summary.macro()["auprc"]
            mean = 0.0 if not np.isfinite(mean) else mean
            res = ProbeResult(spec.scheme, lr, summary.auprc, summary.auroc, mean, head=head)
        else:
            nan = np.full(n_cls, np.nan)
            res = ProbeResult(spec.scheme, lr, nan, nan, 0.0, diverged=True, head=head)
        results.append(res)
    best = max(range(len(results)), key=lambda i: (results[i].mean_val_auprc, -i))
    chosen = results[best]
    chosen.selected = True
    if not chosen.diverged:
        chosen.thresholds = pick_thresholds(_probe_scores(chosen.head, val_tokens), y_val).values
    else:
        chosen.thresholds = np.full(n_cls, np.inf)
    return results


def train_probe_grid(encoder: VisionEncoder, train_x: np.ndarray, train_labels, val_x: np.ndarray, val_labels,
                     steps: int = 2000, batch_size: int = 16, seed: int = 0, heads: int = 12,
                     query_count: int = 4) -> list[ProbeResult]:
    """Probe grid on a frozen vision encoder over (N, X, Y, Z) center crops.

    Raises ContractViolationError if the encoder's parameters change.
    """
    before = parameter_digest(encoder)
    train_tokens, _ = encode_volumes(encoder, train_x)
    val_tokens, _ = encode_volumes(encoder, val_x)
    results = train_probe_grid_on_tokens(train_tokens, train_labels, val_tokens, val_labels, steps, batch_size,
                                         seed, heads, query_count)
    if parameter_digest(encoder) != before:
        raise ContractViolationError("vision encoder parameters changed during probe training")
    return results


def selected_probe(results: Sequence[ProbeResult]) -> ProbeResult:
    chosen = [r for r in results if r.selected]
    if len(chosen) != 1:
        raise ContractViolationError(f"expected exactly one selected probe, found {len(chosen)}")
    return chosen[0]


# --- zero-shot --------------------------------------------------------------------


@dataclass(frozen=True)
class ZeroShotResult:
    """``scores``: positive-anchor softmax probability; ``margins``: cos_pos - cos_neg."""

    scores: np.ndarray
    margins: np.ndarray
    undefined: tuple[int, ...]
    reference_counts: tuple[tuple[int, int], ...] = ()


def native_reference_texts(references: Sequence[tuple[str, np.ndarray, str]], n_classes: int, k: int):
    """First ``k`` positive and negative report texts per class, by case id.

    ``references`` holds (case_id, labels, report text) triples.
    """
    refs = sorted(references, key=lambda r: r[0])
    out = []
    for c in range(n_classes):
        pos = [t for _, y, t in refs if y[c] == 1][:k]
        neg = [t for _, y, t in refs if y[c] == 0][:k]
        out.append((pos, neg))
    return out


def zero_shot_classify(
    image_embeddings,
    text_tower: TextEncoder,
    vocab,
    catalogue_names: Sequence[str],
    mode: str,
    reference_reports: Optional[Sequence[tuple[str, np.ndarray, str]]] = None,
    temperature: float = 0.07,
    k: int = 50,
    max_len: int = 160,
) -> ZeroShotResult:
    """Score each image against a positive and a negative anchor per class.

    native: anchors average the embeddings of reference reports with and
    without the class; short: anchors embed the two prompt sentences.
    """
    if mode not in ("native", "short"):
        raise ArgumentError(f"unknown zero-shot mode {mode!r}")
    if temperature <= 0:
        raise ArgumentError("temperature must be positive")
    img = F.normalize(torch.as_tensor(image_embeddings).double(), dim=-1)
    n_cls = len(catalogue_names)
    pos_anchor = torch.zeros(n_cls, img.shape[1], dtype=torch.float64)
    neg_anchor = torch.zeros(n_cls, img.shape[1], dtype=torch.float64)
    undefined, counts = [], []
    if mode == "short":
        prompts = [p for name in catalogue_names for p in zero_shot_prompts(name)]
        emb = encode_texts(text_tower, prompts, vocab, max_len)
        pos_anchor, neg_anchor = emb[0::2].double(), emb[1::2].double()
        counts = [(1, 1)] * n_cls
    else:
        if reference_reports is None:
            raise ArgumentError("native zero-shot needs reference reports")
        for c, (pos, neg) in enumerate(native_reference_texts(reference_reports, n_cls, k)):
            counts.append((len(pos), len(neg)))
            if not pos or not neg:
                undefined.append(c)
                continue
            if len(pos) < k or len(neg) < k:
                log.warning("class %d: %d/%d references (wanted %d each)", c, len(pos), len(neg), k)
            pos_anchor[c] = encode_texts(text_tower, pos, vocab, max_len).double().mean(0)
            neg_anchor[c] = encode_texts(text_tower, neg, vocab, max_len).double().mean(0)
    pos_anchor = F.normalize(pos_anchor, dim=-1)
    neg_anchor = F.normalize(neg_anchor, dim=-1)
    cos_pos = img @ pos_anchor.T
    cos_neg = img @ neg_anchor.T
    logits = torch.stack([cos_pos, cos_neg], dim=-1) / temperature
    scores = logits.softmax(-1)[..., 0].numpy()
    margins = (cos_pos - cos_neg).numpy()
    for c in undefined:
        scores[:, c] = np.nan
        margins[:, c] = np.nan
    return ZeroShotResult(scores, margins, tuple(undefined), tuple(counts))


def zero_shot_summary(test: ZeroShotResult, test_labels, val: Optional[ZeroShotResult] = None,
                      val_labels=None) -> ClassificationSummary:
    """Ranking metrics use the temperature-free margin; F1/BA use val-fitted thresholds."""
    thresholds = None
    if val is not None:
        val_scores = np.nan_to_num(val.scores, nan=0.0)
        thresholds = pick_thresholds(val_scores, val_labels).values
    return classification_summary(np.nan_to_num(test.scores, nan=0.0), test_labels, thresholds,
                                  rank_scores=np.nan_to_num(test.margins, nan=0.0), exclude=test.undefined)


# --- full evaluation --------------------------------------------------------------


def _macro_metrics(summary: ClassificationSummary, keys=("auroc", "auprc", "f1", "balanced_accuracy")) -> dict:
    macro = summary.macro()
    return {k: macro[k] for k in keys if np.isfinite(macro[k])}


def retrieval_metrics(image_emb: torch.Tensor, text_emb: torch.Tensor, ks=(1, 5, 10)) -> dict[str, float]:
    sim = (image_emb.double() @ text_emb.double().T).numpy()
    out = {f"R@{k}": recall_at_k(sim, k) for k in ks}
    out.update({f"image_to_text_R@{k}": recall_at_k(sim, k, query="image") for k in ks})
    return out


def long_text(case) -> str:
    return render_report(case.report, style="long", shuffle=False, p_short=0.0)


def evaluate(model, dataset, cfg, protocols: Sequence[str] = PROTOCOLS, split: str = "test") -> dict[str, MetricsReport]:
    """Run the requested protocols on ``split``; probes and thresholds fit on train/val."""
    torch.use_deterministic_algorithms(True)
    size, spacing = cfg.input_size, cfg.train_spacing_mm
    cases = {s: dataset.split(s) for s in ("train", "val", split)}
    crops = {s: dataset.center_crops(c, spacing, size) for s, c in cases.items() if c}
    labels = {s: dataset.labels(c) for s, c in cases.items() if c}
    echo = {"config_hash": cfg.digest(), "seed": cfg.seed, "split": split}
    reports: dict[str, MetricsReport] = {}
    names = [a.name for a in CATALOGUE[: dataset.catalogue_size]]
    pooled = {s: encode_volumes(model.vision, x)[1] for s, x in crops.items()}
    if "retrieval" in protocols:
        text = encode_texts(model.text, [long_text(c) for c in cases[split]], dataset.vocab, cfg.text_max_len)
        reports["retrieval"] = MetricsReport("retrieval", retrieval_metrics(pooled[split], text), split, echo)
    if "probe" in protocols:
        results = train_probe_grid(model.vision, crops["train"], labels["train"], crops["val"], labels["val"],
                                   cfg.probe_steps, cfg.probe_batch_size, cfg.seed, cfg.vision_pool_heads,
                                   cfg.pool_query_count)
        best = selected_probe(results)
        tokens, _ = encode_volumes(model.vision, crops[split])
        summary = classification_summary(_probe_scores(best.head, tokens), labels[split], best.thresholds)
        details = {"selected": {"scheme": best.scheme, "lr": best.lr},
                   "grid": [r.summary() for r in results],
                   "per_class_auroc": _finite_list(summary.auroc), "undefined_classes": list(summary.undefined)}
        reports["probe"] = MetricsReport("probe", _macro_metrics(summary), split, echo, details)
    refs = [(c.case_id, c.labels, long_text(c)) for c in cases["train"]]
    for mode in ("native", "short"):
        tag = f"zeroshot-{mode}"
        if tag not in protocols:
            continue
        kw = dict(reference_reports=refs, temperature=cfg.zeroshot_temperature, k=cfg.zeroshot_refs,
                  max_len=cfg.text_max_len)
        test = zero_shot_classify(pooled[split], model.text, dataset.vocab, names, mode, **kw)
        val = zero_shot_classify(pooled["val"], model.text, dataset.vocab, names, mode, **kw)
        summary = zero_shot_summary(test, labels[split], val, labels["val"])
        details = {"per_class_auroc": _finite_list(summary.auroc), "undefined_classes": list(summary.undefined),
                   "reference_counts": [list(c) for c in test.reference_counts]}
        reports[tag] = MetricsReport(tag, _macro_metrics(summary), split, echo, details)
    return reports
