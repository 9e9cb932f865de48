"""Annotation accuracy (top-k) and retrieval quality (AP@20, per-noun mAP).

Ranking conventions, fixed for determinism: equal probabilities rank by
lower class index in top-k, and by ascending image id in retrieval; the
top-n subset cut breaks accuracy ties by lower class index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import network
from .data import AnpVocabulary
from .errors import ConfigurationError, DataError, ParameterError
from .tensor import Rng, Tensor


@dataclass
class PredictionMatrix:
    """Softmax rows for M test images over K classes."""

    probs: Tensor                       # [M, K]
    true_labels: np.ndarray             # [M]
    image_ids: list                     # [M] strings


@dataclass
class EvalReport:
    topk_overall: dict = field(default_factory=dict)       # k -> accuracy
    topk_per_anp: dict = field(default_factory=dict)       # k -> {anp -> acc}
    subset_size: int = 0
    subset_anps: list = field(default_factory=list)
    subset_overall: dict = field(default_factory=dict)     # k -> accuracy
    ranked_anps: list = field(default_factory=list)        # by top-10, descending
    ap_per_anp: dict = field(default_factory=dict)         # anp -> AP@20
    map_per_noun: dict = field(default_factory=dict)       # noun -> mAP
    map_overall: float = 0.0


def _topk_sets(probs: Tensor, k: int) -> np.ndarray:
    """[M, k] class indices of the k largest entries per row, ties to lower index."""
    order = np.argsort(-probs, axis=1, kind="stable")
    return order[:, :k]


def topk_accuracy(pred: PredictionMatrix, k: int):
    """Overall and per-ANP fraction of rows whose true label ranks in the top k."""
    m, num_classes = pred.probs.shape
    if k < 1 or k > num_classes:
        raise ParameterError(f"k must be in 1..{num_classes}, got {k}")
    top = _topk_sets(pred.probs, k)
    correct = (top == np.asarray(pred.true_labels)[:, None]).any(axis=1)
    per_anp = {}
    for anp in np.unique(pred.true_labels):
        rows = pred.true_labels == anp
        per_anp[int(anp)] = float(correct[rows].mean())
    return float(correct.mean()), per_anp


def select_top_anps(pred: PredictionMatrix, n: int, ks=(1, 5, 10)):
    """The n ANPs with highest top-10 accuracy, and accuracies over that subset."""
    _, per_anp_10 = topk_accuracy(pred, min(10, pred.probs.shape[1]))
    if n > len(per_anp_10):
        raise ParameterError(
            f"subset size {n} exceeds the {len(per_anp_10)} ANPs with test images")
    ranked = sorted(per_anp_10, key=lambda anp: (-per_anp_10[anp], anp))
    subset = sorted(ranked[:n])
    keep = np.isin(pred.true_labels, subset)
    sub = PredictionMatrix(
        probs=pred.probs[keep],
        true_labels=np.asarray(pred.true_labels)[keep],
        image_ids=[pid for pid, k_ in zip(pred.image_ids, keep) if k_],
    )
    overall = {k: topk_accuracy(sub, k)[0] for k in ks}
    return subset, overall


def evaluate_annotation(pred: PredictionMatrix, ks=(1, 5, 10),
                        subset_size: int = 1200) -> EvalReport:
    """Full annotation report: overall, per-ANP, ranked list, top-n subset."""
    report = EvalReport()
    for k in ks:
        overall, per_anp = topk_accuracy(pred, k)
        report.topk_overall[k] = overall
        report.topk_per_anp[k] = per_anp
    top10 = report.topk_per_anp[max(ks)]
    report.ranked_anps = sorted(top10, key=lambda anp: (-top10[anp], anp))
    n = min(subset_size, len(report.ranked_anps))
    report.subset_size = n
    report.subset_anps, report.subset_overall = select_top_anps(pred, n, ks)
    return report


def average_precision_at_20(ranking, positives) -> float:
    """AP over the first 20 ranks, normalized by min(#positives, 20)."""
    if len(ranking) < 20:
        raise ParameterError(f"need at least 20 ranked items, got {len(ranking)}")
    positives = set(positives)
    if not positives:
        raise ParameterError("positives must be nonempty")
    hits = 0
    total = 0.0
    for rank, item in enumerate(ranking[:20], start=1):
        if item in positives:
            hits += 1
            total += hits / rank
    return total / min(len(positives), 20)


def predict_probs(model: network.NetworkModel, records, vocab=None, means=None,
                  batch_size: int = 32) -> PredictionMatrix:
    """Center-crop forward passes over manifest records, in record order."""
    rows, labels, ids = [], [], []
    if vocab is None:
        vocab = AnpVocabulary([f"class {i}" for i in range(model.num_classes)])
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        batch, chunk_labels = data_mod.make_batch(
            chunk, vocab, "test", Rng(0), means=means)
        _, probs = network.forward(model, batch, "test")
        rows.append(probs)
        labels.extend(int(x) for x in chunk_labels)
        ids.extend(r.path for r in chunk)
    if not rows:
        raise DataError("no records to predict")
    return PredictionMatrix(np.concatenate(rows), np.asarray(labels), ids)


def retrieval_eval_from_predictions(pred: PredictionMatrix, records,
                                    vocab: AnpVocabulary) -> EvalReport:
    """Rank each ANP's annotated pool by that ANP's probability column.

    ``records[i]`` must describe ``pred`` row i and carry a relevance
    flag; an ANP's pool is every record labeled with its index.
    """
    pools: dict[int, list] = {}
    for i, record in enumerate(records):
        pools.setdefault(record.anp_index, []).append(i)
    report = EvalReport()
    noun_aps: dict[str, list] = {}
    for anp in sorted(pools):
        rows = pools[anp]
        if any(records[i].relevance is None for i in rows):
            raise DataError(f"missing relevance annotations for ANP {anp}")
        if len(rows) < 20:
            raise DataError(f"ANP {anp} has {len(rows)} annotated images, need >= 20")
        scored = sorted(rows, key=lambda i: (-pred.probs[i, anp], pred.image_ids[i]))
        ranking = [pred.image_ids[i] for i in scored]
        positives = {pred.image_ids[i] for i in rows if records[i].relevance == 1}
        ap = average_precision_at_20(ranking, positives)
        report.ap_per_anp[anp] = ap
        noun_aps.setdefault(vocab.noun_of(anp), []).append(ap)
    report.map_per_noun = {
        noun: float(np.mean(aps)) for noun, aps in sorted(noun_aps.items())
    }
    report.map_overall = float(np.mean(list(report.ap_per_anp.values())))
    return report


def retrieval_eval(model: network.NetworkModel, records, vocab: AnpVocabulary,
                   means=None) -> EvalReport:
    """Run the model over an annotated test subset and score retrieval."""
    if means is None:
        means = model.channel_means
    pred = predict_probs(model, records, vocab, means=means)
    return retrieval_eval_from_predictions(pred, records, vocab)


def annotate(model: network.NetworkModel, image: Tensor, k: int,
             vocab: AnpVocabulary):
    """Top-k (ANP, probability) pairs from one center-crop forward pass."""
    if len(vocab) != model.num_classes:
        raise ConfigurationError(
            f"vocabulary has {len(vocab)} entries but the model predicts "
            f"{model.num_classes} classes")
    if k < 1 or k > model.num_classes:
        raise ParameterError(f"k must be in 1..{model.num_classes}, got {k}")
    canonical = data_mod.resize_to_canonical(image)
    crop = data_mod.center_crop(canonical, means=model.channel_means)
    _, probs = network.forward(model, crop[None], "test")
    row = probs[0]
    order = np.argsort(-row, kind="stable")[:k]
    return [(vocab.anps[int(i)], float(row[i])) for i in order]


def _pct(value: float) -> str:
    return f"{100.0 * value:.4f}%"


def format_annotation_table(reports: dict, ks=(1, 5, 10)) -> str:
    """Accuracy table: one row per run, full-set and top-n subset columns."""
    any_report = next(iter(reports.values()))
    n = any_report.subset_size
    header = ["run"] + [f"Top-{k}" for k in ks] + [f"Top-{k} (top-{n})" for k in ks]
    lines = ["\t".join(header)]
    for name, report in reports.items():
        row = [name]
        row += [_pct(report.topk_overall[k]) for k in ks]
        row += [_pct(report.subset_overall[k]) for k in ks]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def format_ranked_anps(report: EvalReport, vocab: AnpVocabulary, ks=(1, 5, 10)) -> str:
    """Raw per-ANP accuracies, ranked by the largest-k accuracy, unsmoothed."""
    header = ["rank", "anp"] + [f"Top-{k}" for k in ks]
    lines = ["\t".join(header)]
    for rank, anp in enumerate(report.ranked_anps, start=1):
        row = [str(rank), vocab.anps[anp]]
        row += [_pct(report.topk_per_anp[k][anp]) for k in ks]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def format_retrieval_tables(report: EvalReport, vocab: AnpVocabulary):
    """(per-ANP AP@20 table, per-noun mAP table with an overall row)."""
    anp_lines = ["anp\tnoun\tAP@20"]
    for anp in sorted(report.ap_per_anp):
        anp_lines.append(
            f"{vocab.anps[anp]}\t{vocab.noun_of(anp)}\t{report.ap_per_anp[anp]:.6f}")
    noun_lines = ["noun\tmAP"]
    for noun, value in report.map_per_noun.items():
        noun_lines.append(f"{noun}\t{value:.6f}")
    noun_lines.append(f"all\t{report.map_overall:.6f}")
    return "\n".join(anp_lines) + "\n", "\n".join(noun_lines) + "\n"
