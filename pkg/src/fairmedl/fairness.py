"""Group fairness metrics for one sensitive variable at a time.

Classification: equalized-odds dispersion (population SD of per-category TPR and
FPR), demographic parity (mean absolute pairwise gap in positive-prediction
rate) and counterfactual fairness (mean absolute change in predicted
probability when the category is swapped). Regression swaps in per-category
MSE, mean predictions and raw predicted values respectively.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError

logger = logging.getLogger(__name__)


@dataclass
class GroupedPredictions:
    scores: np.ndarray
    labels: np.ndarray
    group: np.ndarray
    hard_preds: np.ndarray | None = None
    category_names: Sequence[str] | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        self.group = np.asarray(self.group).reshape(-1)
        n = self.scores.size
        if self.labels.size != n or self.group.size != n:
            raise ContractError(
                f"scores/labels/group lengths differ: {n}, {self.labels.size}, {self.group.size}")
        if self.hard_preds is not None:
            self.hard_preds = np.asarray(self.hard_preds, dtype=np.float64).reshape(-1)
            if self.hard_preds.size != n:
                raise ContractError("hard_preds length differs from scores")

    def categories(self) -> np.ndarray:
        cats = np.unique(self.group)
        if cats.size < 2:
            raise ContractError(f"need at least 2 categories, found {cats.size}")
        return cats

    def name_of(self, category) -> str:
        if self.category_names is not None:
            try:
                return str(self.category_names[int(category)])
            except (IndexError, ValueError, TypeError):
                pass
        return str(category)


@dataclass
class FairnessValue:
    metric: str
    value: float
    breakdown: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def passes(self, epsilon: float) -> bool:
        """Optional maximum-unfairness threshold check."""
        return self.value <= epsilon

    def to_dict(self) -> dict:
        return {"metric": self.metric, "value": self.value, "breakdown": self.breakdown,
                "flags": list(self.flags)}


@dataclass
class GroupRates:
    categories: list[str]
    tpr: np.ndarray
    fpr: np.ndarray
    flags: list[str]


def _pairwise_mean_abs(values: np.ndarray) -> float:
    pairs = list(itertools.combinations(range(values.size), 2))
    return float(np.mean([abs(values[i] - values[j]) for i, j in pairs]))


def group_rates(gp: GroupedPredictions) -> GroupRates:
    """Per-category TPR and FPR; undefined rates are NaN and flagged."""
    if gp.hard_preds is None:
        raise ContractError("group_rates needs hard predictions")
    labels = gp.labels
    if not (np.any(labels == 1) and np.any(labels == 0)):
        raise ContractError("group_rates needs both label classes present")
    cats = gp.categories()
    tpr = np.full(cats.size, np.nan)
    fpr = np.full(cats.size, np.nan)
    flags = []
    for i, c in enumerate(cats):
        m = gp.group == c
        pos = m & (labels == 1)
        neg = m & (labels == 0)
        npos, nneg = int(pos.sum()), int(neg.sum())
        if npos:
            tpr[i] = gp.hard_preds[pos].sum() / npos
        else:
            flags.append(f"{gp.name_of(c)}: no positive labels, TPR excluded")
        if nneg:
            fpr[i] = gp.hard_preds[neg].sum() / nneg
        else:
            flags.append(f"{gp.name_of(c)}: no negative labels, FPR excluded")
    for f in flags:
        logger.warning(f)
    return GroupRates([gp.name_of(c) for c in cats], tpr, fpr, flags)


def _defined_sd(rates: np.ndarray, what: str) -> float:
    defined = rates[~np.isnan(rates)]
    if defined.size < 2:
        raise ContractError(f"{what}: fewer than 2 categories with defined rates")
    return float(np.std(defined))


def equalized_odds_sd(gp: GroupedPredictions) -> tuple[float, float]:
    """Population SD of per-category TPR and of per-category FPR."""
    r = group_rates(gp)
    return _defined_sd(r.tpr, "TPR"), _defined_sd(r.fpr, "FPR")


def equalized_odds_values(gp: GroupedPredictions) -> tuple[FairnessValue, FairnessValue]:
    r = group_rates(gp)
    tpr_sd = _defined_sd(r.tpr, "TPR")
    fpr_sd = _defined_sd(r.fpr, "FPR")
    return (
        FairnessValue("TPR_SD", tpr_sd, dict(zip(r.categories, r.tpr.tolist())), r.flags),
        FairnessValue("FPR_SD", fpr_sd, dict(zip(r.categories, r.fpr.tolist())), r.flags),
    )


def equalized_odds_mse_sd(gp: GroupedPredictions) -> FairnessValue:
    cats = gp.categories()
    mses = np.array([np.mean((gp.scores[gp.group == c] - gp.labels[gp.group == c]) ** 2)
                     for c in cats])
    return FairnessValue("MSE_SD", float(np.std(mses)),
                         {gp.name_of(c): float(v) for c, v in zip(cats, mses)})


def demographic_parity_cls(gp: GroupedPredictions) -> FairnessValue:
    if gp.hard_preds is None:
        raise ContractError("demographic parity for classification needs hard predictions")
    cats = gp.categories()
    rates = np.array([gp.hard_preds[gp.group == c].mean() for c in cats])
    return FairnessValue("DP", _pairwise_mean_abs(rates),
                         {gp.name_of(c): float(v) for c, v in zip(cats, rates)})


def demographic_parity_reg(gp: GroupedPredictions) -> FairnessValue:
    cats = gp.categories()
    means = np.array([gp.scores[gp.group == c].mean() for c in cats])
    return FairnessValue("DP", _pairwise_mean_abs(means),
                         {gp.name_of(c): float(v) for c, v in zip(cats, means)})


def _counterfactual(scores_factual, scores_counterfactual) -> FairnessValue:
    f = np.asarray(scores_factual, dtype=np.float64).reshape(-1)
    cf = np.asarray(scores_counterfactual, dtype=np.float64)
    if cf.ndim == 1:
        cf = cf.reshape(-1, 1)
    if cf.ndim != 2 or cf.shape[0] != f.size or cf.shape[1] < 1:
        raise ContractError(
            f"counterfactual scores shape {cf.shape} incompatible with {f.size} factual scores")
    gaps = np.abs(f[:, None] - cf)
    return FairnessValue("CF", float(gaps.mean()), {"max_gap": float(gaps.max())})


def counterfactual_fairness_cls(scores_factual, scores_counterfactual) -> FairnessValue:
    """Mean |p(factual) - p(counterfactual)| over samples and alternative categories."""
    return _counterfactual(scores_factual, scores_counterfactual)


def counterfactual_fairness_reg(scores_factual, scores_counterfactual) -> FairnessValue:
    return _counterfactual(scores_factual, scores_counterfactual)


def fairness_metrics(gp: GroupedPredictions, task: str,
                     counterfactual: np.ndarray | None = None) -> dict[str, FairnessValue]:
    """Every applicable metric for one sensitive variable."""
    out: dict[str, FairnessValue] = {}
    if task == "classification":
        out["TPR_SD"], out["FPR_SD"] = equalized_odds_values(gp)
        out["DP"] = demographic_parity_cls(gp)
        if counterfactual is not None:
            out["CF"] = counterfactual_fairness_cls(gp.scores, counterfactual)
    else:
        out["MSE_SD"] = equalized_odds_mse_sd(gp)
        out["DP"] = demographic_parity_reg(gp)
        if counterfactual is not None:
            out["CF"] = counterfactual_fairness_reg(gp.scores, counterfactual)
    return out
