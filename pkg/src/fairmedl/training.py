"""Training loops, thresholds, evaluation, attribution and repeated-run statistics.

Two adversarial schedules are supported:

``alternating`` (default)
    Each mini-batch first updates the adversaries on their own cross-entropy
    with the main weights frozen, then updates the main weights (FE predictor
    and RE block) on the variant's objective with the adversaries frozen.

``reversal``
    A single backward pass: every adversary sees its input through a gradient
    reversal node whose strength is the adversary's weight in the objective, so
    the adversary descends its cross-entropy while the main weights receive
    exactly the gradient of the objective.
"""

from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from . import autodiff as ad
from . import losses as L
from .architecture import (
    ADVERSARY_PARTS,
    MAIN_PARTS,
    MIXED_VARIANTS,
    VARIANTS,
    ModelStack,
    StackConfig,
    assemble,
)
from .autodiff import Tensor
from .data import DatasetBundle, Fold
from .errors import ConfigurationError, ContractError, DivergenceError
from .fairness import GroupedPredictions, fairness_metrics

logger = logging.getLogger(__name__)

SCHEDULES = ("alternating", "reversal")


# ------------------------------------------------------------------- plans


@dataclass
class TrainPlan:
    variant: str = "fair_medl"
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 10
    schedule: str = "alternating"
    adversary_steps: int = 1
    zpred_epochs: int = 50
    seed: int = 0
    fe_hidden: tuple[int, ...] = (32, 32)
    adv_hidden: tuple[int, ...] = (16, 16)
    z_hidden: tuple[int, ...] = (32, 32)
    activation: str = "relu"
    prior_var: float = 1.0
    re_init_logvar: float = -6.0

    def __post_init__(self):
        if isinstance(self.weights, Mapping):
            self.weights = L.LossWeights(**self.weights)
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("patience, batch_size and max_epochs must be >= 1")
        if self.adversary_steps < 1:
            raise ConfigurationError("adversary_steps must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError("lr must be > 0")
        self.fe_hidden = tuple(self.fe_hidden)
        self.adv_hidden = tuple(self.adv_hidden)
        self.z_hidden = tuple(self.z_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    def stack_config(self, bundle: DatasetBundle) -> StackConfig:
        return StackConfig(
            n_features=bundle.X.shape[1], n_clusters=bundle.n_clusters,
            sensitive=bundle.sensitive_sizes(), task=bundle.task, fe_hidden=self.fe_hidden,
            adv_hidden=self.adv_hidden, z_hidden=self.z_hidden, activation=self.activation,
            prior_var=self.prior_var, re_init_logvar=self.re_init_logvar, seed=self.seed,
            feature_names=list(bundle.feature_names))


def derive_seed(*parts) -> int:
    return zlib.crc32(repr(parts).encode()) & 0x7FFFFFFF


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _set_trainable(params: Sequence[Tensor], flag: bool) -> None:
    for p in params:
        p.requires_grad = flag


# ----------------------------------------------------------- batch objective


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: dict[str, np.ndarray]
    indicators: list[np.ndarray]


def _make_batch(bundle: DatasetBundle, rows: np.ndarray) -> Batch:
    s = {k: v[rows] for k, v in bundle.S.items()}
    indicators = [(s[k] == c).astype(np.float64) for k in s
                  for c in range(len(bundle.sensitive_categories[k]))]
    return Batch(bundle.X[rows], bundle.y[rows], bundle.z[rows], s, indicators)


def _adversary_coefficients(variant: str, w: L.LossWeights, n_sensitive: int) -> dict[str, float]:
    """Weight with which each adversary network's summed CCE enters the objective."""
    coef = {}
    if variant in ("da", "fair_da", "fair_da_acl"):
        coef["cluster_adv"] = w.lambda_z
    if variant in MIXED_VARIANTS:
        coef["cluster_adv"] = w.lambda_g
    if variant == "fair_da":
        coef["debias_fe"] = w.lambda_s
    if variant == "fair_medl":
        coef["debias_fe"] = coef["debias_me"] = w.lambda_D * 0.5 / n_sensitive
    return coef


def objective(stack: ModelStack, b: Batch, w: L.LossWeights,
              re_rng: np.random.Generator | None) -> tuple[Tensor, dict]:
    """The variant's objective on one batch (as written, adversary terms negative)."""
    task = stack.task
    g, eta_F = stack.fe_forward(Tensor(b.x))
    v = stack.variant
    parts: dict = {"eta_F": eta_F}
    if v == "base":
        loss = L.task_loss(b.y, eta_F, task)
    elif v in ("da", "fair_da", "fair_da_acl"):
        z_logits = stack.cluster_adv(g)
        if v == "da":
            loss = L.compose_da(b.y, eta_F, b.z, z_logits, w, task)
        elif v == "fair_da":
            s_logits = stack.debias_fe(stack.output(eta_F), b.y)
            loss = L.compose_fair_da(b.y, eta_F, b.z, z_logits, b.s, s_logits, w, task)
        else:
            loss = L.compose_fair_da_acl(b.y, eta_F, b.z, z_logits, b.indicators, w, task)
    else:
        eta_M = stack.me_forward(g, eta_F, b.z, rng=re_rng)
        parts["eta_M"] = eta_M
        z_logits = stack.cluster_adv(g)
        kl = stack.re.kl()
        if v == "armed":
            loss = L.compose_armed(b.y, eta_M, eta_F, b.z, z_logits, kl, w, task)
        else:
            sF = stack.debias_fe(stack.output(eta_F), b.y)
            sM = stack.debias_me(stack.output(eta_M), b.y)
            loss = L.compose_fair_medl(b.y, eta_M, eta_F, b.z, z_logits, kl, b.s, sF, sM, w, task)
    return loss, parts


def adversary_loss(stack: ModelStack, b: Batch) -> Tensor | None:
    """Sum of every adversary's own cross-entropy, computed on frozen main outputs."""
    with ad.no_grad():
        g, eta_F = stack.fe_forward(Tensor(b.x))
        eta_M = stack.me_forward(g, eta_F, b.z) if stack.debias_me is not None else None
    terms = []
    if stack.cluster_adv is not None:
        terms.append(L.cce(b.z, stack.cluster_adv(Tensor(g.data))))
    for net, eta in ((stack.debias_fe, eta_F), (stack.debias_me, eta_M)):
        if net is None:
            continue
        logits = net(Tensor(stack.output(eta).data), b.y)
        terms.extend(L.cce(b.s[k], logits[k]) for k in b.s)
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def reversal_surrogate(stack: ModelStack, b: Batch, w: L.LossWeights,
                       re_rng: np.random.Generator | None) -> tuple[Tensor, float]:
    """Surrogate for one-pass training and the objective value it stands for."""
    task = stack.task
    coef = _adversary_coefficients(stack.variant, w, len(b.s))
    g, eta_F = stack.fe_forward(Tensor(b.x))
    v = stack.variant
    if v in MIXED_VARIANTS:
        eta_M = stack.me_forward(g, eta_F, b.z, rng=re_rng)
        main = (L.task_loss(b.y, eta_M, task) + w.lambda_F * L.task_loss(b.y, eta_F, task)
                + w.lambda_K * stack.re.kl())
    else:
        eta_M = None
        main = w.lambda_y * L.task_loss(b.y, eta_F, task) if v != "base" else \
            L.task_loss(b.y, eta_F, task)
    if v == "fair_da_acl":
        score = stack.output(eta_F)
        main = main + w.lambda_s * L.absolute_correlation_penalty(score, b.indicators)

    def _route(t: Tensor, c: float) -> Tensor:
        return ad.gradient_reversal(t, c) if c > 0 else Tensor(t.data)

    surrogate, value = main, main.item()
    if stack.cluster_adv is not None:
        ce = L.cce(b.z, stack.cluster_adv(_route(g, coef["cluster_adv"])))
        surrogate = surrogate + ce
        value -= coef["cluster_adv"] * ce.item()
    for name, eta in (("debias_fe", eta_F), ("debias_me", eta_M)):
        net = getattr(stack, name)
        if net is None:
            continue
        logits = net(_route(stack.output(eta), coef[name]), b.y)
        for k in b.s:
            ce = L.cce(b.s[k], logits[k])
            surrogate = surrogate + ce
            value -= coef[name] * ce.item()
    return surrogate, value


def validation_loss(stack: ModelStack, bundle: DatasetBundle, rows: np.ndarray) -> float:
    """Task loss of the variant's main head at eval (RE posterior means)."""
    with ad.no_grad():
        g, eta_F = stack.fe_forward(Tensor(bundle.X[rows]))
        eta = stack.me_forward(g, eta_F, bundle.z[rows]) if stack.is_mixed else eta_F
        return L.task_loss(bundle.y[rows], eta, stack.task).item()


# ------------------------------------------------------------------- fitting


@dataclass
class TrainingHistory:
    step_losses: list[float] = field(default_factory=list)
    epoch_train: list[float] = field(default_factory=list)
    epoch_val: list[float] = field(default_factory=list)
    best_epoch: int = -1
    zpred_val: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def fit(stack: ModelStack, bundle: DatasetBundle, train_rows, val_rows, plan: TrainPlan,
        record_steps: bool = False) -> TrainingHistory:
    """Mini-batch optimization with early stopping on the validation task loss."""
    train_rows, val_rows = np.asarray(train_rows), np.asarray(val_rows)
    if train_rows.size == 0 or val_rows.size == 0:
        raise ContractError("train and validation splits must be non-empty")
    if stack.variant != plan.variant:
        raise ContractError(f"stack variant {stack.variant!r} != plan variant {plan.variant!r}")
    if np.any(bundle.z[train_rows] < 0) and stack.variant != "base":
        raise ContractError("training rows must come from seen clusters")
    started = time.perf_counter()
    w = plan.weights
    main_params = stack.parameters(MAIN_PARTS)
    adv_params = stack.parameters(ADVERSARY_PARTS)
    shuffle_rng = np.random.default_rng(derive_seed(plan.seed, "shuffle"))
    re_rng = np.random.default_rng(derive_seed(plan.seed, "re")) if stack.is_mixed else None
    hist = TrainingHistory()
    best_state, best_val, bad_epochs = stack.state_dict(), math.inf, 0

    if plan.schedule == "alternating":
        main_opt = Adam(main_params, plan.lr)
        adv_opt = Adam(adv_params, plan.lr) if adv_params else None
    else:
        main_opt = Adam(main_params + adv_params, plan.lr)
        adv_opt = None

    for epoch in range(plan.max_epochs):
        order = shuffle_rng.permutation(train_rows)
        total, count = 0.0, 0
        for start in range(0, order.size, plan.batch_size):
            b = _make_batch(bundle, order[start:start + plan.batch_size])
            if plan.schedule == "alternating":
                if adv_opt is not None:
                    _set_trainable(main_params, False)
                    for _ in range(plan.adversary_steps):
                        adv_opt.zero_grad()
                        ad.backward(adversary_loss(stack, b))
                        adv_opt.step()
                    _set_trainable(main_params, True)
                _set_trainable(adv_params, False)
                main_opt.zero_grad()
                loss, _ = objective(stack, b, w, re_rng)
                value = loss.item()
                if not math.isfinite(value):
                    _set_trainable(adv_params, True)
                    raise DivergenceError(f"loss became {value} at epoch {epoch} "
                                          f"(variant={plan.variant}, seed={plan.seed})")
                ad.backward(loss)
                main_opt.step()
                _set_trainable(adv_params, True)
            else:
                main_opt.zero_grad()
                surrogate, value = reversal_surrogate(stack, b, w, re_rng)
                if not math.isfinite(value) or not math.isfinite(surrogate.item()):
                    raise DivergenceError(f"loss became non-finite at epoch {epoch} "
                                          f"(variant={plan.variant}, seed={plan.seed})")
                ad.backward(surrogate)
                main_opt.step()
            if record_steps:
                hist.step_losses.append(value)
            total += value * b.y.size
            count += b.y.size
        val = validation_loss(stack, bundle, val_rows)
        if not math.isfinite(val):
            raise DivergenceError(f"validation loss became {val} at epoch {epoch}")
        hist.epoch_train.append(total / count)
        hist.epoch_val.append(val)
        if val < best_val:
            best_val, best_state, bad_epochs = val, stack.state_dict(), 0
            hist.best_epoch = epoch
        else:
            bad_epochs += 1
            if bad_epochs >= plan.patience:
                break
    stack.load_state_dict(best_state)
    stack.trained = True
    if stack.zpred is not None:
        hist.zpred_val = fit_zpredictor(stack, bundle, train_rows, val_rows, plan)
    hist.seconds = time.perf_counter() - started
    return hist


def fit_zpredictor(stack: ModelStack, bundle: DatasetBundle, train_rows, val_rows,
                   plan: TrainPlan) -> list[float]:
    """Cluster-membership classifier on raw features, early-stopped on validation CCE."""
    params = stack.parameters(["zpred"])
    opt = Adam(params, plan.lr)
    rng = np.random.default_rng(derive_seed(plan.seed, "zpred-shuffle"))
    best_state = [p.data.copy() for p in params]
    best, bad, curve = math.inf, 0, []
    Xv, zv = Tensor(bundle.X[val_rows]), bundle.z[val_rows]
    for _ in range(plan.zpred_epochs):
        order = rng.permutation(train_rows)
        for start in range(0, order.size, plan.batch_size):
            rows = order[start:start + plan.batch_size]
            opt.zero_grad()
            ad.backward(L.cce(bundle.z[rows], stack.zpred.logits(Tensor(bundle.X[rows]))))
            opt.step()
        with ad.no_grad():
            val = L.cce(zv, stack.zpred.logits(Xv)).item()
        curve.append(val)
        if val < best:
            best, bad, best_state = val, 0, [p.data.copy() for p in params]
        else:
            bad += 1
            if bad >= plan.patience:
                break
    for p, saved in zip(params, best_state):
        p.data[...] = saved
    stack.zpred_trained = True
    return curve


# --------------------------------------------------------- threshold & metrics


def youden_threshold(labels, scores) -> float:
    """Threshold maximizing TPR - FPR over midpoints of sorted unique scores.

    Predictions are ``score >= threshold``. Ties go to the smallest threshold.
    """
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    pos, neg = scores[labels == 1], scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ContractError("youden_threshold needs both classes present")
    uniq = np.unique(scores)
    cands = uniq if uniq.size == 1 else (uniq[:-1] + uniq[1:]) / 2.0
    j = youden_index(pos, neg, cands)
    return float(cands[int(np.argmax(j))])


def youden_index(pos: np.ndarray, neg: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    pos, neg = np.sort(pos), np.sort(neg)
    tpr = (pos.size - np.searchsorted(pos, thresholds, side="left")) / pos.size
    fpr = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg.size
    return tpr - fpr


def auroc(labels, scores) -> float:
    """Area under the ROC curve from the tie-corrected Mann-Whitney rank statistic."""
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n1 = int((labels == 1).sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        return math.nan
    ranks = stats.rankdata(scores)
    return float((ranks[labels == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def classification_metrics(labels, scores, preds) -> dict[str, float]:
    labels = np.asarray(labels, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    tp = float(np.sum((preds == 1) & (labels == 1)))
    tn = float(np.sum((preds == 0) & (labels == 0)))
    fp = float(np.sum((preds == 1) & (labels == 0)))
    fn = float(np.sum((preds == 0) & (labels == 1)))

    def _ratio(a, b):
        return a / b if b else math.nan

    sens, spec = _ratio(tp, tp + fn), _ratio(tn, tn + fp)
    return {
        "AUROC": auroc(labels, scores),
        "balanced_accuracy": (sens + spec) / 2.0,
        "accuracy": _ratio(tp + tn, labels.size),
        "PPV": _ratio(tp, tp + fp),
        "NPV": _ratio(tn, tn + fn),
        "sensitivity": sens,
        "specificity": spec,
    }


def regression_metrics(labels, scores) -> dict[str, float]:
    err = np.asarray(scores, dtype=np.float64) - np.asarray(labels, dtype=np.float64)
    return {"MSE": float(np.mean(err ** 2)), "MAE": float(np.mean(np.abs(err)))}


# ------------------------------------------------------------- counterfactuals


@dataclass
class CounterfactualScores:
    factual: np.ndarray
    by_category: np.ndarray
    categories: list[str]
    own: np.ndarray

    def alternatives(self) -> np.ndarray:
        """(n, C-1) scores under every category other than the sample's own."""
        n, C = self.by_category.shape
        keep = np.ones((n, C), dtype=bool)
        keep[np.arange(n), self.own] = False
        return self.by_category[keep].reshape(n, C - 1)


def _predict_rows(stack: ModelStack, X: np.ndarray, z: np.ndarray, head: str) -> np.ndarray:
    if head == "fe":
        return stack.predict(X, "fe")
    seen = z >= 0
    out = np.empty(X.shape[0])
    if seen.any():
        out[seen] = stack.predict(X[seen], "me", z=z[seen])
    if (~seen).any():
        out[~seen] = stack.predict(X[~seen], "me")
    return out


def counterfactual_rescore(stack: ModelStack, bundle: DatasetBundle, var: str, rows=None,
                           head: str = "fe") -> CounterfactualScores:
    """Re-score every row with each category of ``var`` substituted in its one-hot block."""
    blocks = bundle.encoder.blocks
    if var not in blocks:
        raise ContractError(f"sensitive variable {var!r} is not a model input; include it as a "
                            "categorical feature to compute counterfactual fairness")
    rows = np.arange(len(bundle)) if rows is None else np.asarray(rows)
    X, z = bundle.X[rows], bundle.z[rows]
    cols = np.asarray(blocks[var])
    enc_index = {c: i for i, c in enumerate(bundle.encoder.categories[var])}
    cats = bundle.sensitive_categories[var]
    scores = np.empty((rows.size, len(cats)))
    for j, cat in enumerate(cats):
        Xc = X.copy()
        Xc[:, cols] = 0.0
        if cat in enc_index:
            Xc[:, cols[enc_index[cat]]] = 1.0
        scores[:, j] = _predict_rows(stack, Xc, z, head)
    factual = _predict_rows(stack, X, z, head)
    return CounterfactualScores(factual, scores, list(cats), bundle.S[var][rows])


# ------------------------------------------------------------ predictions table


def prediction_table(stack: ModelStack, bundle: DatasetBundle, splits: Mapping[str, np.ndarray],
                     thresholds: Mapping[str, float], ids: np.ndarray | None = None) -> pd.DataFrame:
    """Long table: one row per (sample, split, head) with scores, hard predictions,
    labels, sensitive categories and per-category counterfactual scores."""
    heads = ["fe", "me"] if stack.is_mixed else ["fe"]
    frames = []
    for split, rows in splits.items():
        rows = np.asarray(rows)
        if rows.size == 0:
            continue
        for head in heads:
            df = pd.DataFrame({
                "id": rows if ids is None else ids[rows],
                "split": split,
                "head": head,
            })
            score = _predict_rows(stack, bundle.X[rows], bundle.z[rows], head)
            df["score"] = score
            if bundle.task == "classification":
                df["pred"] = (score >= thresholds[head]).astype(np.int64)
            else:
                df["pred"] = score
            df["label"] = bundle.y[rows]
            df["cluster"] = bundle.cluster_names[rows]
            for var, codes in bundle.S.items():
                df[var] = np.asarray(bundle.sensitive_categories[var])[codes[rows]]
            for var in bundle.S:
                if var not in bundle.encoder.blocks:
                    continue
                cf = counterfactual_rescore(stack, bundle, var, rows, head)
                for j, cat in enumerate(cf.categories):
                    df[f"cf:{var}={cat}"] = cf.by_category[:, j]
            frames.append(df)
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def metrics_from_predictions(table: pd.DataFrame, task: str, sensitive: Sequence[str]) -> dict:
    """Performance and fairness metrics for every (split, head) group of a prediction table.

    Keys are ``split/head/metric`` and ``split/head/variable/metric``.
    """
    out: dict[str, float] = {}
    for (split, head), df in table.groupby(["split", "head"], sort=True):
        labels = df["label"].to_numpy(dtype=np.float64)
        scores = df["score"].to_numpy(dtype=np.float64)
        prefix = f"{split}/{head}"
        if task == "classification":
            preds = df["pred"].to_numpy(dtype=np.float64)
            perf = classification_metrics(labels, scores, preds)
        else:
            preds = None
            perf = regression_metrics(labels, scores)
        for k, v in perf.items():
            out[f"{prefix}/{k}"] = v
        for var in sensitive:
            cats, group = np.unique(df[var].to_numpy(dtype=str), return_inverse=True)
            cf_cols = [c for c in df.columns if c.startswith(f"cf:{var}=")]
            cf = None
            if cf_cols:
                names = [c.split("=", 1)[1] for c in cf_cols]
                full = df[cf_cols].to_numpy(dtype=np.float64)
                own = np.array([names.index(v) for v in df[var].to_numpy(dtype=str)])
                keep = np.ones(full.shape, dtype=bool)
                keep[np.arange(full.shape[0]), own] = False
                cf = full[keep].reshape(full.shape[0], full.shape[1] - 1)
            gp = GroupedPredictions(scores, labels, group, preds, list(cats))
            try:
                values = fairness_metrics(gp, task, cf)
            except ContractError as exc:
                logger.warning("%s/%s: %s", prefix, var, exc)
                continue
            for name, fv in values.items():
                out[f"{prefix}/{var}/{name}"] = fv.value
    return out


# ----------------------------------------------------------------- attribution


def feature_importance(stack: ModelStack, X, feature_names: Sequence[str] | None = None,
                       blocks: Mapping[str, Sequence[int]] | None = None,
                       probes: Sequence[str] = ()) -> list[dict]:
    """Mean |d y_F / d x_j| per input column, one-hot blocks summed, sorted descending."""
    if not stack.trained:
        raise ContractError("feature_importance needs a trained stack")
    X = np.asarray(X, dtype=np.float64)
    xt = Tensor(X.copy(), requires_grad=True)
    _, eta = stack.fe_forward(xt)
    ad.backward(stack.output(eta).sum())
    per_col = np.abs(xt.grad).mean(axis=0)
    names = list(feature_names) if feature_names else [f"x{j}" for j in range(X.shape[1])]
    blocks = dict(blocks or {})
    in_block = {j for cols in blocks.values() for j in cols}
    rows = [{"feature": names[j], "importance": float(per_col[j])}
            for j in range(X.shape[1]) if j not in in_block]
    rows += [{"feature": var, "importance": float(per_col[list(cols)].sum())}
             for var, cols in blocks.items()]
    probes = set(probes)
    for r in rows:
        r["probe"] = r["feature"] in probes
    rows.sort(key=lambda r: (-r["importance"], r["feature"]))
    for rank, r in enumerate(rows, start=1):
        r["rank"] = rank
    return rows


def best_probe_rank(ranking: Sequence[dict]) -> int:
    ranks = [r["rank"] for r in ranking if r["probe"]]
    return min(ranks) if ranks else len(ranking) + 1


# ---------------------------------------------------------------- run results


@dataclass
class RunResult:
    variant: str
    fold: int
    repeat: int
    seed: int
    thresholds: dict[str, float]
    predictions: pd.DataFrame
    metrics: dict[str, float]
    importance: list[dict]
    history: TrainingHistory
    plan: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "fold": self.fold, "repeat": self.repeat,
                "seed": self.seed, "thresholds": self.thresholds, "metrics": self.metrics,
                "importance": self.importance, "history": self.history.to_dict(),
                "plan": self.plan}

    @classmethod
    def from_dict(cls, d: dict, predictions: pd.DataFrame) -> RunResult:
        return cls(d["variant"], d["fold"], d["repeat"], d["seed"], d["thresholds"], predictions,
                   d["metrics"], d["importance"], TrainingHistory(**d["history"]), d["plan"])


def train(stack: ModelStack, bundle: DatasetBundle, fold: Fold, plan: TrainPlan,
          unseen_rows=None, repeat: int = 0, ids: np.ndarray | None = None) -> RunResult:
    """Fit, threshold on the training rows, predict seen-test and unseen rows, evaluate."""
    history = fit(stack, bundle, fold.train, fold.val, plan)
    thresholds = {}
    if bundle.task == "classification":
        heads = ["fe", "me"] if stack.is_mixed else ["fe"]
        for head in heads:
            scores = _predict_rows(stack, bundle.X[fold.train], bundle.z[fold.train], head)
            thresholds[head] = youden_threshold(bundle.y[fold.train], scores)
    splits = {"seen_test": fold.test}
    if unseen_rows is not None and len(unseen_rows):
        splits["unseen"] = np.asarray(unseen_rows)
    table, metrics = evaluate(stack, bundle, splits, thresholds, ids)
    importance = feature_importance(stack, bundle.X[fold.test], bundle.feature_names,
                                    bundle.encoder.blocks, bundle.encoder.probes)
    return RunResult(plan.variant, fold.index, repeat, plan.seed, thresholds, table, metrics,
                     importance, history, plan.to_dict())


def evaluate(stack: ModelStack, bundle: DatasetBundle, splits: Mapping[str, np.ndarray],
             thresholds: Mapping[str, float], ids=None) -> tuple[pd.DataFrame, dict]:
    if not stack.trained:
        raise ContractError("evaluate needs a trained stack")
    if bundle.task == "classification":
        needed = ["fe", "me"] if stack.is_mixed else ["fe"]
        missing = [h for h in needed if h not in thresholds]
        if missing:
            raise ContractError(f"missing thresholds for heads {missing}")
    table = prediction_table(stack, bundle, splits, thresholds, ids)
    if table.empty:
        raise ContractError("no predictions to evaluate")
    return table, metrics_from_predictions(table, bundle.task, list(bundle.S))


# ------------------------------------------------------------------ statistics


@dataclass
class MetricStat:
    mean: float
    ci_low: float
    ci_high: float
    p_value: float | None
    n: int
    samples: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StatSummary:
    label: str
    stats: dict[str, MetricStat]
    baseline: str | None = None

    def to_dict(self) -> dict:
        return {"label": self.label, "baseline": self.baseline,
                "stats": {k: v.to_dict() for k, v in self.stats.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> StatSummary:
        return cls(d["label"], {k: MetricStat(**v) for k, v in d["stats"].items()},
                   d.get("baseline"))

    def samples(self) -> dict[str, list[float]]:
        return {k: v.samples for k, v in self.stats.items()}


def mean_ci(samples, level: float = 0.95) -> tuple[float, float, float]:
    x = np.asarray(samples, dtype=np.float64)
    mean = float(x.mean())
    if x.size < 2:
        return mean, mean, mean
    sd = float(x.std(ddof=1))
    half = float(stats.t.ppf(0.5 + level / 2, x.size - 1)) * sd / math.sqrt(x.size)
    return mean, mean - half, mean + half


def welch_p_value(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    va = a.var(ddof=1) if a.size > 1 else 0.0
    vb = b.var(ddof=1) if b.size > 1 else 0.0
    if va == 0 and vb == 0:
        return 1.0 if a.mean() == b.mean() else 0.0
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


def summarize(samples: Mapping[str, Sequence[float]], label: str,
              baseline: Mapping[str, Sequence[float]] | None = None,
              baseline_label: str | None = None) -> StatSummary:
    """Mean, t-based 95% CI and Welch p-value against ``baseline`` for each metric."""
    if baseline is not None and set(samples) != set(baseline):
        diff = sorted(set(samples) ^ set(baseline))
        raise ContractError(f"metric sets differ from baseline: {diff[:5]}")
    out = {}
    for key, values in samples.items():
        values = [float(v) for v in values]
        finite = [v for v in values if math.isfinite(v)]
        if not finite:
            out[key] = MetricStat(math.nan, math.nan, math.nan, None, 0, values)
            continue
        mean, lo, hi = mean_ci(finite)
        p = None
        if baseline is not None:
            base = [float(v) for v in baseline[key] if math.isfinite(float(v))]
            p = welch_p_value(finite, base) if base and len(finite) > 1 and len(base) > 1 else None
        out[key] = MetricStat(mean, lo, hi, p, len(finite), values)
    return StatSummary(label, out, baseline_label)


def run_single(bundle_factory: Callable[[Fold], tuple[DatasetBundle, np.ndarray]], fold: Fold,
               plan: TrainPlan, repeat: int, labels=None) -> tuple[RunResult, ModelStack]:
    """One repeat on one fold: resample train/validation rows, encode, train, evaluate."""
    from .data import resample_train_val

    resampled = resample_train_val(fold, labels, derive_seed(plan.seed, "val", repeat, fold.index))
    bundle, unseen = bundle_factory(resampled)
    run_plan = replace(plan, seed=derive_seed(plan.seed, "model", repeat, fold.index))
    stack = assemble(plan.variant, run_plan.stack_config(bundle))
    return train(stack, bundle, resampled, run_plan, unseen, repeat=repeat), stack


def repeat_samples(results: Sequence[RunResult]) -> dict[str, list[float]]:
    """Pool test predictions across folds per repeat; one metric sample per repeat."""
    by_repeat: dict[int, list[pd.DataFrame]] = {}
    for res in results:
        by_repeat.setdefault(res.repeat, []).append(res.predictions)
    per_repeat = []
    for r in sorted(by_repeat):
        pooled = pd.concat(by_repeat[r], ignore_index=True)
        per_repeat.append(metrics_from_predictions(pooled, infer_task(pooled),
                                                   sensitive_columns(pooled)))
    keys = sorted(set().union(*per_repeat)) if per_repeat else []
    return {k: [m.get(k, math.nan) for m in per_repeat] for k in keys}


def _headless(key: str) -> str:
    parts = key.split("/")
    return "/".join(parts[:1] + parts[2:])


def compare_to_baseline(samples: Mapping[str, Sequence[float]], label: str,
                        baseline: StatSummary | None) -> StatSummary:
    """Summarize ``samples`` with p-values against the baseline's samples.

    Heads present in only one of the two groups (a variant without a mixed-effects
    head against one with it) are compared on the shared heads. Any other
    difference in metric sets is a contract violation.
    """
    if baseline is None:
        return summarize(samples, label)
    base = baseline.samples()
    if {_headless(k) for k in samples} != {_headless(k) for k in base}:
        diff = sorted({_headless(k) for k in samples} ^ {_headless(k) for k in base})
        raise ContractError(f"metric sets differ from baseline {baseline.label!r}: {diff[:5]}")
    common = sorted(set(samples) & set(base))
    return summarize({k: samples[k] for k in common}, label, {k: base[k] for k in common},
                     baseline.label)


def repeated_runs(bundle_factory: Callable[[Fold], tuple[DatasetBundle, np.ndarray]],
                  folds: Sequence[Fold], plan: TrainPlan, n_repeats: int,
                  baseline: StatSummary | None = None, labels=None,
                  on_result: Callable[[RunResult], None] | None = None,
                  skip: Callable[[int, int], RunResult | None] | None = None
                  ) -> tuple[StatSummary, list[RunResult]]:
    """Train ``n_repeats`` times per fold with resampled train/validation rows.

    Test rows stay fixed. Each repeat pools its test predictions across folds
    into one metric sample. ``bundle_factory(fold)`` encodes the data using the
    fold's training rows and returns the bundle plus the unseen-row indices.
    ``skip(repeat, fold)`` may return an already computed result (resume).
    """
    if n_repeats < 2:
        raise ContractError("repeated_runs needs n_repeats >= 2")
    results: list[RunResult] = []
    for r in range(n_repeats):
        for fold in folds:
            res = skip(r, fold.index) if skip else None
            if res is None:
                res, _ = run_single(bundle_factory, fold, plan, r, labels)
                if on_result:
                    on_result(res)
            results.append(res)
    return compare_to_baseline(repeat_samples(results), plan.variant, baseline), results


PRED_BASE_COLUMNS = ("id", "split", "head", "score", "pred", "label", "cluster", "repeat", "fold")


def sensitive_columns(table: pd.DataFrame) -> list[str]:
    return [c for c in table.columns if c not in PRED_BASE_COLUMNS and not c.startswith("cf:")]


def infer_task(table: pd.DataFrame) -> str:
    labels = np.unique(table["label"].to_numpy(dtype=np.float64))
    return "classification" if set(labels.tolist()) <= {0.0, 1.0} else "regression"


# ---------------------------------------------------------------- random search


@dataclass
class SearchSpace:
    """Log-uniform ranges per loss weight plus optional discrete architecture choices."""

    weights: dict[str, tuple[float, float]] = field(default_factory=dict)
    fe_hidden: list[tuple[int, ...]] = field(default_factory=list)
    lr: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.weights and not self.fe_hidden and self.lr is None:
            raise ConfigurationError("search space is empty")
        for name, (lo, hi) in self.weights.items():
            if name not in L.LossWeights.__dataclass_fields__:
                raise ConfigurationError(f"unknown loss weight {name!r}")
            if not 0 < lo <= hi:
                raise ConfigurationError(f"{name}: log-uniform range needs 0 < low <= high")

    def sample(self, rng: np.random.Generator, base: TrainPlan) -> TrainPlan:
        changes = {}
        for name in sorted(self.weights):
            lo, hi = self.weights[name]
            changes[name] = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
        plan = replace(base, weights=base.weights.replace(**changes))
        if self.fe_hidden:
            plan = replace(plan, fe_hidden=tuple(self.fe_hidden[rng.integers(len(self.fe_hidden))]))
        if self.lr is not None:
            lo, hi = self.lr
            plan = replace(plan, lr=float(math.exp(rng.uniform(math.log(lo), math.log(hi)))))
        return plan


@dataclass
class Trial:
    plan: TrainPlan
    score: float
    details: dict


def random_search(space: SearchSpace, budget: int, objective_fn: Callable[[TrainPlan], tuple[float, dict]],
                  base_plan: TrainPlan, seed: int = 0) -> tuple[TrainPlan, list[Trial]]:
    """Sample ``budget`` plans and return the highest-scoring one (first wins ties)."""
    if budget < 1:
        raise ConfigurationError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    trials = []
    for _ in range(budget):
        plan = space.sample(rng, base_plan)
        score, details = objective_fn(plan)
        trials.append(Trial(plan, float(score), details))
    best = max(range(len(trials)), key=lambda i: (trials[i].score, -i))
    return trials[best].plan, trials


def fairness_objective(bundle: DatasetBundle, fold: Fold, penalty: float = 1.0,
                       metrics: Sequence[str] | None = None, head: str = "fe"
                       ) -> Callable[[TrainPlan], tuple[float, dict]]:
    """Validation balanced accuracy minus ``penalty`` times the mean fairness metric.

    ``metrics`` defaults to TPR_SD and FPR_SD; for regression it defaults to
    MSE_SD and the score is ``-MSE - penalty * mean(MSE_SD)``.
    """
    if metrics is None:
        metrics = ("TPR_SD", "FPR_SD") if bundle.task == "classification" else ("MSE_SD",)

    def _objective(plan: TrainPlan) -> tuple[float, dict]:
        stack = assemble(plan.variant, plan.stack_config(bundle))
        fit(stack, bundle, fold.train, fold.val, plan)
        thresholds = {}
        if bundle.task == "classification":
            for h in (["fe", "me"] if stack.is_mixed else ["fe"]):
                sc = _predict_rows(stack, bundle.X[fold.train], bundle.z[fold.train], h)
                thresholds[h] = youden_threshold(bundle.y[fold.train], sc)
        table = prediction_table(stack, bundle, {"val": fold.val}, thresholds)
        m = metrics_from_predictions(table, bundle.task, list(bundle.S))
        use = head if f"val/{head}/{'balanced_accuracy' if bundle.task == 'classification' else 'MSE'}" in m else "fe"
        fair = [m[f"val/{use}/{v}/{k}"] for v in bundle.S for k in metrics
                if f"val/{use}/{v}/{k}" in m]
        fair_mean = float(np.mean(fair)) if fair else 0.0
        if bundle.task == "classification":
            score = m[f"val/{use}/balanced_accuracy"] - penalty * fair_mean
        else:
            score = -m[f"val/{use}/MSE"] - penalty * fair_mean
        return score, {"fairness": fair_mean, "metrics": m}

    return _objective
