"""Scalar loss terms and the weighted objectives of the model family.

Each ``compose_*`` function returns the objective value exactly as written for
its variant (adversary terms enter with a minus sign). The training loop decides
how the adversaries themselves are optimized; see ``fairmedl.training``.

Task predictions are passed as *logits* for classification and as raw values
for regression, so the binary cross-entropy can use the fused stable form.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, DegenerateInputError

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_F: float = 1.0
    lambda_g: float = 1.0
    lambda_K: float = 1e-3
    lambda_D: float = 1.0
    lambda_y: float = 1.0
    lambda_z: float = 1.0
    lambda_s: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value >= 0):
                raise ConfigurationError(f"{f.name} must be finite and >= 0, got {value!r}")

    def replace(self, **changes) -> LossWeights:
        return LossWeights(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)


def _check_lengths(a, b, what: str) -> None:
    if len(a) != len(b):
        raise ContractError(f"{what}: length mismatch {len(a)} vs {len(b)}")


def _column(t) -> Tensor:
    t = ad.as_tensor(t)
    return ad.reshape(t, (-1,)) if t.data.ndim != 1 else t


# ------------------------------------------------------------ primitive terms


def bce(y, p) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` (clamped to [1e-12, 1-1e-12])."""
    p = _column(p)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    _check_lengths(y, p.data, "bce")
    p = ad.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p)).mean()


def cce(z, logits) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    return ad.cross_entropy_logits(logits, np.asarray(z))


def mse(y, y_hat) -> Tensor:
    y_hat = _column(y_hat)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    _check_lengths(y, y_hat.data, "mse")
    diff = y_hat - y
    return (diff * diff).mean()


def task_loss(y, pred, task: str) -> Tensor:
    """BCE on logits for classification, MSE for regression."""
    if task == "classification":
        pred = _column(pred)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        _check_lengths(y, pred.data, "task_loss")
        return ad.bce_logits(pred, y)
    if task == "regression":
        return mse(y, pred)
    raise ConfigurationError(f"unknown task {task!r}")


def kl_gaussian(mu_q, var_q, var_p: float = 1.0) -> Tensor:
    """KL(q || p) summed over parameters, q = N(mu_q, var_q), p = N(0, var_p)."""
    if not var_p > 0:
        raise ContractError(f"prior variance must be > 0, got {var_p}")
    mu_q, var_q = ad.as_tensor(mu_q), ad.as_tensor(var_q)
    if np.any(var_q.data <= 0):
        raise ContractError("posterior variances must be > 0")
    ratio = var_q * (1.0 / var_p)
    return (0.5 * (ratio + mu_q * mu_q * (1.0 / var_p) - 1.0 - ad.log(ratio))).sum()


def kl_gaussian_logvar(mu_q, logvar_q, var_p: float = 1.0) -> Tensor:
    """Same as :func:`kl_gaussian` but parameterized by log-variance."""
    mu_q, logvar_q = ad.as_tensor(mu_q), ad.as_tensor(logvar_q)
    var_q = ad.exp(logvar_q)
    return (
        0.5 * (var_q * (1.0 / var_p) + mu_q * mu_q * (1.0 / var_p) - 1.0 - logvar_q + math.log(var_p))
    ).sum()


def pearson_correlation(a, b) -> Tensor:
    """Pearson r between ``a`` (differentiable) and ``b``, clamped to [-1, 1]."""
    a = _column(a)
    b = ad.as_tensor(b)
    b = ad.reshape(b, (-1,)) if b.data.ndim != 1 else b
    _check_lengths(a.data, b.data, "pearson_correlation")
    if a.data.size < 2:
        raise ContractError("pearson_correlation needs at least 2 samples")
    ac = a - a.mean()
    bc = b - b.mean()
    saa = (ac * ac).sum()
    sbb = (bc * bc).sum()
    if saa.item() <= 0.0 or sbb.item() <= 0.0:
        raise DegenerateInputError("zero variance input to pearson_correlation")
    r = (ac * bc).sum() / ad.sqrt(saa * sbb)
    return ad.clip(r, -1.0, 1.0)


def absolute_correlation_penalty(pred, indicators: Sequence[np.ndarray]) -> Tensor:
    """Sum of ``|pearson(pred, column)|`` over indicator columns.

    Columns or predictions without variance contribute 0.
    """
    total = Tensor(0.0)
    for column in indicators:
        try:
            total = total + ad.tabs(pearson_correlation(pred, column))
        except DegenerateInputError:
            continue
    return total


# --------------------------------------------------------------- compositions


def _require(value, what: str):
    if value is None:
        raise ContractError(f"missing {what}")
    return value


def _debias_terms(s: Mapping[str, np.ndarray], s_logits: Mapping[str, Tensor]) -> list[Tensor]:
    _require(s_logits, "debias adversary logits")
    missing = set(s) - set(s_logits)
    if missing:
        raise ContractError(f"no adversary logits for sensitive variables {sorted(missing)}")
    return [cce(s[name], s_logits[name]) for name in s]


def compose_da(y, y_hat_F, z, z_logits, w: LossWeights, task: str = "classification") -> Tensor:
    """``lambda_y * L_task(y, y_F) - lambda_z * L_CCE(Z, Z_hat)``."""
    _require(z_logits, "cluster adversary logits")
    return w.lambda_y * task_loss(y, y_hat_F, task) - w.lambda_z * cce(z, z_logits)


def compose_fair_da(
    y, y_hat_F, z, z_logits, s, s_logits, w: LossWeights, task: str = "classification"
) -> Tensor:
    """DA objective minus ``lambda_s`` times the summed debias-adversary CCE terms."""
    base = compose_da(y, y_hat_F, z, z_logits, w, task)
    terms = _debias_terms(s, s_logits)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return base - w.lambda_s * total


def compose_fair_da_acl(
    y, y_hat_F, z, z_logits, indicators: Sequence[np.ndarray], w: LossWeights,
    task: str = "classification",
) -> Tensor:
    """DA objective plus ``lambda_s * sum |r(y_F, S_col)|`` over indicator columns.

    For classification the correlation uses the predicted probability.
    """
    base = compose_da(y, y_hat_F, z, z_logits, w, task)
    score = ad.sigmoid(_column(y_hat_F)) if task == "classification" else _column(y_hat_F)
    return base + w.lambda_s * absolute_correlation_penalty(score, indicators)


def compose_armed(
    y, y_hat_M, y_hat_F, z, z_logits, kl, w: LossWeights, task: str = "classification"
) -> Tensor:
    """``L(y, y_M) + lambda_F L(y, y_F) - lambda_g L_CCE(Z, Z_hat) + lambda_K KL``."""
    _require(y_hat_M, "mixed-effects prediction")
    _require(z_logits, "cluster adversary logits")
    kl = ad.as_tensor(_require(kl, "KL term"))
    if kl.data.size != 1 or kl.item() < 0:
        raise ContractError(f"KL term must be a non-negative scalar, got {kl.data}")
    return (
        task_loss(y, y_hat_M, task)
        + w.lambda_F * task_loss(y, y_hat_F, task)
        - w.lambda_g * cce(z, z_logits)
        + w.lambda_K * kl
    )


def compose_fair_medl(
    y, y_hat_M, y_hat_F, z, z_logits, kl, s, s_logits_F, s_logits_M, w: LossWeights,
    task: str = "classification",
) -> Tensor:
    """ARMED objective minus ``lambda_D`` times the averaged debias-adversary CCE.

    Per head the CCE is averaged over sensitive variables; the FE and ME heads
    are then averaged.
    """
    armed = compose_armed(y, y_hat_M, y_hat_F, z, z_logits, kl, w, task)
    fe_terms = _debias_terms(s, s_logits_F)
    me_terms = _debias_terms(s, s_logits_M)
    fe = _mean(fe_terms)
    me = _mean(me_terms)
    return armed - w.lambda_D * ((fe + me) * 0.5)


def _mean(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))
