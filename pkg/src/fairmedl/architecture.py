"""Subnetworks and model stacks for the mixed-effects model family.

A :class:`ModelStack` owns whichever subnetworks its variant needs:

===========  =====================================================
variant      subnetworks
===========  =====================================================
base         fe
da           fe, cluster_adv
fair_da      fe, cluster_adv, debias_fe
fair_da_acl  fe, cluster_adv
armed        fe, cluster_adv, re, zpred (+ mixing)
fair_medl    fe, cluster_adv, debias_fe, re, debias_me, zpred
===========  =====================================================

Each subnetwork draws its initial weights from its own seeded stream, so adding
a subnetwork to a stack never changes the initial weights of the others.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, DimensionError
from .losses import kl_gaussian_logvar

VARIANTS: dict[str, tuple[str, ...]] = {
    "base": ("fe",),
    "da": ("fe", "cluster_adv"),
    "fair_da": ("fe", "cluster_adv", "debias_fe"),
    "fair_da_acl": ("fe", "cluster_adv"),
    "armed": ("fe", "cluster_adv", "re", "zpred"),
    "fair_medl": ("fe", "cluster_adv", "debias_fe", "re", "debias_me", "zpred"),
}
MAIN_PARTS = ("fe", "re")
ADVERSARY_PARTS = ("cluster_adv", "debias_fe", "debias_me")
MIXED_VARIANTS = ("armed", "fair_medl")


def subnetwork_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class Dense:
    """Affine layer with Glorot-uniform weights and zero bias."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        limit = np.sqrt(6.0 / (n_in + n_out))
        self.W = Tensor(rng.uniform(-limit, limit, size=(n_in, n_out)), requires_grad=True,
                        name=f"{name}.W")
        self.b = Tensor(np.zeros((1, n_out)), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.W) + self.b

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]


class MLP:
    """Stack of dense layers; ``activate_last`` also applies the activation to the output."""

    def __init__(self, sizes, rng, name: str, activation: str = "relu",
                 activate_last: bool = False):
        if len(sizes) < 2:
            raise ConfigurationError(f"{name}: need at least input and output sizes")
        ad.activation(Tensor(0.0), activation)  # validates the name
        self.layers = [Dense(a, b, rng, f"{name}.{i}") for i, (a, b) in
                       enumerate(zip(sizes[:-1], sizes[1:]))]
        self.activation = activation
        self.activate_last = activate_last

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.activate_last:
                x = ad.activation(x, self.activation)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


class FEPredictor:
    """Encoder producing the latent ``g`` followed by a linear task head."""

    def __init__(self, n_features: int, hidden, rng, activation: str = "relu"):
        self.n_features = n_features
        self.encoder = MLP([n_features, *hidden], rng, "fe.encoder", activation, activate_last=True)
        self.head = Dense(hidden[-1], 1, rng, "fe.head")
        self.latent_dim = hidden[-1]

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[-1] != self.n_features:
            raise ContractError(f"expected {self.n_features} features, got {x.shape[-1]}")
        g = self.encoder(x)
        return g, self.head(g)

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.head.parameters()


class ClusterAdversary:
    def __init__(self, latent_dim: int, n_clusters: int, hidden, rng, activation="relu"):
        self.net = MLP([latent_dim, *hidden, n_clusters], rng, "cluster_adv", activation)
        self.n_clusters = n_clusters

    def __call__(self, g: Tensor) -> Tensor:
        return self.net(g)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()


class DebiasAdversary:
    """Predicts each sensitive variable's category from ``(prediction, target)``."""

    def __init__(self, sensitive: dict[str, int], hidden, rng, name: str, activation="relu"):
        self.trunk = MLP([2, *hidden], rng, f"{name}.trunk", activation, activate_last=True)
        self.heads = {var: Dense(hidden[-1], k, rng, f"{name}.head.{var}")
                      for var, k in sensitive.items()}

    def __call__(self, pred: Tensor, y: np.ndarray) -> dict[str, Tensor]:
        pred = ad.reshape(pred, (-1, 1))
        h = self.trunk(ad.concat([pred, Tensor(np.asarray(y, float).reshape(-1, 1))], axis=1))
        return {var: head(h) for var, head in self.heads.items()}

    def parameters(self) -> list[Tensor]:
        return self.trunk.parameters() + [p for h in self.heads.values() for p in h.parameters()]


class VariationalREBlock:
    """Per-cluster Gaussian posteriors over a latent slope vector and a scalar intercept."""

    def __init__(self, n_clusters: int, latent_dim: int, prior_var: float = 1.0,
                 init_logvar: float = -6.0):
        if prior_var <= 0:
            raise ConfigurationError("prior variance must be > 0")
        self.prior_var = prior_var
        self.mu_slope = Tensor(np.zeros((n_clusters, latent_dim)), True, "re.mu_slope")
        self.logvar_slope = Tensor(np.full((n_clusters, latent_dim), init_logvar), True,
                                   "re.logvar_slope")
        self.mu_int = Tensor(np.zeros((n_clusters, 1)), True, "re.mu_int")
        self.logvar_int = Tensor(np.full((n_clusters, 1), init_logvar), True, "re.logvar_int")

    def sample(self, z: np.ndarray, rng: np.random.Generator | None) -> tuple[Tensor, Tensor]:
        """Reparameterized draw ``mu + sigma * eps`` for each row's cluster; means if ``rng`` is None."""
        mu_s = ad.take_rows(self.mu_slope, z)
        mu_i = ad.take_rows(self.mu_int, z)
        if rng is None:
            return mu_s, mu_i
        eps_s = rng.standard_normal(mu_s.shape)
        eps_i = rng.standard_normal(mu_i.shape)
        sd_s = ad.exp(ad.take_rows(self.logvar_slope, z) * 0.5)
        sd_i = ad.exp(ad.take_rows(self.logvar_int, z) * 0.5)
        return mu_s + sd_s * eps_s, mu_i + sd_i * eps_i

    def kl(self) -> Tensor:
        return (kl_gaussian_logvar(self.mu_slope, self.logvar_slope, self.prior_var)
                + kl_gaussian_logvar(self.mu_int, self.logvar_int, self.prior_var))

    def parameters(self) -> list[Tensor]:
        return [self.mu_slope, self.logvar_slope, self.mu_int, self.logvar_int]


class ZPredictor:
    def __init__(self, n_features: int, n_clusters: int, hidden, rng, activation="relu"):
        self.net = MLP([n_features, *hidden, n_clusters], rng, "zpred", activation)

    def logits(self, x: Tensor) -> Tensor:
        return self.net(x)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.softmax(self.net(x))

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()


def mix(g: Tensor, eta_F: Tensor, head: Dense, u_slope: Tensor, u_int: Tensor) -> Tensor:
    """Mixed-effects logit ``w'(g * (1 + u_slope)) + b + u_int``.

    Written as ``eta_F + w'(g * u_slope) + u_int`` so zero random effects give
    back ``eta_F`` exactly.
    """
    return eta_F + ad.matmul(g * u_slope, head.W) + u_int


@dataclass
class StackConfig:
    n_features: int
    n_clusters: int
    sensitive: dict[str, int]
    task: str = "classification"
    fe_hidden: tuple[int, ...] = (32, 32)
    adv_hidden: tuple[int, ...] = (16, 16)
    z_hidden: tuple[int, ...] = (32, 32)
    activation: str = "relu"
    prior_var: float = 1.0
    re_init_logvar: float = -6.0
    seed: int = 0
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if self.n_features < 1 or self.n_clusters < 1:
            raise ConfigurationError("n_features and n_clusters must be >= 1")
        self.fe_hidden = tuple(int(h) for h in self.fe_hidden)
        self.adv_hidden = tuple(int(h) for h in self.adv_hidden)
        self.z_hidden = tuple(int(h) for h in self.z_hidden)
        self.sensitive = {str(k): int(v) for k, v in self.sensitive.items()}

    def to_dict(self) -> dict:
        return asdict(self)


class ModelStack:
    def __init__(self, variant: str, config: StackConfig):
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {variant!r}; expected one of {list(VARIANTS)}")
        self.variant = variant
        self.config = config
        self.task = config.task
        self.parts = VARIANTS[variant]
        c = config
        self.fe = FEPredictor(c.n_features, c.fe_hidden, subnetwork_rng(c.seed, "fe"), c.activation)
        h = self.fe.latent_dim
        self.cluster_adv = self.debias_fe = self.debias_me = self.re = self.zpred = None
        if "cluster_adv" in self.parts:
            self.cluster_adv = ClusterAdversary(h, c.n_clusters, c.adv_hidden,
                                                subnetwork_rng(c.seed, "cluster_adv"), c.activation)
        if "debias_fe" in self.parts:
            self.debias_fe = DebiasAdversary(c.sensitive, c.adv_hidden,
                                             subnetwork_rng(c.seed, "debias_fe"), "debias_fe",
                                             c.activation)
        if "debias_me" in self.parts:
            self.debias_me = DebiasAdversary(c.sensitive, c.adv_hidden,
                                             subnetwork_rng(c.seed, "debias_me"), "debias_me",
                                             c.activation)
        if "re" in self.parts:
            self.re = VariationalREBlock(c.n_clusters, h, c.prior_var, c.re_init_logvar)
        if "zpred" in self.parts:
            self.zpred = ZPredictor(c.n_features, c.n_clusters, c.z_hidden,
                                    subnetwork_rng(c.seed, "zpred"), c.activation)
        self.trained = False
        self.zpred_trained = False

    # -------------------------------------------------------------- parameters

    def part(self, name: str):
        return getattr(self, name)

    def named_parameters(self, parts=None) -> Iterator[tuple[str, Tensor]]:
        for name in parts if parts is not None else self.parts:
            module = getattr(self, name, None)
            if module is None:
                continue
            for p in module.parameters():
                yield p.name, p

    def parameters(self, parts=None) -> list[Tensor]:
        return [p for _, p in self.named_parameters(parts)]

    def count_parameters(self, parts=None) -> int:
        return int(sum(p.data.size for p in self.parameters(parts)))

    @property
    def is_mixed(self) -> bool:
        return self.re is not None

    # ----------------------------------------------------------------- forwards

    def fe_forward(self, x) -> tuple[Tensor, Tensor]:
        """Latent ``g`` and FE logit (classification) or FE value (regression)."""
        return self.fe(ad.as_tensor(x))

    def output(self, eta: Tensor) -> Tensor:
        return ad.sigmoid(eta) if self.task == "classification" else eta

    def me_forward(self, g: Tensor, eta_F: Tensor, z=None, *, u=None,
                   rng: np.random.Generator | None = None) -> Tensor:
        """Mixed-effects logit for seen clusters ``z`` (or explicit random effects ``u``)."""
        if self.re is None:
            raise ContractError(f"variant {self.variant!r} has no random-effects block")
        if u is None:
            z = np.asarray(z, dtype=np.intp)
            if z.size and (z.min() < 0 or z.max() >= self.config.n_clusters):
                raise ContractError("me_forward got an unseen cluster id; use ood_infer for OOD rows")
            u = self.re.sample(z, rng)
        u_slope, u_int = u
        return mix(g, eta_F, self.fe.head, u_slope, u_int)

    def ood_random_effects(self, x) -> tuple[Tensor, Tensor]:
        if self.zpred is None or not self.zpred_trained:
            raise ContractError("z-predictor is not trained; cannot infer OOD random effects")
        probs = self.zpred(ad.as_tensor(x))
        return ad.matmul(probs, self.re.mu_slope), ad.matmul(probs, self.re.mu_int)

    def ood_infer(self, x) -> Tensor:
        """ME logit for rows from unseen clusters: RE means mixed by predicted membership."""
        x = ad.as_tensor(x)
        g, eta_F = self.fe_forward(x)
        return self.me_forward(g, eta_F, u=self.ood_random_effects(x))

    def predict(self, x, head: str = "fe", z=None) -> np.ndarray:
        """Eval-mode scores: probabilities (classification) or values (regression).

        ``head="me"`` uses the true clusters when ``z`` is given, else ``ood_infer``.
        """
        with ad.no_grad():
            x = ad.as_tensor(x)
            g, eta_F = self.fe_forward(x)
            if head == "fe":
                eta = eta_F
            elif head == "me":
                if z is None:
                    eta = self.me_forward(g, eta_F, u=self.ood_random_effects(x))
                else:
                    eta = self.me_forward(g, eta_F, z)
            else:
                raise ConfigurationError(f"unknown head {head!r}")
            return self.output(eta).data.reshape(-1).copy()

    # -------------------------------------------------------------- checkpoints

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise ContractError(f"checkpoint lacks parameters {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.data.shape:
                raise DimensionError(f"{name}: checkpoint shape {value.shape} != {p.data.shape}")
            p.data[...] = value

    def save(self, path) -> None:
        meta = {"variant": self.variant, "config": self.config.to_dict(),
                "trained": self.trained, "zpred_trained": self.zpred_trained,
                "format": "fairmedl-checkpoint-1"}
        arrays = {f"param/{k}": v for k, v in self.state_dict().items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                     **arrays)

    @classmethod
    def load(cls, path) -> ModelStack:
        with np.load(Path(path), allow_pickle=False) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            state = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        stack = cls(meta["variant"], StackConfig(**meta["config"]))
        stack.load_state_dict(state)
        stack.trained = meta["trained"]
        stack.zpred_trained = meta["zpred_trained"]
        return stack


def assemble(variant: str, config: StackConfig) -> ModelStack:
    return ModelStack(variant, config)
