"""Domain types and on-disk formats for bags, labels and trained models."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

MODEL_FORMAT_VERSION = 1


class ValidationError(ValueError):
    """Raised when a value violates a domain invariant."""


class FormatError(ValueError):
    """Raised for malformed or incompatible files."""


@dataclass(frozen=True)
class FactorLayout:
    """Factor index layout.

    Indices are 0-based: ``[0, k_o)`` objects, ``[k_o, k_o + k_a)``
    attributes, ``[k_o + k_a, k_max)`` background.
    """

    k_o: int
    k_a: int
    k_max: int
    d: int

    def __post_init__(self):
        if self.k_o < 1:
            raise ValidationError("k_o must be >= 1")
        if self.k_a < 0:
            raise ValidationError("k_a must be >= 0")
        if self.d < 1:
            raise ValidationError("d must be >= 1")
        if self.k_max <= self.k_o + self.k_a:
            raise ValidationError("k_max must exceed k_o + k_a so background factors exist")

    @property
    def k_oa(self) -> int:
        return self.k_o + self.k_a

    @property
    def objects(self) -> range:
        return range(0, self.k_o)

    @property
    def attributes(self) -> range:
        return range(self.k_o, self.k_oa)

    @property
    def background(self) -> range:
        return range(self.k_oa, self.k_max)

    def effective_labels(self, labels: Optional[np.ndarray]) -> np.ndarray:
        """Length-``k_max`` 0/1 mask; background is always 1, ``None`` means all 1."""
        out = np.ones(self.k_max, dtype=np.float64)
        if labels is not None:
            out[: self.k_oa] = labels
        return out

    def to_json(self) -> dict:
        return {"k_o": self.k_o, "k_a": self.k_a, "k_max": self.k_max, "d": self.d}

    @classmethod
    def from_json(cls, obj: dict) -> "FactorLayout":
        return cls(k_o=int(obj["k_o"]), k_a=int(obj["k_a"]), k_max=int(obj["k_max"]), d=int(obj["d"]))


@dataclass(frozen=True)
class ImageBag:
    id: str
    patches: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        patches = np.asarray(self.patches, dtype=np.float64)
        if patches.ndim != 2 or patches.shape[0] < 1:
            raise ValidationError(f"bag {self.id!r}: patches must be a non-empty (N, D) array")
        if not np.all(np.isfinite(patches)):
            raise ValidationError(f"bag {self.id!r}: non-finite feature value")
        object.__setattr__(self, "patches", patches)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.ndim != 1 or not np.all((labels == 0) | (labels == 1)):
                raise ValidationError(f"bag {self.id!r}: labels must be a 0/1 vector")
            object.__setattr__(self, "labels", labels.astype(np.int8))

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    def check_layout(self, layout: FactorLayout) -> None:
        if self.patches.shape[1] != layout.d:
            raise ValidationError(
                f"bag {self.id!r}: patch dimension {self.patches.shape[1]} != d={layout.d}"
            )
        if self.labels is not None and self.labels.shape[0] != layout.k_oa:
            raise ValidationError(
                f"bag {self.id!r}: label length {self.labels.shape[0]} != k_o + k_a = {layout.k_oa}"
            )

    def to_json(self) -> dict:
        obj = {"id": self.id, "patches": self.patches.tolist()}
        if self.labels is not None:
            obj["labels"] = [int(v) for v in self.labels]
        return obj


@dataclass(frozen=True)
class Hyperparams:
    alpha: float = 2.0
    sigma: float = 0.5
    sigma_a: float = 1.0
    max_sweeps: int = 200
    tol: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        for name in ("alpha", "sigma", "sigma_a"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValidationError(f"{name} must be finite and > 0")
        if self.max_sweeps < 1:
            raise ValidationError("max_sweeps must be >= 1")
        if not self.tol >= 0:
            raise ValidationError("tol must be >= 0")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")


@dataclass(frozen=True)
class Model:
    """Frozen appearance posteriors: mean ``phi`` (k_max, d) and isotropic
    variances ``phi_var`` (k_max,)."""

    layout: FactorLayout
    phi: np.ndarray
    phi_var: np.ndarray
    hyper: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=np.float64))
        object.__setattr__(self, "phi_var", np.asarray(self.phi_var, dtype=np.float64))
        self.validate()

    def validate(self) -> None:
        lay = self.layout
        if self.phi.shape != (lay.k_max, lay.d):
            raise ValidationError(f"phi shape {self.phi.shape} != ({lay.k_max}, {lay.d})")
        if self.phi_var.shape != (lay.k_max,):
            raise ValidationError(f"phi_var shape {self.phi_var.shape} != ({lay.k_max},)")
        if not np.all(np.isfinite(self.phi)):
            raise ValidationError("phi has non-finite entries")
        prior = self.hyper.sigma_a**2
        if not np.all((self.phi_var > 0) & (self.phi_var <= prior)):
            raise ValidationError("phi_var must lie in (0, sigma_a^2]")


@dataclass(frozen=True)
class PosteriorSummary:
    """Per-image posterior: ``tau`` (k_max, 2), ``nu`` (N, k_max)."""

    tau: np.ndarray
    nu: np.ndarray
    id: str = ""

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=np.float64)
        nu = np.asarray(self.nu, dtype=np.float64)
        if tau.ndim != 2 or tau.shape[1] != 2 or not np.all(tau > 0):
            raise ValidationError("tau must be a positive (K, 2) array")
        if nu.ndim != 2 or nu.shape[1] != tau.shape[0]:
            raise ValidationError("nu must have shape (N, K)")
        if not np.all((nu >= 0) & (nu <= 1)):
            raise ValidationError("nu entries must lie in [0, 1]")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "nu", nu)

    @property
    def pi_mean(self) -> np.ndarray:
        ratio = self.tau[:, 0] / (self.tau[:, 0] + self.tau[:, 1])
        return np.cumprod(ratio)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "pi_mean": self.pi_mean.tolist(),
            "nu": self.nu.tolist(),
            "tau": self.tau.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PosteriorSummary":
        return cls(tau=np.asarray(obj["tau"]), nu=np.asarray(obj["nu"]), id=str(obj["id"]))


def load_dataset(path, layout: FactorLayout) -> list[ImageBag]:
    """Read a JSON-lines dataset, validating every bag against ``layout``."""
    bags = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                bag = ImageBag(
                    id=str(obj["id"]),
                    patches=np.asarray(obj["patches"], dtype=np.float64),
                    labels=None if obj.get("labels") is None else np.asarray(obj["labels"]),
                )
                bag.check_layout(layout)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            bags.append(bag)
    return bags


def save_dataset(bags: Iterable[ImageBag], path) -> None:
    with open(path, "w") as fh:
        for bag in bags:
            fh.write(json.dumps(bag.to_json()) + "\n")


def model_to_json(model: Model) -> dict:
    model.validate()
    h = model.hyper
    return {
        "version": MODEL_FORMAT_VERSION,
        "layout": model.layout.to_json(),
        "hyper": {
            "alpha": h.alpha,
            "sigma": h.sigma,
            "sigma_a": h.sigma_a,
            "max_sweeps": h.max_sweeps,
            "tol": h.tol,
            "seed": h.seed,
        },
        "phi": model.phi.tolist(),
        "phi_var": model.phi_var.tolist(),
    }


def model_from_json(obj: dict) -> Model:
    if not isinstance(obj, dict):
        raise FormatError("model payload must be a JSON object")
    version = obj.get("version")
    if version != MODEL_FORMAT_VERSION:
        raise FormatError(f"unsupported model version {version!r}, expected {MODEL_FORMAT_VERSION}")
    try:
        hyper_obj = obj["hyper"]
        hyper = Hyperparams(
            alpha=float(hyper_obj["alpha"]),
            sigma=float(hyper_obj["sigma"]),
            sigma_a=float(hyper_obj["sigma_a"]),
            max_sweeps=int(hyper_obj.get("max_sweeps", Hyperparams.max_sweeps)),
            tol=float(hyper_obj.get("tol", Hyperparams.tol)),
            seed=int(hyper_obj.get("seed", Hyperparams.seed)),
        )
        return Model(
            layout=FactorLayout.from_json(obj["layout"]),
            phi=np.asarray(obj["phi"], dtype=np.float64),
            phi_var=np.asarray(obj["phi_var"], dtype=np.float64),
            hyper=hyper,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"corrupted model payload: {exc}") from exc


def save_model(model: Model, path) -> None:
    payload = model_to_json(model)
    Path(path).write_text(json.dumps(payload))


def load_model(path) -> Model:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupted model payload: {exc}") from exc
    return model_from_json(obj)


def save_posteriors(posts: Sequence[PosteriorSummary], path) -> None:
    with open(path, "w") as fh:
        for post in posts:
            fh.write(json.dumps(post.to_json()) + "\n")


def load_posteriors(path) -> list[PosteriorSummary]:
    posts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                posts.append(PosteriorSummary.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return posts
