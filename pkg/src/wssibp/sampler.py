"""Forward sampler of the generative process, with ground truth kept alongside.

Each planted factor k has appearance row ``A_true[k]``. Per image, sticks
v_k ~ Beta(alpha, 1) give pi_k = prod_{t<=k} v_t, an input annotation L_k
gates which annotated factors may appear, every patch switches factor k on
with probability pi_k * L_k, and the patch is Z_j A + sigma * noise. Image
labels are the OR over patches of the annotated factors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import FactorLayout, ImageBag, ValidationError


@dataclass(frozen=True)
class SamplerParams:
    m: int
    n: int
    k_bg: int = 3
    alpha: float = 2.0
    sigma: float = 0.5
    sigma_a: float = 1.0
    # Rescale planted rows to norm ``separation * sigma`` when set.
    separation: Optional[float] = None
    a_true: Optional[np.ndarray] = None
    # Per-image probability that an annotated factor is switched on in the
    # input annotation L; None keeps every factor available.
    label_rate: Optional[float] = None

    def __post_init__(self):
        if self.m < 1:
            raise ValidationError("m must be >= 1")
        if self.n < 1:
            raise ValidationError("n must be >= 1")
        if self.k_bg < 0:
            raise ValidationError("k_bg must be >= 0")
        if not (self.alpha > 0 and self.sigma > 0 and self.sigma_a > 0):
            raise ValidationError("alpha, sigma and sigma_a must be > 0")
        if self.label_rate is not None and not 0.0 <= self.label_rate <= 1.0:
            raise ValidationError("label_rate must lie in [0, 1]")
        if self.separation is not None and self.separation < 0:
            raise ValidationError("separation must be >= 0")


@dataclass
class GroundTruth:
    a_true: np.ndarray  # (K, D)
    z_true: list  # per image (N_i, K) int arrays
    pi_true: list  # per image (K,) arrays
    labels_true: list  # per image (k_o + k_a,) int arrays
    ids: list
    layout: FactorLayout

    def object_attributes(self, i: int) -> dict:
        """Map each present object to the set of attributes sharing a patch with it."""
        z = self.z_true[i]
        lay = self.layout
        out = {}
        for k in lay.objects:
            on = z[:, k] == 1
            if on.any():
                attrs = np.flatnonzero(z[on][:, lay.k_o : lay.k_oa].any(axis=0)) + lay.k_o
                out[k] = {int(a) for a in attrs}
        return out

    def colocated(self, i: int, obj: int, attrs) -> bool:
        """Whether some patch of image ``i`` has the object and every listed attribute."""
        z = self.z_true[i]
        cols = [obj, *attrs]
        return bool(np.any(np.all(z[:, cols] == 1, axis=1)))

    def to_json(self) -> dict:
        return {
            "layout": self.layout.to_json(),
            "a_true": self.a_true.tolist(),
            "images": [
                {
                    "id": self.ids[i],
                    "z": self.z_true[i].tolist(),
                    "pi": self.pi_true[i].tolist(),
                    "labels": self.labels_true[i].tolist(),
                }
                for i in range(len(self.ids))
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        images = obj["images"]
        return cls(
            a_true=np.asarray(obj["a_true"], dtype=np.float64),
            z_true=[np.asarray(im["z"], dtype=np.int8) for im in images],
            pi_true=[np.asarray(im["pi"], dtype=np.float64) for im in images],
            labels_true=[np.asarray(im["labels"], dtype=np.int8) for im in images],
            ids=[str(im["id"]) for im in images],
            layout=FactorLayout.from_json(obj["layout"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "GroundTruth":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def well_separated_appearances(k: int, d: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Mutually orthogonal rows of norm 5 * sigma."""
    if k > d:
        raise ValidationError(f"cannot plant {k} orthogonal rows in dimension {d}")
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return 5.0 * sigma * q[:, :k].T


def sample_dataset(layout: FactorLayout, params: SamplerParams, seed: int = 0, id_prefix: str = "img"):
    """Draw ``params.m`` bags and their ground truth."""
    rng = np.random.default_rng(seed)
    k = layout.k_oa + params.k_bg
    if params.a_true is not None:
        a_true = np.asarray(params.a_true, dtype=np.float64)
        if a_true.shape != (k, layout.d):
            raise ValidationError(f"a_true shape {a_true.shape} != ({k}, {layout.d})")
    else:
        a_true = rng.normal(0.0, params.sigma_a, size=(k, layout.d))
    if params.separation is not None:
        norms = np.linalg.norm(a_true, axis=1, keepdims=True)
        a_true = a_true / np.where(norms > 0, norms, 1.0) * (params.separation * params.sigma)

    bags, zs, pis, labels = [], [], [], []
    ids = [f"{id_prefix}{i:05d}" for i in range(params.m)]
    for i in range(params.m):
        v = rng.beta(params.alpha, 1.0, size=k)
        pi = np.cumprod(v)
        avail = np.ones(k)
        if params.label_rate is not None:
            avail[: layout.k_oa] = rng.random(layout.k_oa) < params.label_rate
        z = (rng.random((params.n, k)) < pi * avail).astype(np.int8)
        x = z @ a_true + params.sigma * rng.normal(size=(params.n, layout.d))
        lab = z[:, : layout.k_oa].any(axis=0).astype(np.int8)
        bags.append(ImageBag(id=ids[i], patches=x, labels=lab))
        zs.append(z)
        pis.append(pi)
        labels.append(lab)
    truth = GroundTruth(a_true=a_true, z_true=zs, pi_true=pis, labels_true=labels, ids=ids, layout=layout)
    return bags, truth


def sample_well_separated(layout: FactorLayout, params: SamplerParams, seed: int = 0, id_prefix: str = "img"):
    """``sample_dataset`` with orthogonal planted rows of norm 5 * sigma."""
    rng = np.random.default_rng([seed, 1])
    a_true = well_separated_appearances(layout.k_oa + params.k_bg, layout.d, params.sigma, rng)
    params = SamplerParams(
        m=params.m, n=params.n, k_bg=params.k_bg, alpha=params.alpha,
        sigma=params.sigma, sigma_a=params.sigma_a, a_true=a_true,
        label_rate=params.label_rate,
    )
    return sample_dataset(layout, params, seed=seed, id_prefix=id_prefix)


def bag_from_factors(
    a_true: np.ndarray,
    patch_factors: list,
    sigma: float,
    rng: np.random.Generator,
    bag_id: str = "bag",
) -> tuple[ImageBag, np.ndarray]:
    """Build one unlabeled bag whose patch j switches on exactly ``patch_factors[j]``."""
    k, d = a_true.shape
    z = np.zeros((len(patch_factors), k), dtype=np.int8)
    for j, factors in enumerate(patch_factors):
        z[j, list(factors)] = 1
    x = z @ a_true + sigma * rng.normal(size=(len(patch_factors), d))
    return ImageBag(id=bag_id, patches=x), z
