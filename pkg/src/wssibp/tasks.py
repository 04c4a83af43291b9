"""Downstream procedures on inferred posteriors: free annotation, annotation
given object names, attributes given a patch set, and conjunction queries.

Factor indices are 0-based throughout, matching ``FactorLayout``. Every
argmax and ranking breaks ties toward the lower index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import FactorLayout, PosteriorSummary, ValidationError


@dataclass(frozen=True)
class Annotation:
    object: int
    location: int
    attributes: tuple  # ((attribute index, score), ...) in non-increasing score order
    object_score: float

    def to_json(self, image_id: str = "") -> dict:
        return {
            "id": image_id,
            "object": self.object,
            "patch": self.location,
            "object_score": self.object_score,
            "attributes": [[a, s] for a, s in self.attributes],
        }


def _check_post(post: PosteriorSummary, layout: FactorLayout) -> None:
    if post.nu.shape[1] != layout.k_max:
        raise ValidationError(f"posterior has {post.nu.shape[1]} factors, layout expects {layout.k_max}")


def _check_object(layout: FactorLayout, k: int) -> int:
    if not (isinstance(k, (int, np.integer)) and 0 <= k < layout.k_o):
        raise ValidationError(f"object index {k!r} outside 0..{layout.k_o - 1}")
    return int(k)


def _check_attributes(layout: FactorLayout, attrs) -> list[int]:
    out = []
    for a in attrs:
        if not (isinstance(a, (int, np.integer)) and layout.k_o <= a < layout.k_oa):
            raise ValidationError(f"attribute index {a!r} outside {layout.k_o}..{layout.k_oa - 1}")
        out.append(int(a))
    return out


def rank_descending(scores: np.ndarray) -> np.ndarray:
    """Indices sorting ``scores`` high to low, equal scores in index order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def _ranked_attributes(layout: FactorLayout, row: np.ndarray, t: Optional[int]) -> tuple:
    scores = row[layout.k_o : layout.k_oa]
    order = rank_descending(scores)
    if t is not None:
        order = order[:t]
    return tuple((int(layout.k_o + i), float(scores[i])) for i in order)


def annotate_given_names(
    post: PosteriorSummary, layout: FactorLayout, k: int, t: Optional[int] = None
) -> Annotation:
    """Locate object ``k`` at j* = argmax_j nu_jk and rank attributes on patch j*."""
    _check_post(post, layout)
    k = _check_object(layout, k)
    j = int(np.argmax(post.nu[:, k]))
    return Annotation(
        object=k,
        location=j,
        attributes=_ranked_attributes(layout, post.nu[j], t),
        object_score=float(post.pi_mean[k]),
    )


OBJECT_SCORES = ("pi_mean", "presence")


def object_scores(post: PosteriorSummary, layout: FactorLayout, kind: str = "pi_mean") -> np.ndarray:
    """Per-object evidence for one image, shape (k_o,).

    ``pi_mean`` is the posterior stick mean E[pi_k]. Being a running product
    of ratios below one it always decreases with k, so on its own it orders
    objects by index. ``presence`` is 1 - prod_j (1 - nu_jk), the probability
    that at least one patch shows object k.
    """
    if kind == "pi_mean":
        return post.pi_mean[: layout.k_o]
    if kind == "presence":
        return 1.0 - np.prod(1.0 - post.nu[:, : layout.k_o], axis=0)
    raise ValidationError(f"unknown object score {kind!r}; expected one of {OBJECT_SCORES}")


def free_annotate(
    post: PosteriorSummary,
    layout: FactorLayout,
    n_objects: int = 1,
    t: Optional[int] = None,
    threshold: Optional[float] = None,
    score: str = "pi_mean",
) -> list[Annotation]:
    """Pick objects by their evidence and annotate each.

    The ``n_objects`` highest-scoring objects are kept; with ``threshold``
    set, objects scoring at least that much are kept instead (still ranked).
    ``t`` caps the attribute list length; None returns all attributes.
    ``score`` selects the object evidence (see ``object_scores``).
    """
    _check_post(post, layout)
    if t is not None and not 1 <= t <= layout.k_a:
        raise ValidationError(f"t must lie in 1..{layout.k_a}")
    scores = object_scores(post, layout, score)
    order = rank_descending(scores)
    if threshold is None:
        if not 1 <= n_objects <= layout.k_o:
            raise ValidationError(f"n_objects must lie in 1..{layout.k_o}")
        chosen = order[:n_objects]
    else:
        chosen = [k for k in order if scores[k] >= threshold]
    out = []
    for k in chosen:
        ann = annotate_given_names(post, layout, int(k), t)
        out.append(Annotation(ann.object, ann.location, ann.attributes, float(scores[k])))
    return out


def attributes_given_location(
    post: PosteriorSummary, layout: FactorLayout, patch_set: Sequence[int]
) -> tuple:
    """Rank attributes by their mean nu over the patches in ``patch_set``."""
    _check_post(post, layout)
    patches = list(patch_set)
    if not patches:
        raise ValidationError("patch_set is empty")
    if len(set(patches)) != len(patches):
        raise ValidationError("patch_set has duplicate indices")
    n = post.nu.shape[0]
    for j in patches:
        if not (isinstance(j, (int, np.integer)) and 0 <= j < n):
            raise ValidationError(f"patch index {j!r} outside 0..{n - 1}")
    return _ranked_attributes(layout, post.nu[patches].mean(axis=0), None)


def conjunction_score(post: PosteriorSummary, k_o: int, attrs: Sequence[int]) -> float:
    """max_j nu_{j,k_o} * prod_a nu_{j,a}."""
    per_patch = post.nu[:, k_o].copy()
    for a in attrs:
        per_patch *= post.nu[:, a]
    return float(per_patch.max())


def query(
    corpus: Sequence[tuple],
    layout: FactorLayout,
    k_o: int,
    attrs: Sequence[int] = (),
) -> list[tuple]:
    """Rank ``(id, PosteriorSummary)`` pairs by co-located object and attribute evidence.

    Returns ``(id, score)`` pairs by descending score, ties by id.
    """
    k_o = _check_object(layout, k_o)
    attrs = _check_attributes(layout, attrs)
    scored = []
    for image_id, post in corpus:
        _check_post(post, layout)
        scored.append((str(image_id), conjunction_score(post, k_o, attrs)))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored
