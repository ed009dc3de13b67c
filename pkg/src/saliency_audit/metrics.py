"""Attribution-quality metrics: infidelity and max-sensitivity.

Perturbations live in the model's continuous domain (pixels for images,
embeddings for text). Every sampled perturbation set is derived from the
call's seed and returned with the score, so any reported value can be
recomputed exactly from its run record.

Infidelity measures how well the attribution, read as a linear surrogate,
predicts the model's response to perturbations:

    mean over I of ( I . flatten(phi) - (F(x) - F(x - I)) )^2

For the deterministic baseline-difference mode the attribution is expected to
carry its input multiplier already (the global form), so the surrogate term
is sum(phi) and the score collapses to the squared completeness gap.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from saliency_audit.explainers import AttributionRequest, attribute_view
from saliency_audit.models import Model, model_view
from saliency_audit.seeds import derive_seed, rng_for
from saliency_audit.tensor import Tensor

__all__ = [
    "PerturbationSpec",
    "InfidelityResult",
    "MaxSensitivityResult",
    "MetricError",
    "infidelity",
    "max_sensitivity",
]


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbationSpec:
    """Distribution of perturbations I for infidelity sampling."""

    kind: str = "gaussian"      # "gaussian" | "linf_uniform" | "baseline_diff"
    sigma: float = 0.03         # gaussian std
    radius: float = 0.02        # linf_uniform half-width
    n_samples: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "linf_uniform", "baseline_diff"):
            raise MetricError(f"unknown perturbation kind '{self.kind}'")
        if self.kind == "gaussian" and self.sigma <= 0:
            raise MetricError("gaussian perturbations need sigma > 0")
        if self.kind == "linf_uniform" and self.radius <= 0:
            raise MetricError("linf_uniform perturbations need radius > 0")
        if self.n_samples < 1:
            raise MetricError("n_samples must be at least 1")
        if self.kind == "baseline_diff" and self.n_samples != 1:
            # the baseline difference is a single deterministic sample
            object.__setattr__(self, "n_samples", 1)


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


@dataclass
class InfidelityResult:
    score: float
    spec: PerturbationSpec
    samples: np.ndarray          # (n, *input shape), the exact I draws used
    samples_digest: str

    def to_record(self) -> dict:
        return {
            "score": self.score,
            "kind": self.spec.kind,
            "sigma": self.spec.sigma,
            "radius": self.spec.radius,
            "n_samples": self.spec.n_samples,
            "seed": self.spec.seed,
            "samples_sha256": self.samples_digest,
        }


@dataclass
class MaxSensitivityResult:
    score: float
    radius: float
    n_samples: int
    seed: int
    normalized: bool
    deltas: np.ndarray           # (n, *input shape)
    samples_digest: str

    def to_record(self) -> dict:
        return {
            "score": self.score,
            "radius": self.radius,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "normalized": self.normalized,
            "samples_sha256": self.samples_digest,
        }


def _draw_perturbations(spec: PerturbationSpec, shape, x: np.ndarray, x0: np.ndarray) -> np.ndarray:
    if spec.kind == "baseline_diff":
        return (x - x0)[None, ...]
    rng = rng_for(spec.seed, "infidelity", spec.kind)
    if spec.kind == "gaussian":
        return rng.normal(0.0, spec.sigma, size=(spec.n_samples, *shape))
    return rng.uniform(-spec.radius, spec.radius, size=(spec.n_samples, *shape))


def infidelity(model: Model, attribution, x: Tensor, baseline: Tensor | None,
               target: int, spec: PerturbationSpec) -> InfidelityResult:
    """Expected squared gap between the attribution surrogate and the model.

    ``attribution`` may be a Tensor or ndarray shaped like the model's
    continuous domain (for text: the embedding-space attribution, before
    token aggregation).
    """
    view = model_view(model, x, baseline)
    phi = attribution.array if isinstance(attribution, Tensor) else np.asarray(attribution, dtype=np.float64)
    if phi.shape != view.x.shape:
        raise MetricError(f"attribution shape {phi.shape} does not match input domain {view.x.shape}")

    samples = _draw_perturbations(spec, view.x.shape, view.x, view.baseline)
    fx = view.logit(view.x, target)
    total = 0.0
    for I in samples:
        drop = fx - view.logit(view.x - I, target)
        if spec.kind == "baseline_diff":
            surrogate = float(phi.sum())
        else:
            surrogate = float((I * phi).sum())
        total += (surrogate - drop) ** 2
    score = total / len(samples)
    return InfidelityResult(score, spec, samples, _digest(samples))


def max_sensitivity(model: Model, req: AttributionRequest, radius: float = 0.02,
                    n_samples: int = 5, seed: int = 0, normalized: bool = False) -> MaxSensitivityResult:
    """Largest L2 change of the attribution under small input perturbations.

    Perturbations are elementwise uniform on [-radius, radius] in the
    continuous domain; the attribution is recomputed at each perturbed input
    with the perturbed point as the multiplier reference. Defaults follow the
    evaluation protocol: radius 0.02, five samples, unnormalized L2.
    """
    if radius <= 0:
        raise MetricError("radius must be positive")
    if n_samples < 1:
        raise MetricError("n_samples must be at least 1")
    view = model_view(model, req.x, req.baseline)
    base_attr = attribute_view(view, req)

    rng = rng_for(seed, "max-sensitivity")
    deltas = rng.uniform(-radius, radius, size=(n_samples, *view.x.shape))
    worst = 0.0
    for delta in deltas:
        shifted = replace_view_input(view, view.x + delta)
        perturbed = attribute_view(shifted, req)
        diff = float(np.linalg.norm((perturbed - base_attr).ravel()))
        if normalized:
            denom = float(np.linalg.norm(base_attr.ravel()))
            diff = diff / denom if denom > 0 else 0.0
        worst = max(worst, diff)
    return MaxSensitivityResult(worst, radius, n_samples, seed, normalized, deltas, _digest(deltas))


def replace_view_input(view, new_x: np.ndarray):
    """A view at a shifted continuous-domain input (baseline unchanged)."""
    import dataclasses

    return dataclasses.replace(view, x=new_x)
