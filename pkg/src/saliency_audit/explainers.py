"""Gradient-based attribution methods in local and global variants.

Each method produces a per-element attribution of one target logit over the
model's continuous input domain: the pixel tensor for image models, the
token+positional embedding matrix for text models (token ids are discrete, so
interpolation, noise and multipliers all live in embedding space). The global
variant of a method multiplies its local core elementwise by (x - x0); the
exceptions are input-x-gradient, whose multiplier is x itself, and gradient
shap, which multiplies per sample by (x - b) for that sample's baseline.

Seeded methods draw every sample from a generator derived from the request
seed, so attributions are bitwise reproducible from their provenance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from saliency_audit.models import Model, ModelView, model_view
from saliency_audit.seeds import rng_for
from saliency_audit.tensor import Tensor

__all__ = [
    "AttributionRequest",
    "Attribution",
    "ExplainerError",
    "explain",
    "gradient_saliency",
    "input_x_gradient",
    "integrated_gradients",
    "smoothgrad",
    "gradient_shap",
    "guided_backprop",
    "attribute_view",
    "aggregate_text_attribution",
    "image_attribution_to_map",
]

METHODS = ("saliency", "input_x_gradient", "ig", "smoothgrad", "gradient_shap", "guided_backprop")
VARIANTS = ("local", "global")


class ExplainerError(ValueError):
    pass


@dataclass
class AttributionRequest:
    """Everything needed to reproduce one attribution bitwise."""

    model: Model
    x: Tensor                        # task input (pixels or token ids)
    target: int
    baseline: Tensor | None = None   # defaults: zero image / all-pad sequence
    method: str = "ig"
    variant: str = "global"
    ig_steps: int = 50
    sg_samples: int = 8
    sg_sigma: float = 0.1
    sg_base: str = "saliency"        # saliency | ig | input_x_gradient
    shap_samples: int = 50
    shap_sigma: float = 0.0
    shap_baselines: list[Tensor] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ExplainerError(f"unknown method '{self.method}'")
        if self.variant not in VARIANTS:
            raise ExplainerError(f"unknown variant '{self.variant}'")
        if self.ig_steps < 1:
            raise ExplainerError("ig_steps must be at least 1")
        if self.sg_samples < 1 or self.sg_sigma < 0:
            raise ExplainerError("smoothgrad needs sg_samples >= 1 and sg_sigma >= 0")
        if self.shap_samples < 1 or self.shap_sigma < 0:
            raise ExplainerError("gradient shap needs shap_samples >= 1 and shap_sigma >= 0")
        C = self.model.config.num_classes
        if not (0 <= self.target < C):
            raise ExplainerError(f"target {self.target} outside [0, {C})")

    def provenance(self) -> dict:
        keep = (
            "target", "method", "variant", "ig_steps", "sg_samples", "sg_sigma",
            "sg_base", "shap_samples", "shap_sigma", "seed",
        )
        d = {k: getattr(self, k) for k in keep}
        d["task"] = self.model.config.task
        return d


@dataclass
class Attribution:
    """Attribution values plus the request echo that reproduces them."""

    values: Tensor
    provenance: dict


# ---------------------------------------------------------------------------
# core, phrased over a continuous-domain view


def _ig_average_gradient(view: ModelView, target: int, steps: int, x: np.ndarray | None = None) -> np.ndarray:
    """Trapezoidal average of gradients along the line baseline -> x."""
    x = view.x if x is None else x
    x0 = view.baseline
    total = np.zeros_like(x)
    for k in range(steps + 1):
        alpha = k / steps
        weight = 0.5 if k in (0, steps) else 1.0
        point = x0 + alpha * (x - x0)
        try:
            total += weight * view.gradient(point, target)
        except Exception as exc:
            raise ExplainerError(f"gradient evaluation failed at path step {k}/{steps}: {exc}") from exc
    return total / steps


def _local_core(view: ModelView, req: AttributionRequest, method: str,
                x: np.ndarray | None = None) -> np.ndarray:
    """The method's gradient-path quantity before any input multiplier."""
    x = view.x if x is None else x
    if method == "saliency":
        return view.gradient(x, req.target)
    if method == "ig":
        return _ig_average_gradient(view, req.target, req.ig_steps, x=x)
    if method == "input_x_gradient":
        return x * view.gradient(x, req.target)
    if method == "guided_backprop":
        if req.model.config.activation != "relu":
            raise ExplainerError("guided backprop needs a relu-activation model")
        return view.gradient(x, req.target, guided=True)
    raise ExplainerError(f"'{method}' has no local core")


def attribute_view(view: ModelView, req: AttributionRequest) -> np.ndarray:
    """Attribution over a view's continuous domain; used by metrics as well."""
    method, variant = req.method, req.variant
    if method == "smoothgrad":
        if req.sg_base not in ("saliency", "ig", "input_x_gradient"):
            raise ExplainerError(f"unsupported smoothgrad base '{req.sg_base}'")
        rng = rng_for(req.seed, "smoothgrad")
        acc = np.zeros_like(view.x)
        for _ in range(req.sg_samples):
            noise = rng.normal(0.0, req.sg_sigma, size=view.x.shape) if req.sg_sigma > 0 else 0.0
            acc += _local_core(view, req, req.sg_base, x=view.x + noise)
        core = acc / req.sg_samples
        # the multiplier stays a function of the unperturbed input
        if variant == "global" and req.sg_base != "input_x_gradient":
            core = core * (view.x - view.baseline)
        return core

    if method == "gradient_shap":
        baselines = req.shap_baselines
        if baselines is not None and len(baselines) == 0:
            raise ExplainerError("gradient shap needs a nonempty baseline set")
        base_arrays = (
            [b.array if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64) for b in baselines]
            if baselines is not None
            else [view.baseline]
        )
        for b in base_arrays:
            if b.shape != view.x.shape:
                raise ExplainerError(f"baseline shape {b.shape} does not match input {view.x.shape}")
        rng = rng_for(req.seed, "gradient_shap")
        acc = np.zeros_like(view.x)
        for _ in range(req.shap_samples):
            b = base_arrays[rng.integers(len(base_arrays))]
            alpha = rng.uniform()
            point = b + alpha * (view.x - b)
            if req.shap_sigma > 0:
                point = point + rng.normal(0.0, req.shap_sigma, size=view.x.shape)
            g = view.gradient(point, req.target)
            acc += g * (view.x - b) if variant == "global" else g
        return acc / req.shap_samples

    core = _local_core(view, req, method)
    if variant == "global" and method != "input_x_gradient":
        core = core * (view.x - view.baseline)
    return core


def _run(req: AttributionRequest) -> Attribution:
    view = model_view(req.model, req.x, req.baseline)
    values = attribute_view(view, req)
    return Attribution(Tensor(values), req.provenance())


# ---------------------------------------------------------------------------
# public methods


def explain(req: AttributionRequest) -> Attribution:
    """Dispatch on req.method."""
    return _run(req)


def gradient_saliency(req: AttributionRequest) -> Attribution:
    req.method = "saliency"
    return _run(req)


def input_x_gradient(req: AttributionRequest) -> Attribution:
    req.method = "input_x_gradient"
    return _run(req)


def integrated_gradients(req: AttributionRequest) -> Attribution:
    req.method = "ig"
    return _run(req)


def smoothgrad(req: AttributionRequest) -> Attribution:
    req.method = "smoothgrad"
    return _run(req)


def gradient_shap(req: AttributionRequest) -> Attribution:
    req.method = "gradient_shap"
    return _run(req)


def guided_backprop(req: AttributionRequest) -> Attribution:
    req.method = "guided_backprop"
    return _run(req)


# ---------------------------------------------------------------------------
# aggregation for display and comparison


def aggregate_text_attribution(attr) -> Tensor:
    """Token scores: sum over the embedding dimension, then L2-normalize.

    Signed sums may cancel; an all-zero score vector is returned unchanged.
    """
    arr = attr.array if isinstance(attr, Tensor) else np.asarray(attr, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ExplainerError(f"expected a nonempty (tokens, embed) matrix, got shape {arr.shape}")
    scores = arr.sum(axis=1)
    norm = float(np.linalg.norm(scores))
    if norm > 0.0:
        scores = scores / norm
    return Tensor(scores)


def image_attribution_to_map(attr) -> Tensor:
    """Grayscale map: per-pixel sum of |channel| values, min-max scaled to [0,1].

    Constant maps (including all-zero) normalize to all-zeros.
    """
    arr = attr.array if isinstance(attr, Tensor) else np.asarray(attr, dtype=np.float64)
    if arr.ndim != 3:
        raise ExplainerError(f"expected (channels, H, W), got shape {arr.shape}")
    flat = np.abs(arr).sum(axis=0)
    lo, hi = float(flat.min()), float(flat.max())
    if hi - lo == 0.0:
        return Tensor(np.zeros_like(flat))
    return Tensor((flat - lo) / (hi - lo))
