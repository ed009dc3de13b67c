"""Experiment orchestration: cascading parameter randomization, label
randomization, and the activation-smoothness sweep.

Every stochastic cell of a run draws from seeds derived as
``derive_seed(master_seed, purpose, stage, trial, ...)``, so reports are
order-independent and any single cell can be recomputed in isolation. Reports
store raw per-trial values, the seeds, and SHA-256 digests of the sampled
perturbation sets; summary statistics are recomputed from the raw lists.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from saliency_audit.data import Dataset
from saliency_audit.explainers import (
    AttributionRequest,
    aggregate_text_attribution,
    explain,
    image_attribution_to_map,
)
from saliency_audit.metrics import PerturbationSpec, infidelity, max_sensitivity
from saliency_audit.models import (
    Model,
    ModelConfig,
    TrainingConfig,
    accuracy,
    default_slice_dims,
    function_slice,
    model_view,
    predict,
    train,
    with_variant,
    xavier_reinit,
)
from saliency_audit.seeds import derive_seed
from saliency_audit.similarity import cosine_similarity, euclidean_distance, spearman_rank, ssim
from saliency_audit.tensor import Tensor

__all__ = [
    "RequestTemplate",
    "MetricSettings",
    "LayerReport",
    "DataRandomizationReport",
    "SweepReport",
    "HarnessError",
    "cascading_randomization_test",
    "data_randomization_test",
    "smoothness_sweep",
    "summarize",
]


class HarnessError(RuntimeError):
    pass


@dataclass(frozen=True)
class RequestTemplate:
    """An attribution method bound later to (model, input, target)."""

    method: str = "ig"
    variant: str = "global"
    ig_steps: int = 32
    sg_samples: int = 8
    sg_sigma: float = 0.1
    sg_base: str = "saliency"
    shap_samples: int = 20
    shap_sigma: float = 0.0

    @property
    def key(self) -> str:
        return f"{self.method}_{self.variant}"

    def bind(self, model: Model, x: Tensor, target: int, seed: int) -> AttributionRequest:
        return AttributionRequest(
            model=model, x=x, target=target,
            method=self.method, variant=self.variant, ig_steps=self.ig_steps,
            sg_samples=self.sg_samples, sg_sigma=self.sg_sigma, sg_base=self.sg_base,
            shap_samples=self.shap_samples, shap_sigma=self.shap_sigma, seed=seed,
        )


@dataclass(frozen=True)
class MetricSettings:
    """Shared metric protocol for harness runs."""

    gaussian_sigma: float = 0.03
    gaussian_samples: int = 20
    sensitivity_radius: float = 0.02
    sensitivity_samples: int = 5
    compute_baseline_diff: bool = True
    compute_sensitivity: bool = True


@dataclass
class LayerReport:
    """One cascading stage: all randomized layers, raw per-trial cells, summaries."""

    stage: int
    layer: str                      # "original" for stage 0, else the newly randomized layer
    randomized: list[str]           # every layer randomized at this stage (top-down)
    trials: int
    cells: list[dict]
    summary: dict

    def to_record(self) -> dict:
        return {
            "stage": self.stage,
            "layer": self.layer,
            "randomized": list(self.randomized),
            "trials": self.trials,
            "cells": self.cells,
            "summary": self.summary,
        }


@dataclass
class DataRandomizationReport:
    true_accuracy: float
    randomized_accuracy: float
    num_classes: int
    cells: list[dict]
    summary: dict

    def to_record(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SweepReport:
    configurations: list[str]
    cells: list[dict]
    slices: list[dict]
    summary: dict

    def to_record(self) -> dict:
        return dataclasses.asdict(self)


def _quartiles(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(arr, [25, 50, 75])
    return {
        "median": float(med),
        "q1": float(q1),
        "q3": float(q3),
        "min": float(arr.min()),
        "max": float(arr.max()),
        "count": int(arr.size),
    }


def summarize(cells: list[dict], group_key: str = "request") -> dict:
    """Group cells by request key and compute quartile summaries per metric."""
    grouped: dict[str, dict[str, list[float]]] = {}
    for cell in cells:
        bucket = grouped.setdefault(cell[group_key], {})
        for metric, value in cell["metrics"].items():
            bucket.setdefault(metric, []).append(value)
    return {
        key: {metric: _quartiles(vals) for metric, vals in metrics.items()}
        for key, metrics in grouped.items()
    }


def _comparable(model: Model, attribution: Tensor):
    """Reduce an attribution to the representation similarity runs on.

    Images compare grayscale maps (ssim/euclidean) and raw flattened values
    (spearman); text compares aggregated per-token score vectors.
    """
    if model.config.task == "image":
        gray = image_attribution_to_map(attribution)
        return {"map": gray.array, "raw": attribution.array.reshape(-1)}
    scores = aggregate_text_attribution(attribution)
    return {"scores": scores.array}


def _similarities(model: Model, ref, cur) -> dict[str, float]:
    if model.config.task == "image":
        return {
            "ssim": ssim(ref["map"], cur["map"]).value,
            "spearman": spearman_rank(ref["raw"], cur["raw"]).value,
            "euclidean": euclidean_distance(ref["map"].reshape(-1), cur["map"].reshape(-1)).value,
        }
    return {
        "cosine": cosine_similarity(ref["scores"], cur["scores"]).value,
        "spearman": spearman_rank(ref["scores"], cur["scores"]).value,
        "euclidean": euclidean_distance(ref["scores"], cur["scores"]).value,
    }


def _metric_cell(model: Model, template: RequestTemplate, x: Tensor, target: int,
                 attr: Tensor, settings: MetricSettings, seed: int) -> tuple[dict, dict]:
    """Infidelity / max-sensitivity block shared by all three experiments."""
    metrics: dict[str, float] = {}
    details: dict[str, dict] = {}
    spec = PerturbationSpec(
        "gaussian", sigma=settings.gaussian_sigma,
        n_samples=settings.gaussian_samples, seed=derive_seed(seed, "infid-gauss"),
    )
    inf = infidelity(model, attr, x, None, target, spec)
    metrics["infidelity_gaussian"] = inf.score
    details["infidelity_gaussian"] = inf.to_record()
    if settings.compute_baseline_diff:
        infb = infidelity(model, attr, x, None, target, PerturbationSpec("baseline_diff"))
        metrics["infidelity_baseline_diff"] = infb.score
        details["infidelity_baseline_diff"] = infb.to_record()
    if settings.compute_sensitivity:
        req = template.bind(model, x, target, derive_seed(seed, "attr"))
        sens = max_sensitivity(
            model, req, radius=settings.sensitivity_radius,
            n_samples=settings.sensitivity_samples, seed=derive_seed(seed, "maxsens"),
        )
        metrics["max_sensitivity"] = sens.score
        details["max_sensitivity"] = sens.to_record()
    return metrics, details


def _targets_for(model: Model, inputs: list[Tensor]) -> list[int]:
    # explanation target: the original model's predicted class, held fixed
    # across randomization stages
    return [int(np.argmax(predict(model, x).array)) for x in inputs]


def cascading_randomization_test(
    model: Model,
    templates: list[RequestTemplate],
    inputs: list[Tensor],
    trials: int = 10,
    seed: int = 0,
    settings: MetricSettings = MetricSettings(),
) -> list[LayerReport]:
    """Re-randomize layer groups top (logits) to bottom, cumulatively.

    Stage 0 is the un-randomized reference; stage k re-randomizes the top k
    groups with per-(stage, trial, layer) seeds. Each trial of each stage
    recomputes every (template, input) attribution, its similarity to the
    stage-0 attribution, and the quality metrics; metric perturbations are
    resampled per trial.
    """
    if trials < 1:
        raise HarnessError("trials must be at least 1")
    if not inputs:
        raise HarnessError("need at least one input")
    targets = _targets_for(model, inputs)

    top_down = [name for name, _ in reversed(model.layers)]
    reference: dict[tuple[int, int], dict] = {}
    for ti, template in enumerate(templates):
        for ii, x in enumerate(inputs):
            req = template.bind(model, x, targets[ii], derive_seed(seed, "ref", ti, ii))
            reference[(ti, ii)] = _comparable(model, explain(req).values)

    reports: list[LayerReport] = []
    for stage in range(len(top_down) + 1):
        randomized = top_down[:stage]
        cells: list[dict] = []
        for trial in range(trials):
            staged = model
            for layer in randomized:
                staged = xavier_reinit(staged, layer, derive_seed(seed, "stage", stage, "trial", trial, layer))
            for ti, template in enumerate(templates):
                for ii, x in enumerate(inputs):
                    cell_seed = derive_seed(seed, "cell", stage, trial, ti, ii)
                    # stage 0 reuses the reference seed so seeded methods
                    # reproduce the original attribution bitwise
                    attr_seed = derive_seed(seed, "ref", ti, ii) if stage == 0 else derive_seed(cell_seed, "attr")
                    try:
                        req = template.bind(staged, x, targets[ii], attr_seed)
                        attr = explain(req).values
                        sims = _similarities(model, reference[(ti, ii)], _comparable(model, attr))
                        metrics, details = _metric_cell(staged, template, x, targets[ii], attr, settings, cell_seed)
                    except Exception as exc:
                        raise HarnessError(
                            f"cell failed at stage {stage}, trial {trial}, input {ii} ({template.key}): {exc}"
                        ) from exc
                    metrics.update(sims)
                    cells.append({
                        "stage": stage,
                        "trial": trial,
                        "input": ii,
                        "target": targets[ii],
                        "request": template.key,
                        "seed": cell_seed,
                        "metrics": metrics,
                        "details": details,
                    })
        reports.append(LayerReport(
            stage=stage,
            layer="original" if stage == 0 else top_down[stage - 1],
            randomized=randomized,
            trials=trials,
            cells=cells,
            summary=summarize(cells),
        ))
    return reports


def data_randomization_test(
    dataset: Dataset,
    model_config: ModelConfig,
    hyper: TrainingConfig,
    templates: list[RequestTemplate],
    inputs: list[Tensor],
    seed: int = 0,
    settings: MetricSettings = MetricSettings(),
    label_fn=None,
) -> DataRandomizationReport:
    """Train on true labels and on uniformly re-drawn labels, then compare
    the two models' explanations on the same inputs.

    ``label_fn(labels, rng) -> labels`` overrides the redraw (the identity
    function is the degenerate control that must reproduce model A exactly).
    """
    if not dataset.train:
        raise HarnessError("dataset has no training items")
    trained_true = train(model_config, dataset, hyper)

    rng = np.random.default_rng(derive_seed(seed, "label-shuffle"))
    labels = [label for _, label in dataset.train]
    if label_fn is None:
        new_labels = [int(v) for v in rng.integers(0, dataset.num_classes, size=len(labels))]
    else:
        new_labels = list(label_fn(labels, rng))
    shuffled = Dataset(
        dataset.task,
        [(x, lbl) for (x, _), lbl in zip(dataset.train, new_labels)],
        dataset.test,
        dataset.num_classes,
        vocab=dataset.vocab,
    )
    trained_rand = train(model_config, shuffled, hyper)

    model_a, model_b = trained_true.model, trained_rand.model
    targets = _targets_for(model_a, inputs)
    cells: list[dict] = []
    for ti, template in enumerate(templates):
        for ii, x in enumerate(inputs):
            cell_seed = derive_seed(seed, "datarand", ti, ii)
            req_a = template.bind(model_a, x, targets[ii], derive_seed(cell_seed, "attr-a"))
            req_b = template.bind(model_b, x, targets[ii], derive_seed(cell_seed, "attr-b"))
            attr_a = explain(req_a).values
            attr_b = explain(req_b).values
            sims = _similarities(model_a, _comparable(model_a, attr_a), _comparable(model_b, attr_b))
            metrics = {f"cross_{k}": v for k, v in sims.items()}
            details = {}
            for tag, mdl, attr in (("true", model_a, attr_a), ("randomized", model_b, attr_b)):
                m, d = _metric_cell(mdl, template, x, targets[ii], attr, settings, derive_seed(cell_seed, tag))
                metrics.update({f"{tag}_{k}": v for k, v in m.items()})
                details[tag] = d
            cells.append({
                "input": ii,
                "target": targets[ii],
                "request": template.key,
                "seed": cell_seed,
                "metrics": metrics,
                "details": details,
            })
    return DataRandomizationReport(
        true_accuracy=trained_true.test_accuracy,
        randomized_accuracy=trained_rand.test_accuracy,
        num_classes=dataset.num_classes,
        cells=cells,
        summary=summarize(cells),
    )


SWEEP_CONFIGS = (
    ("relu", "maxpool"),
    ("relu", "lsepool"),
    ("softplus", "maxpool"),
    ("softplus", "lsepool"),
)


def smoothness_sweep(
    model: Model,
    inputs: list[Tensor],
    ig_steps: int = 32,
    slice_count: int = 5,
    slice_range: tuple[float, float] = (-1.0, 1.0),
    slice_samples: int = 41,
    seed: int = 0,
    settings: MetricSettings = MetricSettings(),
) -> SweepReport:
    """Evaluate all four activation/pooling combinations on shared weights.

    Per configuration and input: local and global integrated gradients,
    gaussian-mode infidelity of the local attribution, baseline-difference
    infidelity (the squared completeness gap) of the global attribution,
    max-sensitivity, and target-logit slices along the dominant input dims
    with their second-difference maxima.
    """
    if model.config.task != "image":
        raise HarnessError("the smoothness sweep runs on image models")
    targets = _targets_for(model, inputs)
    variants = {
        f"{act}+{pool}": with_variant(model, activation=act, pooling=pool)
        for act, pool in SWEEP_CONFIGS
    }

    cells: list[dict] = []
    slices: list[dict] = []
    for name, variant in variants.items():
        for ii, x in enumerate(inputs):
            target = targets[ii]
            cell_seed = derive_seed(seed, "sweep", name, ii)
            local = explain(RequestTemplate("ig", "local", ig_steps).bind(variant, x, target, derive_seed(cell_seed, "l")))
            glob = explain(RequestTemplate("ig", "global", ig_steps).bind(variant, x, target, derive_seed(cell_seed, "g")))
            spec = PerturbationSpec("gaussian", sigma=settings.gaussian_sigma,
                                    n_samples=settings.gaussian_samples, seed=derive_seed(cell_seed, "ig"))
            inf_gauss = infidelity(variant, local.values, x, None, target, spec)
            inf_base = infidelity(variant, glob.values, x, None, target, PerturbationSpec("baseline_diff"))
            metrics = {
                "infidelity_gaussian_local": inf_gauss.score,
                "infidelity_baseline_diff_global": inf_base.score,
            }
            details = {
                "infidelity_gaussian_local": inf_gauss.to_record(),
                "infidelity_baseline_diff_global": inf_base.to_record(),
            }
            if settings.compute_sensitivity:
                sens = max_sensitivity(
                    variant,
                    RequestTemplate("ig", "global", ig_steps).bind(variant, x, target, derive_seed(cell_seed, "s")),
                    radius=settings.sensitivity_radius,
                    n_samples=settings.sensitivity_samples,
                    seed=derive_seed(cell_seed, "maxsens"),
                )
                metrics["max_sensitivity_global"] = sens.score
                details["max_sensitivity_global"] = sens.to_record()
            cells.append({
                "configuration": name,
                "input": ii,
                "target": target,
                "request": "ig",
                "seed": cell_seed,
                "metrics": metrics,
                "details": details,
            })

            dims = default_slice_dims(model_view(model, x).x, slice_count)
            curves = function_slice(variant, x, dims=dims, value_range=slice_range,
                                    samples=slice_samples, target=target)
            second_diff = [
                float(np.max(np.abs(np.diff([v for _, v in curve], n=2)))) for curve in curves
            ]
            slices.append({
                "configuration": name,
                "input": ii,
                "dims": dims,
                "offsets": [o for o, _ in curves[0]],
                "values": [[v for _, v in curve] for curve in curves],
                "max_abs_second_diff": second_diff,
            })

    by_config: dict[str, dict] = {}
    for cell in cells:
        bucket = by_config.setdefault(cell["configuration"], {})
        for metric, value in cell["metrics"].items():
            bucket.setdefault(metric, []).append(value)
    summary = {
        cfg: {metric: _quartiles(vals) for metric, vals in metrics.items()}
        for cfg, metrics in by_config.items()
    }
    return SweepReport(
        configurations=[f"{a}+{p}" for a, p in SWEEP_CONFIGS],
        cells=cells,
        slices=slices,
        summary=summary,
    )
