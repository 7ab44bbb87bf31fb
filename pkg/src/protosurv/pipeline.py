"""End-to-end orchestration: slide prototype fitting, cohort preparation and
k-fold cross-validated training/evaluation over in-memory cohorts.

The CLI wraps these functions with file I/O; tests and the demo scripts call
them directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Cohort, kfold_split
from .evaluation import concordance_index
from .histology import EmTrace, fit_gmm, slide_representation
from .model import ModelDims, ModelParams, PreparedCohort, prepare_cohort
from .pathways import PathwayMaskSet, build_masks
from .rng import substream
from .survival import EpochStats, SurvivalRecord, TrainConfig, predict_cohort, train
from .text import compute_n_t


def fit_slide_representations(patches_list, n_components: int, seed: int):
    """Fit one mixture per slide (substream per slide index) and return the
    stacked representations plus the EM traces."""
    reps: list[np.ndarray] = []
    traces: list[EmTrace] = []
    for i, patches in enumerate(patches_list):
        params, trace = fit_gmm(patches, n_components, substream(seed, "gmm", i))
        reps.append(slide_representation(params))
        traces.append(trace)
    return reps, traces


def build_prepared(cohort: Cohort, config: TrainConfig, slide_reps=None, n_text=None, max_segments=None):
    """Compute prototype shapes from the cohort and pack it for training.

    Returns (prepared, dims, mask_set); mask_set is None without the pathway
    modality. Slide representations are fitted here when not supplied;
    ``n_text``/``max_segments`` override the cohort-derived values when the
    prototype stage already froze them.
    """
    modalities = config.modalities
    mask_set: PathwayMaskSet | None = None
    pathway_widths: tuple[int, ...] = ()
    d_t = d_h = 1
    m = n_t = 1
    if "t" in modalities:
        d_t = cohort.reports[0].segments.shape[1]
        m = max_segments if max_segments is not None else max(r.segments.shape[0] for r in cohort.reports)
        n_t = n_text if n_text is not None else compute_n_t(cohort.reports, config.text_proto_mode)
    if "h" in modalities:
        if slide_reps is None:
            slide_reps = cohort.slide_reps
        if slide_reps is None:
            slide_reps, _ = fit_slide_representations(cohort.patches, config.n_histology, config.seed)
        d_h = (np.asarray(slide_reps[0]).shape[1] - 1) // 2
    if "p" in modalities:
        mask_set = build_masks(cohort.gene_sets, cohort.gene_order)
        if mask_set.n_pathways != config.n_pathways:
            raise ValueError(
                f"{mask_set.n_pathways} pathways in the gene sets, config expects {config.n_pathways}"
            )
        pathway_widths = mask_set.widths
    dims = ModelDims(
        d_t=d_t,
        d_h=d_h,
        max_segments=m,
        n_text=n_t,
        n_histology=config.n_histology,
        pathway_widths=pathway_widths,
        d_e=config.d_e,
        d_r=config.d_r,
        modalities=modalities,
        shared_beta=config.shared_beta_mlp,
    )
    prepared = prepare_cohort(
        patient_ids=cohort.patient_ids,
        times=[r.time for r in cohort.records],
        events=[r.event for r in cohort.records],
        dims=dims,
        reports=cohort.reports if "t" in modalities else None,
        slide_reps=slide_reps if "h" in modalities else None,
        expressions=cohort.expressions if "p" in modalities else None,
        mask_set=mask_set,
    )
    return prepared, dims, mask_set


@dataclass
class FoldResult:
    fold: int
    held_out_ids: list[str]
    risks: np.ndarray
    c_index: float
    model: ModelParams
    history: list[EpochStats]


@dataclass
class CrossValResult:
    folds: list[FoldResult]

    @property
    def c_indices(self) -> list[float]:
        return [f.c_index for f in self.folds]

    @property
    def mean_c_index(self) -> float:
        return float(np.mean(self.c_indices))

    def pooled(self):
        """(patient_ids, risks) pooled over every held-out fold."""
        ids = [pid for f in self.folds for pid in f.held_out_ids]
        risks = np.concatenate([f.risks for f in self.folds])
        return ids, risks


def cross_validate(
    prepared: PreparedCohort, config: TrainConfig, n_folds: int = 5, folds=None
) -> CrossValResult:
    """Train on each fold complement and score the held-out fold."""
    ids = prepared.patient_ids
    if folds is None:
        folds = kfold_split(ids, n_folds, config.seed)
    position = {pid: i for i, pid in enumerate(ids)}
    results: list[FoldResult] = []
    for fold_no, held_ids in enumerate(folds):
        held = np.asarray([position[p] for p in held_ids], dtype=int)
        train_idx = np.asarray([i for i, p in enumerate(ids) if p not in set(held_ids)], dtype=int)
        model, history = train(prepared.subset(train_idx), config)
        held_prepared = prepared.subset(held)
        risks = predict_cohort(model, held_prepared, config.fusion_mode)
        held_records = [
            SurvivalRecord(pid, float(t), int(e))
            for pid, t, e in zip(held_prepared.patient_ids, held_prepared.times, held_prepared.events)
        ]
        results.append(
            FoldResult(fold_no, list(held_ids), risks, concordance_index(risks, held_records), model, history)
        )
    return CrossValResult(results)
