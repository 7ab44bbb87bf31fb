"""Model assembly: parameter layout, cohort preparation and the forward pass
from prepared modality inputs to per-patient risk scores.

All learnable values live in one flat float64 vector. The forward pass views
that vector through named slices, so one reverse sweep of the tape yields
the gradient for the whole model at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numerics as nm
from . import text as text_mod
from .errors import ShapeMismatch
from .fusion import FusionParams, ModalityTokens, fuse
from .numerics import Tensor

MODALITY_LETTERS = {"p": "pathway", "h": "histology", "t": "text"}


def canonical_modalities(letters: str) -> str:
    """Normalise a modality-subset string to canonical p,h,t order."""
    chosen = set(letters)
    unknown = chosen - set(MODALITY_LETTERS)
    if unknown:
        raise ValueError(f"unknown modality letters {sorted(unknown)}")
    if not chosen:
        raise ValueError("modality subset is empty")
    return "".join(c for c in "pht" if c in chosen)


@dataclass(frozen=True)
class ModelDims:
    """Everything that determines parameter shapes."""

    d_t: int  # report segment embedding width
    d_h: int  # patch embedding width
    max_segments: int  # m, frozen from the training set
    n_text: int  # diagnostic prototypes per report
    n_histology: int  # mixture components per slide
    pathway_widths: tuple[int, ...]  # member-gene count per pathway
    d_e: int = 256
    d_r: int = 32
    modalities: str = "pht"
    shared_beta: bool = False

    @property
    def d(self) -> int:
        return self.d_e + self.d_r

    @property
    def n_pathways(self) -> int:
        return len(self.pathway_widths)

    @property
    def slide_width(self) -> int:
        return 1 + 2 * self.d_h

    @property
    def enabled(self) -> tuple[str, ...]:
        return tuple(MODALITY_LETTERS[c] for c in self.modalities)


def param_spec(dims: ModelDims) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) layout of every learnable tensor."""
    spec: list[tuple[str, tuple[int, ...]]] = []
    if "t" in dims.modalities:
        spec += [
            ("text.w_q", (dims.d_t, dims.d_t)),
            ("text.w_k", (dims.d_t, dims.d_t)),
            ("text.w_v", (dims.d_t, dims.d_t)),
            ("text.alpha.w", (dims.d_t, dims.d_e)),
            ("text.alpha.b", (dims.d_e,)),
        ]
    if "h" in dims.modalities:
        spec += [
            ("histo.alpha.w", (dims.slide_width, dims.d_e)),
            ("histo.alpha.b", (dims.d_e,)),
        ]
    if "p" in dims.modalities:
        for i, width in enumerate(dims.pathway_widths):
            spec += [
                (f"path.snn{i}.w0", (width, dims.d_e)),
                (f"path.snn{i}.b0", (dims.d_e,)),
                (f"path.snn{i}.w1", (dims.d_e, dims.d_e)),
                (f"path.snn{i}.b1", (dims.d_e,)),
            ]
    if dims.d_r > 0:
        spec.append(("fusion.e_r", (dims.d_r,)))
    spec += [
        ("fusion.w_q", (dims.d, dims.d)),
        ("fusion.w_k", (dims.d, dims.d)),
        ("fusion.w_v", (dims.d, dims.d)),
    ]
    beta_groups = ("shared",) if dims.shared_beta else dims.enabled
    for group in beta_groups:
        spec += [
            (f"head.beta.{group}.w0", (dims.d, dims.d_e)),
            (f"head.beta.{group}.b0", (dims.d_e,)),
            (f"head.beta.{group}.w1", (dims.d_e, dims.d_e)),
            (f"head.beta.{group}.b1", (dims.d_e,)),
            (f"head.ln.{group}.gain", (dims.d_e,)),
            (f"head.ln.{group}.bias", (dims.d_e,)),
        ]
    spec += [
        ("head.risk.w", (len(dims.enabled) * dims.d_e, 1)),
        ("head.risk.b", (1,)),
    ]
    return spec


def init_params(dims: ModelDims, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Seeded initialisation: weights uniform within ±1/sqrt(fan_in), biases
    zero, layer-norm gains one, the appended embedding from N(0, 0.02^2)."""
    values: dict[str, np.ndarray] = {}
    for name, shape in param_spec(dims):
        if name == "fusion.e_r":
            values[name] = rng.normal(scale=0.02, size=shape)
        elif name.endswith(".gain"):
            values[name] = np.ones(shape)
        elif len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            values[name] = rng.uniform(-bound, bound, size=shape)
        else:
            values[name] = np.zeros(shape)
    return values


def flatten_params(values: Mapping[str, np.ndarray], spec) -> np.ndarray:
    return np.concatenate([np.asarray(values[name], dtype=float).ravel() for name, _ in spec])


def unflatten_params(flat: np.ndarray, spec) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in spec:
        size = int(np.prod(shape))
        out[name] = flat[offset : offset + size].reshape(shape)
        offset += size
    if offset != flat.size:
        raise ShapeMismatch(f"flat vector has {flat.size} values, spec expects {offset}")
    return out


def unflatten_tensors(flat: Tensor, spec) -> dict[str, Tensor]:
    """Named Tensor views of one flat leaf; gradients accumulate in the leaf."""
    out: dict[str, Tensor] = {}
    offset = 0
    for name, shape in spec:
        size = int(np.prod(shape))
        out[name] = nm.reshape(nm.narrow(flat, 0, offset, size), shape)
        offset += size
    return out


@dataclass
class ModelParams:
    """All learnable tensors of a trained (or initialised) model."""

    values: dict[str, np.ndarray]
    dims: ModelDims

    @property
    def spec(self):
        return param_spec(self.dims)

    def flat(self) -> np.ndarray:
        return flatten_params(self.values, self.spec)


@dataclass
class PreparedCohort:
    """Training-ready arrays for one cohort (or one minibatch of it)."""

    patient_ids: list[str]
    times: np.ndarray  # (n,)
    events: np.ndarray  # (n,) in {0, 1}
    text_data: np.ndarray | None = None  # (n, m, d_t)
    text_mask: np.ndarray | None = None  # (n, m)
    slides: np.ndarray | None = None  # (n, n_histology, 1 + 2 d_h)
    slices: list[np.ndarray] | None = None  # per pathway, (n, width)
    dims: ModelDims | None = None

    def __len__(self) -> int:
        return len(self.patient_ids)

    def subset(self, idx) -> "PreparedCohort":
        idx = np.asarray(idx)
        return PreparedCohort(
            patient_ids=[self.patient_ids[i] for i in idx],
            times=self.times[idx],
            events=self.events[idx],
            text_data=None if self.text_data is None else self.text_data[idx],
            text_mask=None if self.text_mask is None else self.text_mask[idx],
            slides=None if self.slides is None else self.slides[idx],
            slices=None if self.slices is None else [s[idx] for s in self.slices],
            dims=self.dims,
        )


def prepare_cohort(
    *,
    patient_ids,
    times,
    events,
    dims: ModelDims,
    reports=None,
    slide_reps=None,
    expressions=None,
    mask_set=None,
) -> PreparedCohort:
    """Pad reports, stack slide representations and slice expression vectors
    into the arrays the forward pass consumes."""
    prepared = PreparedCohort(
        patient_ids=list(patient_ids),
        times=np.asarray(times, dtype=float),
        events=np.asarray(events, dtype=int),
        dims=dims,
    )
    if "t" in dims.modalities:
        batch = text_mod.pad_batch(list(reports), dims.max_segments)
        prepared.text_data, prepared.text_mask = batch.data, batch.mask
    if "h" in dims.modalities:
        prepared.slides = np.stack([np.asarray(s, dtype=float) for s in slide_reps])
    if "p" in dims.modalities:
        from .pathways import pathway_slices

        stacked = np.stack([np.asarray(e.values if hasattr(e, "values") else e, dtype=float) for e in expressions])
        prepared.slices = pathway_slices(stacked, mask_set)
    return prepared


def _snn_layers(pt: Mapping, prefix: str):
    return [(pt[f"{prefix}.w0"], pt[f"{prefix}.b0"]), (pt[f"{prefix}.w1"], pt[f"{prefix}.b1"])]


def forward_risks(prepared: PreparedCohort, pt: Mapping, dims: ModelDims, fusion_mode: str = "full"):
    """Risk score per patient as a (n,) Tensor. ``pt`` maps parameter names
    to Tensors (training, gradients flow) or plain arrays (inference)."""
    risks, _, _ = forward_diagnostics(prepared, pt, dims, fusion_mode)
    return risks


def forward_diagnostics(prepared: PreparedCohort, pt: Mapping, dims: ModelDims, fusion_mode: str = "full"):
    """Forward pass returning (risks, FusionOutput, per-modality validity)."""
    n = len(prepared)
    tokens = {"pathway": None, "histology": None, "text": None}
    validity = {}

    if "t" in dims.modalities:
        z, att = text_mod.text_self_attention(
            text_mod.PaddedBatch(prepared.text_data, prepared.text_mask, dims.max_segments),
            text_mod.TextAttentionParams(pt["text.w_q"], pt["text.w_k"], pt["text.w_v"]),
        )
        scores = text_mod.importance_scores(att, prepared.text_mask)
        order, proto_valid = text_mod.top_segment_indices(scores, prepared.text_mask, dims.n_text)
        picked = nm.gather_rows(nm.as_tensor(z), order) * proto_valid[..., None]
        tokens["text"] = nm.affine(picked, pt["text.alpha.w"], pt["text.alpha.b"])
        validity["text"] = proto_valid
    if "h" in dims.modalities:
        tokens["histology"] = nm.affine(nm.as_tensor(prepared.slides), pt["histo.alpha.w"], pt["histo.alpha.b"])
        validity["histology"] = np.ones((n, dims.n_histology))
    if "p" in dims.modalities:
        rows = [
            nm.reshape(
                nm.snn_forward(nm.as_tensor(prepared.slices[i]), _snn_layers(pt, f"path.snn{i}")),
                (n, 1, dims.d_e),
            )
            for i in range(dims.n_pathways)
        ]
        tokens["pathway"] = rows[0] if len(rows) == 1 else nm.concat(rows, axis=-2)
        validity["pathway"] = np.ones((n, dims.n_pathways))

    fused = fuse(
        p=None if tokens["pathway"] is None else ModalityTokens("pathway", tokens["pathway"], validity["pathway"]),
        h=None if tokens["histology"] is None else ModalityTokens("histology", tokens["histology"], validity["histology"]),
        t=None if tokens["text"] is None else ModalityTokens("text", tokens["text"], validity["text"]),
        params=FusionParams(pt.get("fusion.e_r"), pt["fusion.w_q"], pt["fusion.w_k"], pt["fusion.w_v"]),
        mode=fusion_mode,
    )
    risks = _pooled_risk(
        {name: fused.block(name) for name in dims.enabled},
        {name: validity[name] for name in dims.enabled},
        pt,
        dims,
    )
    return nm.reshape(risks, (n,)), fused, validity


def _pooled_risk(blocks: Mapping, validity: Mapping, pt: Mapping, dims: ModelDims):
    """Per modality: f_beta each fused token, layer-normalise, mean over the
    valid tokens; concatenate the pooled vectors and apply the risk layer."""
    pooled = []
    for name in dims.enabled:
        group = "shared" if dims.shared_beta else name
        y = nm.snn_forward(nm.as_tensor(blocks[name]), _snn_layers(pt, f"head.beta.{group}"))
        y = nm.layer_norm(y, pt[f"head.ln.{group}.gain"], pt[f"head.ln.{group}.bias"])
        mask = np.asarray(validity[name], dtype=float)
        counts = np.maximum(mask.sum(axis=-1, keepdims=True), 1.0)
        pooled.append(nm.tsum(y * mask[..., None], axis=-2) * (1.0 / counts))
    stacked = pooled[0] if len(pooled) == 1 else nm.concat(pooled, axis=-1)
    return nm.affine(stacked, pt["head.risk.w"], pt["head.risk.b"])


@dataclass
class RiskHeadParams:
    """Structured view of the post-fusion head for the single-patient API."""

    beta: Mapping[str, list]  # modality (or "shared") -> [(w, b), (w, b)]
    ln: Mapping[str, tuple]  # modality (or "shared") -> (gain, bias)
    risk_w: np.ndarray
    risk_b: np.ndarray
    shared: bool = False


def risk_head(fused, validity: Mapping, params: RiskHeadParams) -> float:
    """Scalar risk for one patient from their fused modality blocks."""
    names = [name for name in ("pathway", "histology", "text") if fused.block(name) is not None]
    pooled = []
    for name in names:
        group = "shared" if params.shared else name
        y = nm.snn_forward(np.asarray(fused.block(name), dtype=float), params.beta[group])
        gain, bias = params.ln[group]
        y = nm.layer_norm(y, gain, bias)
        mask = np.asarray(validity[name], dtype=float)
        count = max(float(mask.sum()), 1.0)
        pooled.append((y * mask[:, None]).sum(axis=0) / count)
    stacked = np.concatenate(pooled)
    return float(nm.affine(stacked[None, :], params.risk_w, params.risk_b)[0, 0])


def risk_head_from_values(values: Mapping[str, np.ndarray], dims: ModelDims) -> RiskHeadParams:
    groups = ("shared",) if dims.shared_beta else dims.enabled
    return RiskHeadParams(
        beta={g: _snn_layers(values, f"head.beta.{g}") for g in groups},
        ln={g: (values[f"head.ln.{g}.gain"], values[f"head.ln.{g}.bias"]) for g in groups},
        risk_w=values["head.risk.w"],
        risk_b=values["head.risk.b"],
        shared=dims.shared_beta,
    )
