import math

import numpy as np
import pytest

from protosurv import numerics as nm
from protosurv.data import SyntheticSpec, synth_cohort
from protosurv.errors import NoEvents
from protosurv.fusion import FusionOutput
from protosurv.model import risk_head, init_params, param_spec
from protosurv.pipeline import build_prepared
from protosurv.rng import substream
from protosurv.survival import (
    SurvivalRecord,
    TrainConfig,
    cosine_lr,
    cox_loss,
    load_checkpoint,
    predict,
    predict_cohort,
    save_checkpoint,
    train,
)


def _rec(times, events):
    return [SurvivalRecord(f"p{i}", t, e) for i, (t, e) in enumerate(zip(times, events))]


# ---------------------------------------------------------------------------
# cox_loss
# ---------------------------------------------------------------------------

def test_cox_loss_single_event_is_zero():
    loss, degenerate = cox_loss(np.array([0.7]), _rec([5.0], [1]))
    assert loss == 0.0 and not degenerate


def test_cox_loss_two_patient_breslow_value():
    loss, _ = cox_loss(np.array([0.0, 0.0]), _rec([1.0, 2.0], [1, 1]))
    assert abs(loss - math.log(2.0) / 2.0) < 1e-12


def test_cox_loss_all_censored_degenerate():
    loss, degenerate = cox_loss(np.array([1.0, -1.0]), _rec([1.0, 2.0], [0, 0]))
    assert loss == 0.0 and degenerate


def test_cox_loss_shift_invariance():
    rng = np.random.default_rng(0)
    risks = rng.normal(size=10)
    times = rng.uniform(1, 100, size=10)
    events = rng.integers(0, 2, size=10)
    events[0] = 1
    records = _rec(times, events)
    base, _ = cox_loss(risks, records)
    shifted, _ = cox_loss(risks + 123.456, records)
    assert abs(base - shifted) < 1e-9


def test_cox_loss_breslow_tied_events_vs_hand_formula():
    # times [2, 2, 5], all events: both t=2 events share the full risk set
    eta = np.array([0.3, -0.1, 0.4])
    loss, _ = cox_loss(eta, _rec([2.0, 2.0, 5.0], [1, 1, 1]))
    full = np.log(np.exp(eta).sum())
    expect = -(eta[0] - full + eta[1] - full + eta[2] - eta[2]) / 3.0
    assert abs(loss - expect) < 1e-12


def test_cox_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    for trial in range(5):
        n = int(rng.integers(2, 17))
        times = rng.uniform(1, 50, size=n)
        events = rng.integers(0, 2, size=n)
        events[int(rng.integers(n))] = 1
        records = _rec(times, events)

        def loss_fn(leaf):
            value, _ = cox_loss(leaf, records)
            return value

        report = nm.grad_check(loss_fn, rng.normal(size=n), eps=1e-6)
        assert report.max_relative_error < 1e-6


def test_cox_loss_ranking_monotonicity():
    records = _rec([1.0, 2.0], [1, 1])
    losses = [cox_loss(np.array([eta1, 0.0]), records)[0] for eta1 in (1.0, 0.0, -1.0)]
    assert losses[0] < losses[1] < losses[2]


# ---------------------------------------------------------------------------
# risk head
# ---------------------------------------------------------------------------

def _head_fixture(rng, d, d_e, modalities=("pathway", "histology", "text")):
    beta = {
        m: [(rng.normal(size=(d, d_e)), rng.normal(size=d_e)), (rng.normal(size=(d_e, d_e)), rng.normal(size=d_e))]
        for m in modalities
    }
    ln = {m: (np.ones(d_e), np.zeros(d_e)) for m in modalities}
    return beta, ln


def test_risk_head_zero_final_layer():
    rng = np.random.default_rng(2)
    beta, ln = _head_fixture(rng, 4, 3)
    from protosurv.model import RiskHeadParams

    params = RiskHeadParams(beta, ln, np.zeros((9, 1)), np.zeros(1))
    fused = FusionOutput(rng.normal(size=(2, 4)), rng.normal(size=(2, 4)), rng.normal(size=(1, 4)),
                         np.zeros((5, 5)), {"pathway": 2, "histology": 2, "text": 1})
    validity = {"pathway": np.ones(2), "histology": np.ones(2), "text": np.ones(1)}
    assert risk_head(fused, validity, params) == 0.0


def test_risk_head_duplicate_token_mean_pooling():
    rng = np.random.default_rng(3)
    beta, ln = _head_fixture(rng, 4, 3, modalities=("pathway",))
    from protosurv.model import RiskHeadParams

    params = RiskHeadParams(beta, ln, rng.normal(size=(3, 1)), rng.normal(size=1))
    row = rng.normal(size=(1, 4))
    one = FusionOutput(row, None, None, np.zeros((1, 1)), {"pathway": 1})
    two = FusionOutput(np.vstack([row, row]), None, None, np.zeros((2, 2)), {"pathway": 2})
    r1 = risk_head(one, {"pathway": np.ones(1)}, params)
    r2 = risk_head(two, {"pathway": np.ones(2)}, params)
    assert abs(r1 - r2) < 1e-12


def test_risk_head_matches_scalar_pipeline_oracle():
    rng = np.random.default_rng(4)
    d, d_e = 3, 2
    beta, ln = _head_fixture(rng, d, d_e, modalities=("pathway",))
    from protosurv.model import RiskHeadParams
    from protosurv.numerics import SELU_ALPHA, SELU_SCALE

    w_r, b_r = rng.normal(size=(d_e, 1)), rng.normal(size=1)
    params = RiskHeadParams(beta, ln, w_r, b_r)
    tokens = rng.normal(size=(2, d))
    fused = FusionOutput(tokens, None, None, np.zeros((2, 2)), {"pathway": 2})

    def selu(v):
        return SELU_SCALE * v if v > 0 else SELU_SCALE * SELU_ALPHA * (math.exp(v) - 1)

    pooled = np.zeros(d_e)
    for row in tokens:
        h = row.tolist()
        for w, b in beta["pathway"]:
            h = [selu(sum(h[i] * w[i, j] for i in range(len(h))) + b[j]) for j in range(w.shape[1])]
        mu = sum(h) / d_e
        var = sum((v - mu) ** 2 for v in h) / d_e
        h = [(v - mu) / math.sqrt(var + 1e-5) for v in h]
        pooled += np.asarray(h) / 2.0
    expect = float(pooled @ w_r[:, 0] + b_r[0])
    got = risk_head(fused, {"pathway": np.ones(2)}, params)
    assert abs(got - expect) < 1e-10


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _small_cohort(seed=0, n=24):
    spec = SyntheticSpec(
        n_patients=n, n_segments=(2, 4), n_patches=(20, 30), d_t=6, d_h=5,
        n_genes=24, n_pathways=6, signal_modality="pathway", signal_strength=2.0,
        censoring_rate=0.2, seed=seed,
    )
    return synth_cohort(spec)


def _small_config(**kw):
    base = dict(epochs=2, batch_size=8, seed=5, d_e=6, d_r=2, n_histology=3, n_pathways=6)
    base.update(kw)
    return TrainConfig(**base)


def test_train_zero_epochs_returns_initialisation():
    cohort = _small_cohort()
    config = _small_config(epochs=0)
    prepared, dims, _ = build_prepared(cohort, config)
    model, history = train(prepared, config)
    assert history == []
    expected = init_params(dims, substream(config.seed, "init"))
    for name, _ in param_spec(dims):
        np.testing.assert_array_equal(model.values[name], expected[name])


def test_train_deterministic():
    cohort = _small_cohort()
    config = _small_config()
    prepared, _, _ = build_prepared(cohort, config)
    model_a, hist_a = train(prepared, config)
    model_b, hist_b = train(prepared, config)
    assert np.max(np.abs(model_a.flat() - model_b.flat())) < 1e-12
    assert [h.mean_loss for h in hist_a] == [h.mean_loss for h in hist_b]


def test_train_requires_events():
    cohort = _small_cohort()
    for r in cohort.records:
        r.event = 0
    config = _small_config()
    prepared, _, _ = build_prepared(cohort, config)
    with pytest.raises(NoEvents):
        train(prepared, config)


def test_train_loss_decreases_on_signal_cohort():
    cohort = _small_cohort(n=40)
    config = _small_config(epochs=8, learning_rate=5e-3)
    prepared, _, _ = build_prepared(cohort, config)
    _, history = train(prepared, config)
    assert history[-1].mean_loss < history[0].mean_loss


def test_predict_matches_training_forward_and_is_pure():
    cohort = _small_cohort()
    config = _small_config()
    prepared, _, _ = build_prepared(cohort, config)
    model, _ = train(prepared, config)
    flat_before = model.flat().copy()
    risks_a = predict_cohort(model, prepared, config.fusion_mode)
    risks_b = predict_cohort(model, prepared, config.fusion_mode)
    np.testing.assert_array_equal(risks_a, risks_b)
    np.testing.assert_array_equal(model.flat(), flat_before)
    single = predict(model, prepared.subset(np.array([3])), config.fusion_mode)
    assert abs(single - risks_a[3]) < 1e-12


def test_cosine_schedule_endpoints():
    assert cosine_lr(1e-4, 0, 50) == 1e-4
    assert cosine_lr(1e-4, 49, 50) <= 0.01 * 1e-4


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cohort = _small_cohort()
    config = _small_config(epochs=1)
    prepared, dims, _ = build_prepared(cohort, config)
    model, _ = train(prepared, config)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, config, "digest0")
    loaded, loaded_config, digest = load_checkpoint(path)
    assert digest == "digest0"
    assert loaded_config == config
    assert loaded.dims == dims
    path2 = tmp_path / "model2.ckpt"
    save_checkpoint(path2, loaded, loaded_config, digest)
    assert path.read_bytes() == path2.read_bytes()
    for name, _ in param_spec(dims):
        np.testing.assert_array_equal(
            loaded.values[name], model.values[name].astype(np.float32).astype(np.float64)
        )


def test_checkpoint_prediction_consistency(tmp_path):
    cohort = _small_cohort()
    config = _small_config(epochs=1)
    prepared, _, _ = build_prepared(cohort, config)
    model, _ = train(prepared, config)
    save_checkpoint(tmp_path / "m.ckpt", model, config, "")
    loaded, _, _ = load_checkpoint(tmp_path / "m.ckpt")
    a = predict_cohort(model, prepared, config.fusion_mode)
    b = predict_cohort(loaded, prepared, config.fusion_mode)
    # float32 storage rounds parameters; predictions stay close
    assert np.max(np.abs(a - b)) < 1e-4
