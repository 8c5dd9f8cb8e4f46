import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from updown_vqa import trainer as T
from updown_vqa.datapipe import collate, encode_example, synth_task, SynthSpec, Vocabulary
from updown_vqa.model import ModelConfig, load_checkpoint
from updown_vqa.trainer import AdamaxState, LrSchedule, adamax_step, lr_at

CHALLENGE = LrSchedule.challenge()
AUGMENTED = LrSchedule.augmented()


def closed_form(it, base, peak, warm, first, every):
    if it <= warm:
        return base + (peak - base) * it / warm
    if it < first:
        return peak
    return peak / 10.0 ** (1 + (it - first) // every)


CHALLENGE_POINTS = [0, 1, 500, 999, 1000, 3000, 4999, 5000, 6999, 7000, 9000, 11000, 11999]


@pytest.mark.parametrize("it", CHALLENGE_POINTS)
def test_challenge_schedule_closed_form(it):
    assert lr_at(it, CHALLENGE) == closed_form(it, 0.002, 0.01, 1000, 5000, 2000)


@pytest.mark.parametrize("it", [0, 1, 500, 999, 1000, 3000, 14999, 15000, 16999, 17000, 19000, 21000, 21999])
def test_augmented_schedule_closed_form(it):
    assert lr_at(it, AUGMENTED) == closed_form(it, 0.002, 0.01, 1000, 15000, 2000)


def test_schedule_landmark_values_are_exact():
    assert lr_at(0, CHALLENGE) == 0.002
    assert lr_at(1000, CHALLENGE) == 0.01
    assert lr_at(4999, CHALLENGE) == 0.01
    assert lr_at(5000, CHALLENGE) == 0.001
    assert lr_at(7000, CHALLENGE) == 1e-4
    assert lr_at(15000, AUGMENTED) == 0.001
    assert lr_at(17000, AUGMENTED) == 1e-4


def test_schedule_bounds():
    with pytest.raises(ValueError, match="past end of schedule"):
        lr_at(12000, CHALLENGE)
    with pytest.raises(ValueError):
        lr_at(-1, CHALLENGE)
    with pytest.raises(ValueError):
        LrSchedule(warmup_iters=6000)


def test_scaled_schedule():
    s = CHALLENGE.scaled(0.1)
    assert (s.warmup_iters, s.first_decay_iter, s.decay_every, s.stop_iter) == (100, 500, 200, 1200)
    assert s.decay_points() == [500, 700, 900, 1100]
    a = AUGMENTED.scaled(0.1)
    assert a.decay_points()[0] == 1500 and a.stop_iter == 2200


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 11998))
def test_schedule_is_unimodal(it):
    # nondecreasing through warmup, nonincreasing afterwards
    a, b = lr_at(it, CHALLENGE), lr_at(it + 1, CHALLENGE)
    assert b >= a if it < 1000 else b <= a


# -- Adamax -----------------------------------------------------------------


def _scalar_step(lr, group="default", mult=0.1, g=1.0):
    params = {"w": np.array([1.0])}
    state = AdamaxState.zeros_like(params)
    adamax_step(params, {"w": np.array([g])}, state, lr, {"w": group}, {"default": 1.0, "finetune": mult})
    return params["w"][0], state


def test_adamax_first_step():
    theta, state = _scalar_step(0.002)
    assert abs(theta - 0.998) <= 1e-9
    assert state.t == 1 and state.m["w"][0] == pytest.approx(0.1) and state.u["w"][0] == 1.0


def test_adamax_finetune_multiplier():
    theta, _ = _scalar_step(0.002, group="finetune")
    assert abs(theta - 0.9998) <= 1e-9


def test_adamax_zero_gradient_is_noop():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamaxState.zeros_like(params)
    adamax_step(params, {"w": np.zeros(2)}, state, 0.01)
    assert params["w"].tolist() == [1.0, -2.0]


def test_adamax_rejects_bad_inputs():
    params = {"w": np.array([1.0])}
    state = AdamaxState.zeros_like(params)
    with pytest.raises(FloatingPointError, match="diverged gradient"):
        adamax_step(params, {"w": np.array([np.inf])}, state, 0.01)
    with pytest.raises(KeyError):
        adamax_step(params, {"w": np.array([1.0])}, state, 0.01, {"w": "mystery"})


def test_adamax_matches_reference_loop():
    # reference: textbook Adamax written out per scalar
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 3))
    params = {"w": np.zeros(3)}
    state = AdamaxState.zeros_like(params)
    ref = np.zeros(3)
    m, u = np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, start=1):
        adamax_step(params, {"w": g}, state, 0.01)
        for i in range(3):
            m[i] = 0.9 * m[i] + 0.1 * g[i]
            u[i] = max(0.999 * u[i], abs(g[i]))
            ref[i] -= 0.01 / (1 - 0.9 ** t) * m[i] / (u[i] + 1e-8)
    np.testing.assert_allclose(params["w"], ref, rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(1e-5, 1e-1))
def test_adamax_first_step_size_is_lr(g, lr):
    # |step| = lr * |g| / (|g| + eps) on the first update
    theta, _ = _scalar_step(lr, g=g)
    assert 1.0 - theta == pytest.approx(lr * g / (g + 1e-8), rel=1e-12)


# -- training loop ------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_task():
    ds = synth_task(0, SynthSpec(n_train=40, n_val=10))
    vocab = Vocabulary.from_records(ds.train)
    examples = [encode_example(r, ds.features[r.image_id], vocab, ds.answer_space) for r in ds.train]
    config = ModelConfig(vocab_size=len(vocab), num_answers=len(ds.answer_space), embed_dim=8, gru_hidden=8,
                         fusion_hidden=8, region_feat_dim=ds.spec.feat_dim, use_boxes=True)
    return config, examples


def _run(tmp_path, name, schedule, **kw):
    return T.TrainRunConfig(seed=3, batch_size=8, schedule=schedule, checkpoint_path=str(tmp_path / f"{name}.ckpt"),
                            log_path=str(tmp_path / f"{name}.tsv"), **kw)


def test_training_is_deterministic(tmp_path, tiny_task):
    config, examples = tiny_task
    sched = CHALLENGE.scaled(0.003)
    T.train(_run(tmp_path, "a", sched), config, examples, collate)
    T.train(_run(tmp_path, "b", sched), config, examples, collate)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.tsv").read_text() == (tmp_path / "b.tsv").read_text()


def test_training_reduces_loss(tmp_path, tiny_task):
    config, examples = tiny_task
    result = T.train(_run(tmp_path, "c", CHALLENGE.scaled(0.02)), config, examples, collate)
    losses = [r.loss for r in result.log]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_log_records_learning_rate(tmp_path, tiny_task):
    config, examples = tiny_task
    sched = AUGMENTED.scaled(0.001)  # warmup 1, decay at 15, stop 22
    result = T.train(_run(tmp_path, "d", sched), config, examples, collate)
    lrs = {r.iteration: r.lr for r in result.log}
    assert lrs[14] == 0.01 and lrs[15] == 0.001
    assert len(result.log) == sched.stop_iter


def test_divergence_writes_last_good_checkpoint(tmp_path, tiny_task, monkeypatch):
    config, examples = tiny_task
    calls = {"n": 0}
    real = T.adamax_step

    def exploding(params, grads, *a, **k):
        calls["n"] += 1
        if calls["n"] == 4:
            grads = {k2: v * np.nan for k2, v in grads.items()}
        return real(params, grads, *a, **k)

    monkeypatch.setattr(T, "adamax_step", exploding)
    with pytest.raises(T.TrainingDiverged, match="iteration 3"):
        T.train(_run(tmp_path, "e", CHALLENGE.scaled(0.003)), config, examples, collate)
    params, _, _ = load_checkpoint(tmp_path / "e.ckpt")
    assert all(np.isfinite(a).all() for a in params.arrays.values())


def test_batch_order_covers_each_epoch():
    order = T.batch_order(10, 4, 6, seed=1)
    assert [len(b) for b in order] == [4, 4, 2, 4, 4, 2]
    assert sorted(np.concatenate(order[:3]).tolist()) == list(range(10))


def test_finetune_multiplier_validated():
    with pytest.raises(ValueError):
        T.TrainRunConfig(finetune_lr_multiplier=1.5)
