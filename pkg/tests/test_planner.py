import numpy as np
import pytest

from mvdiff.planner import (
    PlannerConfig,
    PlannerModel,
    PlannerTrainConfig,
    Sample,
    corpus_samples,
    evaluate_planner,
    load_planner,
    model_plan_fn,
    plan,
    planner_hash,
    save_planner,
    train_planner,
)
from mvdiff.rng import RngStream
from mvdiff.scenegen import GenSpec, corpus_build, Corpus
from mvdiff.tensor import DimensionError


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("planner_corpus")
    spec = GenSpec(n_frames=14)
    manifest = corpus_build(16, 6, 42, root, spec=spec, V=2, H=24, W=24)
    return Corpus(manifest)


def _pcfg():
    return PlannerConfig(image=24, views=2, width=8, hidden=48)


def test_parameter_budget():
    model = PlannerModel(PlannerConfig(), RngStream(0).fork("init"))
    assert sum(p.data.size for p in model.params().values()) < 1_000_000


def test_plan_output_contract(small_corpus):
    model = PlannerModel(_pcfg(), RngStream(1).fork("init"))
    s = corpus_samples(small_corpus, "train")[0]
    wp = plan(model, s.frames[0], (5.0, 0.0))
    assert wp.shape == (6, 2)
    assert np.all(np.isfinite(wp))


def test_plan_deterministic(small_corpus):
    model = PlannerModel(_pcfg(), RngStream(2).fork("init"))
    s = corpus_samples(small_corpus, "train")[0]
    a = plan(model, s.frames[0], (5.0, 0.0))
    b = plan(model, s.frames[0], (5.0, 0.0))
    np.testing.assert_array_equal(a, b)


def test_plan_shape_error():
    model = PlannerModel(_pcfg(), RngStream(3).fork("init"))
    with pytest.raises(DimensionError):
        plan(model, np.zeros((2, 3, 16, 16), dtype=np.float32), (5.0, 0.0))


def test_blank_frames_still_plan(small_corpus):
    model = PlannerModel(_pcfg(), RngStream(4).fork("init"))
    wp = plan(model, np.zeros((2, 3, 24, 24), dtype=np.float32), (6.0, 0.0))
    assert np.all(np.isfinite(wp))


def test_training_beats_zero_baseline(small_corpus):
    samples = corpus_samples(small_corpus, "train")
    cfg = PlannerTrainConfig(steps=250, batch=8, seed=7)
    model = train_planner(samples, cfg, planner_cfg=_pcfg())
    val = corpus_samples(small_corpus, "val")
    err_model, err_zero, n = 0.0, 0.0, 0
    for s in val:
        for f in s.usable_frames()[::3]:
            target = s.scene.ego_future(f)
            wp = plan(model, s.frames[f], (s.scene.ego_speed(f), s.scene.ego_yaw_rate(f)))
            err_model += float(((wp - target) ** 2).mean())
            err_zero += float((target**2).mean())
            n += 1
    assert err_model / n < 0.5 * (err_zero / n)


def test_training_is_deterministic(small_corpus):
    samples = corpus_samples(small_corpus, "train")[:4]
    cfg = PlannerTrainConfig(steps=12, batch=4, seed=11)
    h1 = planner_hash(train_planner(samples, cfg, planner_cfg=_pcfg()))
    h2 = planner_hash(train_planner(samples, cfg, planner_cfg=_pcfg()))
    assert h1 == h2


def test_finetune_zero_steps_is_identity(small_corpus):
    samples = corpus_samples(small_corpus, "train")[:4]
    cfg = PlannerTrainConfig(steps=10, batch=4, seed=13)
    model = train_planner(samples, cfg, planner_cfg=_pcfg())
    before = planner_hash(model)
    out = train_planner(samples, PlannerTrainConfig(steps=0, batch=4, seed=14), model=model, finetune=True)
    assert planner_hash(out) == before


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        train_planner([], PlannerTrainConfig(steps=1))


def test_validation_pixels_rejected_in_training(small_corpus):
    val = corpus_samples(small_corpus, "val")
    with pytest.raises(ValueError, match="validation"):
        train_planner(val, PlannerTrainConfig(steps=1), planner_cfg=_pcfg())


def test_oracle_planner_near_zero_collisions(small_corpus):
    samples = corpus_samples(small_corpus, "val")
    rates = evaluate_planner(lambda scene, frames, n: scene.ego_future(n), samples)
    assert rates["avg"] < 0.01


def test_adversarial_planner_collides(small_corpus):
    def adversarial(scene, frames, n):
        boxes = scene.boxes_at(n)
        if not boxes:
            return scene.ego_future(n)
        nearest = min(boxes, key=lambda b: b.center[0] ** 2 + b.center[1] ** 2)
        return np.tile(np.asarray(nearest.center, dtype=np.float64), (6, 1))

    samples = corpus_samples(small_corpus, "train") + corpus_samples(small_corpus, "val")
    rates = evaluate_planner(adversarial, samples)
    assert rates["avg"] > 0.5
    assert set(rates) == {"1s", "2s", "3s", "avg"}


def test_evaluation_is_pure(small_corpus):
    model = PlannerModel(_pcfg(), RngStream(21).fork("init"))
    samples = corpus_samples(small_corpus, "val")
    r1 = evaluate_planner(model_plan_fn(model), samples)
    r2 = evaluate_planner(model_plan_fn(model), samples)
    assert r1 == r2


def test_save_load_roundtrip(tmp_path, small_corpus):
    model = PlannerModel(_pcfg(), RngStream(22).fork("init"))
    p = tmp_path / "planner.ckpt"
    save_planner(p, model)
    back = load_planner(p)
    assert planner_hash(back) == planner_hash(model)
