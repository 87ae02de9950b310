import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echolab.data_pipeline import PhantomParams, generate_phantoms
from echolab.diffusion_core import GaussianDenoiser, NoiseSchedule
from echolab.errors import ConfigError, DataError, ShapeError
from echolab.guidance import AnalyticDiscriminator, GuidanceConfig
from echolab.samplers import sample
from echolab.shift_lab import (
    CONVNET_NAME,
    REPORT_COLUMNS,
    AugmentDraw,
    ShiftStudyConfig,
    augment,
    bayes_accuracy_equal_cov,
    build_classifier,
    report_csv,
    shift_report,
    stratified_split,
    train_shift_classifier,
)


def fast(kind="linear", augment=False, epochs=10, seed=0):
    return ShiftStudyConfig(kind, augment, epochs, 1e-3, seed=seed)


# --- config and split ------------------------------------------------------------------


@pytest.mark.parametrize("kw", [{"split": 1.0}, {"split": 0.0}, {"epochs": 0}, {"classifier": "resnet"}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ShiftStudyConfig(**kw)


def test_config_defaults_follow_protocol():
    cfg = ShiftStudyConfig()
    assert (cfg.epochs, cfg.lr, cfg.split) == (50, 1e-4, 0.9)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 400), st.integers(2, 400), st.floats(0.1, 0.9), st.integers(0, 100))
def test_split_integrity(n_real, n_gen, split, seed):
    tr, va = stratified_split(n_real, n_gen, split, seed)
    assert len(np.intersect1d(tr, va)) == 0
    np.testing.assert_array_equal(np.sort(np.concatenate([tr, va])), np.arange(n_real + n_gen))
    real_tr, gen_tr = np.sum(tr < n_real), np.sum(tr >= n_real)
    assert abs(real_tr - round(split * n_real)) <= 1 and abs(gen_tr - round(split * n_gen)) <= 1


def test_duplicated_pairs_share_a_side():
    tr, va = stratified_split(500, 500, 0.9, 3)
    assert set(va[va < 500]) == {i - 500 for i in va[va >= 500]}


def test_degenerate_split_rejected():
    with pytest.raises(DataError):
        train_shift_classifier(np.zeros((2, 3)), np.zeros((2, 3)), ShiftStudyConfig(split=0.9))


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        train_shift_classifier(np.zeros((10, 3)), np.zeros((10, 4)), fast())


# --- classifiers ------------------------------------------------------------------------------


def test_linear_classifier_has_no_nonlinearity():
    net = build_classifier("linear", (1, 4, 4), 0)
    assert [layer.kind for layer in net.layers] == ["flatten", "dense"]


def test_convnet_structure():
    net = build_classifier("convnet", (1, 8, 8), 0)
    kinds = [layer.kind for layer in net.layers]
    assert kinds.count("conv") == 4 and kinds.count("norm") == 4 and kinds[-2:] == ["pool", "dense"]
    assert net(np.zeros((3, 1, 8, 8))).shape == (3, 1)


@pytest.mark.parametrize("kind", ["linear", "convnet"])
@pytest.mark.parametrize("seed", range(5))
def test_identical_data_chance_level(kind, seed):
    x = np.random.default_rng(seed).standard_normal((1000, 1, 8, 8)) * 0.3
    res = train_shift_classifier(x, x.copy(), fast(kind, epochs=3, seed=seed))
    assert 0.45 <= res.val_accuracy <= 0.55


def test_linear_close_to_bayes_accuracy():
    rng = np.random.default_rng(1)
    delta = np.full(16, 0.5)  # |delta| = 2, sigma = 1 -> Bayes accuracy Phi(1)
    real = rng.standard_normal((4000, 1, 4, 4))
    gen = rng.standard_normal((4000, 1, 4, 4)) + delta.reshape(1, 4, 4)
    res = train_shift_classifier(real, gen, fast(epochs=10))
    bayes = bayes_accuracy_equal_cov(2.0, 1.0)
    assert bayes == pytest.approx(0.8413447460685429, abs=1e-12)
    assert abs(res.val_accuracy - bayes) <= 0.03


@pytest.mark.parametrize("kind", ["linear", "convnet"])
def test_all_zero_generated_set_detected(kind):
    real = generate_phantoms(PhantomParams(size=16), 600, 0).to_unit()
    res = train_shift_classifier(real, np.zeros_like(real), fast(kind, epochs=5))
    assert res.val_accuracy >= 0.99


def test_training_log_and_best_epoch():
    rng = np.random.default_rng(2)
    real, gen = rng.standard_normal((400, 4)), rng.standard_normal((400, 4)) + 0.5
    res = train_shift_classifier(real, gen, fast(epochs=6))
    accs = [row["val_accuracy"] for row in res.log]
    assert len(res.log) == 6
    assert res.val_accuracy == max(accs) and res.best_epoch == accs.index(max(accs))
    assert res.final_accuracy == accs[-1]


def test_training_deterministic():
    rng = np.random.default_rng(3)
    real, gen = rng.standard_normal((200, 1, 4, 4)), rng.standard_normal((200, 1, 4, 4)) + 0.2
    a = train_shift_classifier(real, gen, fast("convnet", True, epochs=2))
    b = train_shift_classifier(real, gen, fast("convnet", True, epochs=2))
    assert a.log == b.log and np.array_equal(a.network.params, b.network.params)


# --- augmentation -------------------------------------------------------------------------------


def test_null_draw_is_identity():
    img = np.random.default_rng(4).standard_normal((1, 10, 10))
    np.testing.assert_array_equal(augment(img, draw=AugmentDraw()), img)


def test_same_seed_same_output():
    img = np.random.default_rng(5).standard_normal((2, 12, 12))
    a = augment(img, np.random.default_rng(9))
    b = augment(img, np.random.default_rng(9))
    assert np.array_equal(a, b) and a.shape == img.shape


def test_flip_only():
    img = np.arange(12.0).reshape(1, 3, 4)
    np.testing.assert_array_equal(augment(img, draw=AugmentDraw(flip=True)), img[:, :, ::-1])


def test_rotation_fill_is_image_minimum():
    img = np.random.default_rng(6).uniform(0.2, 1.0, (1, 9, 9))
    out = augment(img, draw=AugmentDraw(angle=45.0))
    assert out[0, 0, 0] == img.min()


def test_uniform_images_keep_their_mean():
    rng = np.random.default_rng(7)
    img = np.full((1, 16, 16), 0.6)
    means = [augment(img, rng).mean() for _ in range(1000)]
    assert abs(np.mean(means) - 0.6) <= 0.06


def test_augmentation_needs_images():
    with pytest.raises(ShapeError):
        train_shift_classifier(np.zeros((20, 3)), np.ones((20, 3)), fast(augment=True))


# --- report ----------------------------------------------------------------------------------------


def test_identical_phases_give_identical_rows():
    rng = np.random.default_rng(8)
    real, gen = rng.standard_normal((300, 4)), rng.standard_normal((300, 4)) + 0.3
    rows = shift_report(real, gen, gen, [fast(epochs=3)])
    pre, post = rows
    assert {k: v for k, v in pre.items() if k != "phase"} == {k: v for k, v in post.items() if k != "phase"}


def test_optimal_guidance_lowers_accuracy():
    sch = NoiseSchedule.edm()
    real = GaussianDenoiser(np.zeros(16), 0.25, shape=(1, 4, 4))
    model = real.shifted(np.full(16, 0.25))
    disc = AnalyticDiscriminator(real, model)
    data = real.sample(3000, np.random.default_rng(1))
    pre = sample("heun", model, sch, 18, 3000, 2).samples
    post = sample("heun", model, sch, 18, 3000, 2, disc, GuidanceConfig(1, 1, 1)).samples
    rows = shift_report(data, pre, post, [fast(epochs=10, seed=s) for s in range(5)])
    acc = {ph: np.median([r["val_accuracy"] for r in rows if r["phase"] == ph]) for ph in ("pre", "post")}
    assert acc["post"] <= acc["pre"]
    assert acc["pre"] > 0.7 and abs(acc["post"] - 0.5) < 0.05


def test_report_csv_columns_and_labels():
    rows = [{"classifier": CONVNET_NAME, "augment": True, "phase": "pre", "seed": 0, "best_epoch": 3,
             "val_accuracy": 0.75, "final_accuracy": 0.7}]
    lines = report_csv(rows).splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert lines[1] == "convnet4 (ResNet-18 stand-in),True,pre,0,3,0.75"
