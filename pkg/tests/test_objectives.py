import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssgan import objectives as O
from ssgan import tensor as T
from ssgan.objectives import LossConfig
from ssgan.tensor import Tensor

pytestmark = pytest.mark.usefixtures("f64")

# -log(sigmoid(2)), evaluated with the logistic formula directly
BCE_2 = 0.1269280110429725


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def vectors_with_cosines(anchor_dim, cosines):
    """Unit vectors whose cosine with e_0 equals each entry of ``cosines``."""
    out = np.zeros((len(cosines), anchor_dim))
    out[:, 0] = cosines
    out[:, 1] = np.sqrt(1 - np.asarray(cosines) ** 2)
    return out


# ---------------------------------------------------------------------------
# hand-computed values
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("real,fake,want", [
    ([1.0], [-1.0], 0.0),
    ([0.0], [0.0], 2.0),
    ([-1.0, 1.0], [1.0], 3.0),
])
def test_adv_loss_d_examples(real, fake, want):
    assert O.adv_loss_d(t(real), t(fake)).item() == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("fake,want", [([0.0], 0.0), ([1.0, 3.0], -2.0), ([-5.0], 5.0)])
def test_adv_loss_g_examples(fake, want):
    assert O.adv_loss_g(t(fake)).item() == pytest.approx(want, abs=1e-12)


def test_recon_mse_examples():
    z = np.array([[0.3, -0.2]])
    assert O.recon_mse(t(z), z).item() == 0.0
    assert O.recon_mse(t([[0.0, 0.0]]), np.array([[1.0, -1.0]])).item() == pytest.approx(2.0)
    # per-sample squared norms 2 and 4
    z_hat = np.array([[1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]])
    assert O.recon_mse(t(z_hat), np.zeros((2, 4))).item() == pytest.approx(3.0)


def test_recon_bce_examples():
    ln2 = math.log(2)
    assert O.recon_bce(t(np.zeros((2, 3))), np.ones((2, 3))).item() == pytest.approx(ln2, abs=1e-12)
    assert O.recon_bce(t(np.zeros((2, 3))), -np.ones((2, 3))).item() == pytest.approx(ln2, abs=1e-12)
    got = O.recon_bce(t([[2.0, -2.0]]), np.array([[1.0, -1.0]])).item()
    assert got == pytest.approx(BCE_2, abs=1e-12)


def test_recon_bce_matches_sigmoid_form(rng):
    z_hat = rng.normal(0, 3, (5, 7))
    z = np.where(rng.random((5, 7)) < 0.5, -1.0, 1.0)
    s = 1 / (1 + np.exp(-z_hat))
    tt = (1 + z) / 2
    oracle = np.mean(-(tt * np.log(s) + (1 - tt) * np.log(1 - s)))
    assert O.recon_bce(t(z_hat), z).item() == pytest.approx(oracle, rel=1e-12)


def test_recon_bce_is_stable_for_large_logits():
    val = O.recon_bce(t([[800.0, -800.0]]), np.array([[-1.0, 1.0]])).item()
    assert val == pytest.approx(800.0)


def test_cosine_distance_examples():
    z = np.array([1.0, 2.0, -0.5])
    assert O.cosine_distance(t(z), t(z)).item() == pytest.approx(0.0, abs=1e-12)
    assert O.cosine_distance(t([1.0, 0.0]), t([0.0, 3.0])).item() == pytest.approx(1.0)
    assert O.cosine_distance(t(z), t(-z)).item() == pytest.approx(2.0)


def test_triplet_examples():
    e0 = np.array([1.0, 0.0, 0.0])
    assert O.triplet_loss(t(e0), t(vectors_with_cosines(3, [0.8, 0.8])),
                          t(vectors_with_cosines(3, [0.1, 0.1])), 0.5).item() == 0.0
    got = O.triplet_loss(t(e0), t(vectors_with_cosines(3, [0.9, 0.4])),
                         t(vectors_with_cosines(3, [0.6, 0.2])), 0.5).item()
    assert got == pytest.approx(0.7, abs=1e-12)
    got = O.triplet_loss(t(e0), t(np.stack([e0, e0])),
                         t(vectors_with_cosines(3, [0.7, 0.1])), 0.5).item()
    assert got == pytest.approx(0.2, abs=1e-12)


def test_regularizer_examples():
    a = np.array([[0.3, -1.0, 2.0]])
    assert O.stage2_regularizer(t(a), a).item() == 0.0
    assert O.stage2_regularizer(t([[1.0, 0.0]]), np.array([[0.0, 1.0]])).item() == pytest.approx(2.0)


def test_regularizer_is_quadratic(rng):
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    one = O.stage2_regularizer(t(a), b).item()
    assert O.stage2_regularizer(t(2 * a), 2 * b).item() == pytest.approx(4 * one, rel=1e-12)


def test_compositions():
    one = lambda v: Tensor(np.array(v))  # noqa: E731
    adv = one(0.9)
    cfg = LossConfig(beta=0.0)
    assert O.total_stage1_g({"adv": adv, "recon": one(5.0)}, cfg).item() == 0.9
    assert O.total_stage1_d({"adv": one(1.5), "recon": one(0.4)},
                            LossConfig(gamma=1.0)).item() == pytest.approx(1.9)
    assert O.total_stage2_d({"triplet": one(0.7), "reg": one(0.5)},
                            LossConfig(lam=0.2)).item() == pytest.approx(0.8)
    # recon_kind none drops the reconstruction term
    assert O.total_stage1_d({"adv": one(1.5)}, LossConfig(recon_kind="none")).item() == 1.5
    single = LossConfig(gamma=2.0, triplet_kind="single_stage")
    got = O.total_stage1_d({"adv": one(1.0), "recon": one(0.5), "triplet": one(0.25)}, single)
    assert got.item() == pytest.approx(1.0 + 2 * 0.5 + 2 * 0.25)


def test_compositions_are_linear():
    cfg = LossConfig(beta=0.7, gamma=1.3, lam=0.2)
    f = lambda a, r: O.total_stage1_d({"adv": Tensor(np.array(a)),  # noqa: E731
                                       "recon": Tensor(np.array(r))}, cfg).item()
    p, q = (0.4, 1.1), (2.0, -0.3)
    mid = tuple(0.25 * x + 0.75 * y for x, y in zip(p, q))
    assert f(*mid) == pytest.approx(0.25 * f(*p) + 0.75 * f(*q), abs=1e-12)


# ---------------------------------------------------------------------------
# errors
# ---------------------------------------------------------------------------

def test_errors():
    with pytest.raises(ValueError):
        O.adv_loss_d(t(np.zeros(0)), t([1.0]))
    with pytest.raises(ValueError):
        O.adv_loss_g(t(np.zeros(0)))
    with pytest.raises(T.ShapeError):
        O.recon_mse(t(np.zeros((2, 3))), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        O.recon_bce(t(np.zeros((1, 2))), np.array([[1.0, 0.0]]))
    with pytest.raises(ValueError):
        O.cosine_distance(t([0.0, 0.0]), t([1.0, 0.0]))
    with pytest.raises(ValueError):
        O.triplet_loss(t([1.0, 0.0]), t(np.zeros((0, 2))), t([[0.0, 1.0]]), 0.5)
    with pytest.raises(T.ShapeError):
        O.stage2_regularizer(t(np.zeros((2, 3))), np.zeros((3, 3)))
    with pytest.raises(KeyError):
        O.total_stage1_g({"adv": t(1.0)}, LossConfig(recon_kind="bce"))
    with pytest.raises(KeyError):
        O.total_stage2_d({"triplet": t(1.0)}, LossConfig())


def test_loss_config_validation():
    LossConfig().validate("bernoulli")
    with pytest.raises(ValueError):
        LossConfig(recon_kind="bce").validate("uniform")
    with pytest.raises(ValueError):
        LossConfig(recon_kind="mse").validate("bernoulli")
    with pytest.raises(ValueError):
        LossConfig(lam=-1).validate()


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

finite = st.floats(-3, 3, allow_nan=False)


@given(st.lists(finite, min_size=1, max_size=6), st.lists(finite, min_size=1, max_size=6))
def test_adv_loss_d_nonnegative_and_zero_iff_margins(real, fake):
    with T.default_dtype(np.float64):
        val = O.adv_loss_d(t(real), t(fake)).item()
    assert val >= 0
    assert (val == 0) == (min(real) >= 1 and max(fake) <= -1)


def test_recon_bce_decreases_toward_target():
    z = np.array([[1.0, -1.0]])
    sweep = np.linspace(-5, 5, 41)
    vals = [O.recon_bce(t([[s, -s]]), z).item() for s in sweep]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert min(vals) >= 0


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100), st.floats(0.01, 100))
def test_cosine_scale_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    z, w = rng.standard_normal(5), rng.standard_normal(5)
    with T.default_dtype(np.float64):
        base = O.cosine_distance(t(z), t(w)).item()
        scaled = O.cosine_distance(t(a * z), t(b * w)).item()
    assert abs(base - scaled) < 1e-10
    assert -1e-12 <= base <= 2 + 1e-12


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_triplet_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    a, p, n = rng.standard_normal(4), rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
    with T.default_dtype(np.float64):
        base = O.triplet_loss(t(a), t(p), t(n), 0.5).item()
        perm = O.triplet_loss(t(a), t(p[rng.permutation(3)]), t(n[rng.permutation(5)]), 0.5)
    assert perm.item() == base
    assert 0 <= base <= 2.5 + 1e-12


def test_batched_triplet_is_mean_of_single(rng):
    a, p, n = rng.standard_normal((3, 4)), rng.standard_normal((3, 2, 4)), rng.standard_normal((3, 5, 4))
    batched = O.triplet_loss(t(a), t(p), t(n), 0.5).item()
    singles = [O.triplet_loss(t(a[i]), t(p[i]), t(n[i]), 0.5).item() for i in range(3)]
    assert batched == pytest.approx(np.mean(singles), abs=1e-12)


@pytest.mark.parametrize("name", ["adv_loss_d", "adv_loss_g", "recon_mse", "recon_bce",
                                  "cosine_distance", "triplet_loss", "stage2_regularizer"])
def test_losses_pass_gradcheck(name):
    from ssgan.gradcheck import run_suite
    [res] = run_suite(seed=3, names={name})
    assert res.error < 1e-4
