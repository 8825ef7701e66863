import numpy as np
import pytest

from robustface.errors import LossError, ShapeError
from robustface.losses import (
    ContrastiveLossConfig,
    TripletLossConfig,
    distance,
    nt_xent,
    paired_halves,
    triplet_loss,
)
from robustface.tensor import Tensor, grad_check


def nt_xent_oracle(z, pairing, temperature, extra=None):
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    rows = z.shape[0]
    total = 0.0
    for i in range(rows):
        positives = [pairing[i]]
        if extra is not None:
            positives += [j for j in range(rows) if extra[i, j] and j != i and j != pairing[i]]
        denom = sum(np.exp(z[i] @ z[k] / temperature) for k in range(rows) if k != i)
        total += np.mean([-np.log(np.exp(z[i] @ z[j] / temperature) / denom) for j in positives])
    return total / rows


def unit_at_distance(d, axis):
    """Unit vector whose squared Euclidean distance to e_0 is ``d``."""
    cos = 1.0 - d / 2.0
    v = np.zeros(3)
    v[0], v[axis] = cos, np.sqrt(1.0 - cos * cos)
    return v[None]


def unit_rows(rng, shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestNtXent:
    @pytest.mark.parametrize("n", [2, 4, 8])
    def test_matches_double_loop(self, n, rng):
        z = rng.normal(size=(2 * n, 5))
        pairing = paired_halves(n)
        got = nt_xent(Tensor(z), pairing, ContrastiveLossConfig(0.5)).item()
        assert got == pytest.approx(nt_xent_oracle(z, pairing, 0.5), abs=1e-5)

    def test_extra_positives(self, rng):
        z = rng.normal(size=(8, 5))
        pairing = paired_halves(4)
        extra = np.zeros((8, 8), dtype=bool)
        extra[0, 1] = extra[1, 0] = extra[4, 5] = True
        got = nt_xent(Tensor(z), pairing, ContrastiveLossConfig(0.3), extra).item()
        assert got == pytest.approx(nt_xent_oracle(z, pairing, 0.3, extra), abs=1e-5)

    def test_aligned_pairs_beat_random(self, rng):
        base = rng.normal(size=(4, 6))
        aligned = np.concatenate([base, base])
        shuffled = np.concatenate([base, rng.normal(size=(4, 6))])
        pairing = paired_halves(4)
        assert nt_xent(Tensor(aligned), pairing).item() < nt_xent(Tensor(shuffled), pairing).item()

    def test_gradient(self, rng):
        pairing = paired_halves(2)
        assert grad_check(lambda z: nt_xent(z, pairing), Tensor(rng.normal(size=(4, 3)))) <= 1e-4

    def test_gradient_with_extra_positives(self, rng):
        pairing = paired_halves(3)
        extra = np.zeros((6, 6), dtype=bool)
        extra[0, 2] = extra[2, 0] = True
        assert grad_check(lambda z: nt_xent(z, pairing, extra_positives=extra), Tensor(rng.normal(size=(6, 4)))) <= 1e-4

    @pytest.mark.parametrize("pairing", [[1, 0, 2, 3], [0, 1, 2, 3], [1, 2, 3, 0], [1, 0, 3]])
    def test_bad_pairing(self, pairing, rng):
        with pytest.raises(LossError):
            nt_xent(Tensor(rng.normal(size=(4, 3))), pairing)

    def test_odd_batch(self, rng):
        with pytest.raises(LossError):
            nt_xent(Tensor(rng.normal(size=(3, 3))), [1, 0, 2])

    def test_extra_positive_shape(self, rng):
        with pytest.raises(ShapeError):
            nt_xent(Tensor(rng.normal(size=(4, 3))), paired_halves(2), extra_positives=np.zeros((3, 3)))

    def test_temperature_must_be_positive(self):
        with pytest.raises(ValueError):
            ContrastiveLossConfig(0.0)

    def test_single_identical_pair_has_zero_loss(self, rng):
        v = rng.normal(size=(1, 5))
        z = np.concatenate([v, v])
        assert nt_xent(Tensor(z), paired_halves(1)).item() == pytest.approx(0.0, abs=1e-6)

    @pytest.mark.parametrize("n", [2, 3, 5])
    def test_orthogonal_identical_pairs_closed_form(self, n):
        basis = np.eye(n)
        z = np.concatenate([basis, basis])
        got = nt_xent(Tensor(z), paired_halves(n), ContrastiveLossConfig(temperature=1.0)).item()
        assert got == pytest.approx(-np.log(np.e / (np.e + 2 * n - 2)), abs=1e-6)
        if n == 2:
            assert got == pytest.approx(0.5514, abs=1e-4)

    @pytest.mark.parametrize("seed", range(10))
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(8, 4))
        assert nt_xent(Tensor(z), paired_halves(4), ContrastiveLossConfig(0.1)).item() >= 0

    def test_permuting_rows_with_the_pairing(self, rng):
        z = rng.normal(size=(8, 5))
        pairing = paired_halves(4)
        perm = rng.permutation(8)
        inverse = np.argsort(perm)
        permuted_pairing = inverse[pairing[perm]]
        original = nt_xent(Tensor(z), pairing).item()
        assert nt_xent(Tensor(z[perm]), permuted_pairing).item() == pytest.approx(original, abs=1e-6)


class TestTriplet:
    def test_satisfied_triplet_has_zero_loss(self):
        a, p, n = Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])
        assert triplet_loss(a, p, n).item() == 0.0

    def test_violated_triplet(self):
        a, p, n = Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]]), Tensor([[1.0, 0.0]])
        assert triplet_loss(a, p, n).item() == pytest.approx(2.2)

    def test_mean_over_batch(self):
        a = Tensor([[1.0, 0.0], [1.0, 0.0]])
        p = Tensor([[1.0, 0.0], [0.0, 1.0]])
        n = Tensor([[0.0, 1.0], [1.0, 0.0]])
        assert triplet_loss(a, p, n, TripletLossConfig(margin=0.0)).item() == pytest.approx(1.0)

    @pytest.mark.parametrize("kind", ["squared_euclidean", "euclidean", "cosine_distance"])
    def test_distances(self, kind):
        a, b = Tensor([[3.0, 4.0]]), Tensor([[0.0, 0.0]])
        expected = {"squared_euclidean": 25.0, "euclidean": 5.0}
        if kind == "cosine_distance":
            a, b, expected[kind] = Tensor([[1.0, 0.0]]), Tensor([[0.0, 2.0]]), 1.0
        assert distance(a, b, kind).data[0] == pytest.approx(expected[kind], rel=1e-6)

    @pytest.mark.parametrize("kind", ["squared_euclidean", "euclidean", "cosine_distance"])
    def test_gradient(self, kind, rng):
        p, n = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(5, 4)))
        config = TripletLossConfig(margin=0.3, distance=kind)
        a = rng.normal(size=(5, 4))
        gaps = (distance(Tensor(a), p, kind).data - distance(Tensor(a), n, kind).data) + 0.3
        a[np.abs(gaps) < 1e-3] += 0.5
        assert grad_check(lambda t: triplet_loss(t, p, n, config), Tensor(a)) <= 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            triplet_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TripletLossConfig(margin=-0.1)
        with pytest.raises(ValueError):
            TripletLossConfig(distance="manhattan")

    @pytest.mark.parametrize(
        "d_ap, d_an, margin, expected",
        [(0.2, 0.9, 0.5, 0.0), (0.8, 0.3, 0.2, 0.7)],
    )
    def test_constructed_distances(self, d_ap, d_an, margin, expected):
        a = np.array([[1.0, 0.0, 0.0]])
        loss = triplet_loss(
            Tensor(a), Tensor(unit_at_distance(d_ap, 1)), Tensor(unit_at_distance(d_an, 2)), TripletLossConfig(margin)
        )
        assert loss.item() == pytest.approx(expected, abs=1e-5)

    def test_identical_roles_give_the_margin(self, rng):
        a = unit_rows(rng, (5, 4))
        assert triplet_loss(Tensor(a), Tensor(a), Tensor(a), TripletLossConfig(0.3)).item() == pytest.approx(0.3)

    @pytest.mark.parametrize("seed", range(5))
    def test_bounded_on_unit_vectors(self, seed):
        rng = np.random.default_rng(seed)
        a, p, n = (unit_rows(rng, (16, 3)) for _ in range(3))
        loss = triplet_loss(Tensor(a), Tensor(p), Tensor(n), TripletLossConfig(0.2)).item()
        assert 0.0 <= loss <= 0.2 + 4.0 + 1e-6

    def test_closer_positive_never_raises_the_loss(self, rng):
        for _ in range(50):
            a, p, n = (unit_rows(rng, (4, 3)) for _ in range(3))
            t = rng.uniform(0.05, 0.95)
            closer = p + t * (a - p)
            closer /= np.linalg.norm(closer, axis=1, keepdims=True)
            before = triplet_loss(Tensor(a), Tensor(p), Tensor(n)).item()
            after = triplet_loss(Tensor(a), Tensor(closer), Tensor(n)).item()
            assert after <= before + 1e-6
