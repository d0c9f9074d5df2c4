import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmstress import autodiff as ad
from mmstress import objectives
from mmstress.model import SMALL_DIMS, LateFusionModel, SharedLatent
from mmstress.objectives import (ContrastiveConfig, ProjectionHead, combined_loss, contrastive_loss,
                                 cosine_similarity, cross_entropy, similarity_matrix)
from mmstress.timeline import ModalitySchema

IDENTITY = ProjectionHead.identity()


def brute_force_contrastive(emb, z, tau):
    """Literal loop over instances i, modalities m and negatives j != i."""
    def phi(u, v):
        return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))

    n, total = len(z), 0.0
    for i in range(n):
        per_m = 0.0
        for e in emb:
            num = math.exp(phi(e[i], z[i]) / tau)
            den = 0.0
            for j in range(n):
                if j != i:
                    den += math.exp(phi(e[i], z[j]) / tau)
            per_m += -math.log(num / den)
        total += per_m / len(emb)
    return total / n


def random_batch(rng, n, m, dim=5):
    emb = [rng.normal(size=(n, dim)) for _ in range(m)]
    z = rng.normal(size=(n, dim))
    return emb, z


def cl(emb, z, tau, head=IDENTITY):
    return float(contrastive_loss([ad.constant(e) for e in emb], ad.constant(z), head, tau).value)


class TestCosine:
    def test_self_similarity(self):
        u = np.array([0.3, -2.0, 1.0])
        assert cosine_similarity(u, u, IDENTITY).value == pytest.approx(1.0, abs=1e-15)

    def test_antipodal(self):
        u = np.array([0.3, -2.0, 1.0])
        assert cosine_similarity(u, -u, IDENTITY).value == pytest.approx(-1.0, abs=1e-15)

    def test_closed_form(self):
        val = cosine_similarity(np.array([1.0, 0.0]), np.array([1.0, 1.0]), IDENTITY).value
        assert val == pytest.approx(0.7071067811865476, abs=1e-15)

    def test_zero_vector_is_guarded(self):
        val = cosine_similarity(np.zeros(3), np.ones(3), IDENTITY).value
        assert np.isfinite(val)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6))
    def test_range_with_projection_head(self, seed):
        rng = np.random.default_rng(seed)
        head = ProjectionHead(LateFusionModel((ModalitySchema("a", ("x",), 1.0, 2),), SMALL_DIMS, seed=1).params)
        s = similarity_matrix(rng.normal(size=(3, SMALL_DIMS.embed)), rng.normal(size=(4, SMALL_DIMS.embed)), head).value
        assert np.all(s <= 1.0 + 1e-12) and np.all(s >= -1.0 - 1e-12)


class TestContrastive:
    def test_singleton_batch(self):
        with pytest.raises(ValueError, match="contrastive loss undefined for singleton batch"):
            cl([np.ones((1, 3))], np.ones((1, 3)), 0.1)

    def test_two_instance_closed_form(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            emb, z = random_batch(rng, 2, 3)
            tau = 0.3
            unit = lambda v: v / np.linalg.norm(v)
            expected = np.mean([(unit(e[i]) @ unit(z[1 - i]) - unit(e[i]) @ unit(z[i])) / tau
                                for i in range(2) for e in emb])
            assert abs(cl(emb, z, tau) - expected) < 1e-12

    def test_equal_similarities(self):
        for n in (2, 3, 6):
            z = np.tile([1.0, 2.0, -1.0], (n, 1))
            assert cl([z.copy(), z.copy()], z, 0.1) == pytest.approx(math.log(n - 1), abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(123)
        for _ in range(100):
            n, m = int(rng.integers(2, 9)), int(rng.integers(1, 5))
            tau = float(rng.uniform(0.05, 2.0))
            emb, z = random_batch(rng, n, m)
            assert abs(cl(emb, z, tau) - brute_force_contrastive(emb, z, tau)) < 1e-10

    def test_small_temperature_is_stable(self):
        rng = np.random.default_rng(1)
        emb, z = random_batch(rng, 5, 2)
        assert np.isfinite(cl(emb, z, 1e-3))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.01, 100.0))
    def test_scale_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        emb, z = random_batch(rng, 4, 3)
        scaled = [e * c for e in emb]
        assert cl(scaled, z, 0.2) == pytest.approx(cl(emb, z, 0.2), abs=1e-10)

    def test_gradients_including_temperature(self):
        rng = np.random.default_rng(5)
        model = LateFusionModel((ModalitySchema("a", ("x",), 1.0, 2),), SMALL_DIMS, seed=2)
        head = ProjectionHead(model.params)
        emb = [ad.parameter(rng.normal(size=(2, SMALL_DIMS.embed))) for _ in range(2)]
        z = ad.parameter(rng.normal(size=(2, SMALL_DIMS.embed)))
        tau = ad.parameter(0.4)
        f = lambda: contrastive_loss(emb, z, head, tau)
        params = {"e0": emb[0], "e1": emb[1], "z": z, "tau": tau, **model.params.group("proj.")}
        report = ad.grad_check(f, params)
        assert report.passed, "\n".join(report.lines())


class TestCrossEntropy:
    def test_perfect(self):
        assert cross_entropy(ad.constant([[1.0, 0.0]]), [0]).value == 0.0

    def test_uniform(self):
        assert cross_entropy(ad.constant([[0.5, 0.5]]), [1]).value == pytest.approx(0.6931471805599453, abs=1e-15)

    def test_batch_mean(self):
        val = cross_entropy(ad.constant([[1.0, 0.0], [0.5, 0.5]]), [0, 0]).value
        assert val == pytest.approx(0.34657359027997264, abs=1e-15)

    def test_zero_probability_clamped_and_counted(self):
        before = objectives.clamp_events
        val = cross_entropy(ad.constant([[1.0, 0.0]]), [1]).value
        assert val == pytest.approx(-math.log(1e-12))
        assert objectives.clamp_events == before + 1

    def test_label_validation(self):
        with pytest.raises(ValueError):
            cross_entropy(ad.constant([[0.5, 0.5]]), [2])

    def test_gradient(self):
        logits = ad.parameter(np.random.default_rng(2).normal(size=(3, 2)))
        report = ad.grad_check(lambda: cross_entropy(ad.softmax_row(logits), [0, 1, 1]), {"logits": logits})
        assert report.passed


class TestCombined:
    def setup_method(self):
        rng = np.random.default_rng(8)
        emb = [ad.parameter(rng.normal(size=(3, 4))) for _ in range(2)]
        z = ad.parameter(rng.normal(size=(3, 4)))
        self.latent = SharedLatent(emb, None, None, z)
        self.logits = ad.parameter(rng.normal(size=(3, 2)))
        self.labels = [0, 1, 1]

    def probs(self):
        return ad.softmax_row(self.logits)

    def test_schemes(self):
        cfg = ContrastiveConfig(temperature=0.2, lambda_reg=0.35)
        sup, p1 = combined_loss(self.latent, self.probs(), self.labels, cfg, "supervised", IDENTITY)
        con, p2 = combined_loss(self.latent, self.probs(), self.labels, cfg, "contrastive-only", IDENTITY)
        reg, p3 = combined_loss(self.latent, self.probs(), self.labels, cfg, "regularized", IDENTITY)
        assert set(p1) == {"cross_entropy"} and set(p2) == {"contrastive"}
        assert abs(float(reg.value) - (float(sup.value) + 0.35 * float(con.value))) < 1e-12
        assert p3 == {"cross_entropy": float(sup.value), "contrastive": float(con.value)}

    def test_zero_lambda_equals_supervised(self):
        cfg = ContrastiveConfig(lambda_reg=0.0)
        sup, _ = combined_loss(self.latent, self.probs(), self.labels, cfg, "supervised", IDENTITY)
        reg, _ = combined_loss(self.latent, self.probs(), self.labels, cfg, "regularized", IDENTITY)
        assert float(reg.value) == float(sup.value)

    def test_contrastive_only_identical_latents(self):
        z = ad.constant(np.tile([0.5, -1.0, 2.0, 0.1], (2, 1)))
        latent = SharedLatent([z, z], None, None, z)
        val, _ = combined_loss(latent, None, [0, 1], ContrastiveConfig(), "contrastive-only", IDENTITY)
        assert abs(float(val.value)) < 1e-12

    def test_gradients_of_all_schemes(self):
        cfg = ContrastiveConfig(temperature=0.5, lambda_reg=0.7)
        params = {"e0": self.latent.embeddings[0], "e1": self.latent.embeddings[1], "z": self.latent.z,
                  "logits": self.logits}
        for scheme in objectives.LOSS_SCHEMES:
            f = lambda: combined_loss(self.latent, self.probs(), self.labels, cfg, scheme, IDENTITY)[0]
            report = ad.grad_check(f, params)
            assert report.passed, (scheme, report.lines())

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            combined_loss(self.latent, self.probs(), self.labels, ContrastiveConfig(), "bogus", IDENTITY)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ContrastiveConfig(temperature=0.0)
        with pytest.raises(ValueError):
            ContrastiveConfig(lambda_reg=-1.0)
