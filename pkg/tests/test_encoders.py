import numpy as np
import pytest

import advdiffusion as adv
from advdiffusion import tensor as T
from advdiffusion.encoders import (ARCHITECTURES, MEMBER_ARCHS, VICTIM_ARCH,
                                   EncoderConfigError)


def image(seed=0, size=16):
    return np.random.default_rng(seed).uniform(0, 1, (3, size, size)).astype(np.float32)


class TestEncoder:
    def test_embedding_is_unit_norm(self):
        for arch in ARCHITECTURES:
            enc = adv.Encoder(arch, seed=5)
            e = enc.embed_array(image(1))
            assert np.linalg.norm(e) == pytest.approx(1.0, abs=1e-5)
            assert e.shape == (64,)

    def test_embedding_deterministic(self):
        enc = adv.Encoder("tiny_b", seed=9)
        assert np.array_equal(enc.embed_array(image(2)), enc.embed_array(image(2)))

    def test_different_seeds_disagree(self):
        x = image(3)
        e1 = adv.Encoder("tiny_a", seed=1).embed_array(x)
        e2 = adv.Encoder("tiny_a", seed=2).embed_array(x)
        assert adv.cosine(e1, e2) < 1.0 - 1e-3

    def test_works_on_8x8_and_32x32(self):
        enc = adv.Encoder("tiny_d", seed=4)
        assert enc.embed_array(image(5, 8)).shape == (64,)
        assert enc.embed_array(image(5, 32)).shape == (64,)

    def test_rejects_bad_input_shape(self):
        enc = adv.Encoder("tiny_a", seed=1)
        with pytest.raises(T.ShapeError):
            enc.embed(T.Tensor(np.zeros((1, 16, 16), dtype=np.float32)))

    def test_unknown_architecture(self):
        with pytest.raises(EncoderConfigError):
            adv.Encoder("resnet50", seed=0)

    def test_scale_sensitivity_bounded(self, dataset16, ensemble):
        x = dataset16.images[0]
        base = ensemble.victim.embed_array(x)
        for c in (0.9, 1.1):
            scaled = ensemble.victim.embed_array(np.clip(x * c, 0, 1))
            assert adv.cosine(base, scaled) > 0.9


class TestCosine:
    def test_self(self):
        e = np.random.default_rng(0).standard_normal(8)
        assert adv.cosine(e, e) == pytest.approx(1.0)

    def test_negation(self):
        e = np.random.default_rng(1).standard_normal(8)
        assert adv.cosine(e, -e) == pytest.approx(-1.0)

    def test_orthogonal_basis(self):
        a = np.zeros(4)
        b = np.zeros(4)
        a[0] = 1.0
        b[2] = 1.0
        assert adv.cosine(a, b) == 0.0

    def test_zero_norm_rejected(self):
        with pytest.raises(T.NonFiniteError):
            adv.cosine(np.zeros(4), np.ones(4))

    def test_dimension_mismatch(self):
        with pytest.raises(T.ShapeError):
            adv.cosine(np.ones(3), np.ones(4))


class TestEnsemble:
    def test_reproducible_build(self):
        e1 = adv.build_ensemble()
        e2 = adv.build_ensemble()
        for m1, m2 in zip(e1.members, e2.members):
            for k in m1.params:
                assert np.array_equal(m1.params[k], m2.params[k])

    def test_default_member_count_is_four(self, ensemble):
        assert ensemble.n_members == 4
        assert {m.arch for m in ensemble.members} == set(MEMBER_ARCHS)

    def test_victim_layout_and_seed_distinct(self, ensemble):
        assert ensemble.victim.arch == VICTIM_ARCH
        for m in ensemble.members:
            assert m.arch != ensemble.victim.arch
            assert m.seed != ensemble.victim.seed

    def test_duplicate_seeds_rejected(self):
        with pytest.raises(EncoderConfigError):
            adv.build_ensemble(seeds=[1, 1, 2, 3])
        with pytest.raises(EncoderConfigError):
            adv.build_ensemble(seeds=[1, 2, 3, 4], victim_seed=2)

    def test_victim_overlap_rejected(self):
        members = [adv.Encoder("tiny_a", 1), adv.Encoder("tiny_b", 2)]
        with pytest.raises(EncoderConfigError):
            adv.EncoderEnsemble(members, adv.Encoder("tiny_a", 3))
        with pytest.raises(EncoderConfigError):
            adv.EncoderEnsemble(members, adv.Encoder("tiny_v", 2))

    def test_victim_embeds_are_untraced(self, ensemble):
        out = ensemble.victim_embed(image(7))
        assert isinstance(out, np.ndarray)

    def test_attack_gradients_never_touch_victim(self, ensemble):
        # members and victim share no parameter arrays; tracing an attack
        # objective therefore cannot reach victim weights
        member_arrays = {id(a) for m in ensemble.members for a in m.params.values()}
        victim_arrays = {id(a) for a in ensemble.victim.params.values()}
        assert not member_arrays & victim_arrays


def test_weight_save_load_round_trip(tmp_path):
    enc = adv.Encoder("tiny_c", seed=31)
    adv.save_encoder(enc, tmp_path / "enc")
    loaded = adv.load_encoder(tmp_path / "enc")
    x = image(8)
    assert np.array_equal(enc.embed_array(x).astype(np.float32),
                          loaded.embed_array(x).astype(np.float32))
