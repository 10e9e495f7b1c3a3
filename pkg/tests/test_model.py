"""Backbone wiring, margin head semantics, placement, parameter accounting."""

import numpy as np
import pytest

from occludrop.backbone import (
    Insertion,
    MarginHead,
    StagedBackbone,
    margin_loss,
    place_lcd,
)
from occludrop.errors import ConfigError, ContractError, DimensionError
from occludrop.lcd import GammaPolicy
from occludrop.sam import SamParams
from occludrop.tensor import Tensor

from oracles import plain_cosine_softmax_ce


def small_backbone(seed=0, insertion=None, image_size=32):
    rng = np.random.default_rng(seed)
    model = StagedBackbone(rng, image_size=image_size, width_base=4, embedding_dim=16)
    if insertion == "lcd":
        model.insertion = Insertion(stage=3, lcd=GammaPolicy(1, 2))
    elif insertion == "sam":
        model.insertion = Insertion(
            stage=3,
            sam=SamParams.create(
                model.stage_channels(3), model.stage_spatial(3), model.stage_spatial(3), rng
            ),
        )
    elif insertion == "lcd+sam":
        model.insertion = Insertion(
            stage=3,
            lcd=GammaPolicy(1, 2),
            sam=SamParams.create(
                model.stage_channels(3), model.stage_spatial(3), model.stage_spatial(3), rng
            ),
        )
    return model


class TestBackbone:
    def test_eval_forward_deterministic(self):
        model = small_backbone()
        x = np.random.default_rng(1).random((3, 1, 32, 32))
        a, _ = model.forward(Tensor(x), training=False)
        b, _ = model.forward(Tensor(x), training=False)
        assert a.data.tobytes() == b.data.tobytes()

    def test_embedding_shape(self):
        for insertion in (None, "lcd", "sam", "lcd+sam"):
            model = small_backbone(insertion=insertion)
            x = np.random.default_rng(2).random((2, 1, 32, 32))
            emb, _ = model.forward(Tensor(x), training=True, rng=np.random.default_rng(0))
            assert emb.shape == (2, 16)

    def test_gamma_zero_equals_sam_only(self):
        x = np.random.default_rng(3).random((2, 1, 32, 32))
        lcd_model = small_backbone(seed=5, insertion="lcd+sam")
        lcd_model.insertion = Insertion(
            stage=3, lcd=GammaPolicy(0, 0), sam=lcd_model.insertion.sam
        )
        sam_model = small_backbone(seed=5, insertion="sam")
        a, _ = lcd_model.forward(Tensor(x), training=True, rng=np.random.default_rng(0))
        b, _ = sam_model.forward(Tensor(x), training=True, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(a.data, b.data)

    def test_disabled_insertion_matches_baseline_bit_exact(self):
        x = np.random.default_rng(4).random((2, 1, 32, 32))
        baseline = small_backbone(seed=6)
        wired = small_backbone(seed=6)
        wired.insertion = Insertion(stage=3)  # nothing enabled inside
        a, _ = baseline.forward(Tensor(x), training=True)
        b, _ = wired.forward(Tensor(x), training=True)
        assert a.data.tobytes() == b.data.tobytes()

    def test_bad_input_size(self):
        model = small_backbone()
        with pytest.raises(DimensionError):
            model.forward(Tensor(np.zeros((1, 1, 30, 30))), training=False)

    def test_trace_taps_regularized_layer(self):
        model = small_backbone(insertion="lcd")
        x = np.random.default_rng(5).random((2, 1, 32, 32))
        _, trace = model.forward(Tensor(x), training=True, rng=np.random.default_rng(0))
        c3 = model.stage_channels(3)
        s3 = model.stage_spatial(3)
        assert trace.responses.shape == (2, c3, s3, s3)
        assert trace.drop_mask is not None

    def test_forced_mask_applies_at_stage3(self):
        model = small_backbone()  # no insertion: transient hook
        x = np.random.default_rng(6).random((2, 1, 32, 32))
        c3 = model.stage_channels(3)
        forced = np.ones((2, c3))
        emb_ones, _ = model.forward(Tensor(x), training=False, forced_mask=forced)
        emb_plain, _ = model.forward(Tensor(x), training=False)
        np.testing.assert_array_equal(emb_ones.data, emb_plain.data)
        forced[:, 0] = 0.0
        emb_drop, _ = model.forward(Tensor(x), training=False, forced_mask=forced)
        assert not np.array_equal(emb_drop.data, emb_plain.data)

    def test_masked_bn_order_runs_and_taps_conv(self):
        model = small_backbone(seed=7)
        model.insertion = Insertion(stage=3, lcd=GammaPolicy(1, 2), order="lcd_then_maskedbn")
        x = np.random.default_rng(7).random((3, 1, 32, 32))
        emb, trace = model.forward(Tensor(x), training=True, rng=np.random.default_rng(1))
        assert np.all(np.isfinite(emb.data))
        # dropped channels of the normalized feature stay zero via the mask
        assert trace.drop_mask is not None

    def test_lcd_requires_rng_in_training(self):
        model = small_backbone(insertion="lcd")
        with pytest.raises(ContractError):
            model.forward(Tensor(np.zeros((1, 1, 32, 32))), training=True)


class TestPlacement:
    def test_place_lcd_default_stage3(self):
        model = small_backbone()
        place_lcd(model, 3)
        assert model.insertion.stage == 3
        assert model.insertion.lcd is not None

    def test_unknown_stage(self):
        with pytest.raises(ConfigError):
            place_lcd(small_backbone(), 7)

    def test_moving_sam_needs_rng(self):
        model = small_backbone(insertion="lcd+sam")
        with pytest.raises(ContractError):
            place_lcd(model, 2)
        place_lcd(model, 2, rng=np.random.default_rng(0))
        assert model.insertion.stage == 2
        assert model.insertion.sam.channels == model.stage_channels(2)


class TestParameterAccounting:
    def test_sam_is_the_only_extra(self):
        baseline = small_backbone(seed=8)
        lcd_only = small_backbone(seed=8, insertion="lcd")
        full = small_backbone(seed=8, insertion="lcd+sam")
        assert lcd_only.parameter_count() == baseline.parameter_count()
        sam_params = sum(t.size for t in full.insertion.sam.parameters().values())
        assert full.parameter_count() == baseline.parameter_count() + sam_params


class TestMarginLoss:
    @pytest.mark.parametrize("seed", range(5))
    def test_margin_free_reduction(self, seed):
        rng = np.random.default_rng(seed)
        emb = Tensor(rng.standard_normal((6, 8)))
        head = MarginHead(
            class_weights=Tensor(rng.standard_normal((5, 8))), margin=0.0, scale=1.0
        )
        labels = rng.integers(0, 5, size=6)
        got = margin_loss(emb, labels, head).item()
        want = plain_cosine_softmax_ce(emb.data, head.class_weights.data, labels)
        assert abs(got - want) <= 1e-10

    def test_margin_raises_true_class_difficulty(self):
        rng = np.random.default_rng(1)
        emb = Tensor(rng.standard_normal((6, 8)))
        cw = Tensor(rng.standard_normal((5, 8)))
        labels = rng.integers(0, 5, size=6)
        plain = margin_loss(emb, labels, MarginHead(class_weights=cw, margin=0.0, scale=8.0))
        margined = margin_loss(emb, labels, MarginHead(class_weights=cw, margin=0.5, scale=8.0))
        assert margined.item() > plain.item()

    def test_paper_setting_loss_finite_and_positive(self):
        rng = np.random.default_rng(2)
        emb = Tensor(rng.standard_normal((8, 16)))
        head = MarginHead(class_weights=Tensor(rng.standard_normal((10, 16))))
        assert head.margin == 0.5 and head.scale == 64.0
        loss = margin_loss(emb, rng.integers(0, 10, size=8), head)
        assert np.isfinite(loss.item()) and loss.item() > 0

    def test_clamp_counter(self):
        emb = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        cw = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        head = MarginHead(class_weights=cw, margin=0.5, scale=64.0)
        margin_loss(emb, np.array([0, 1]), head)
        assert head.clamp_count >= 2  # exact self-matches exceed the cosine limit

    def test_label_out_of_range(self):
        emb = Tensor(np.zeros((2, 4)))
        head = MarginHead(class_weights=Tensor(np.ones((3, 4))))
        with pytest.raises(ContractError):
            margin_loss(emb, np.array([0, 5]), head)

    def test_dim_mismatch(self):
        emb = Tensor(np.zeros((2, 4)))
        head = MarginHead(class_weights=Tensor(np.ones((3, 6))))
        with pytest.raises(DimensionError):
            margin_loss(emb, np.array([0, 1]), head)
