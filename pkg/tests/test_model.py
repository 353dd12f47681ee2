import json

import pytest
import torch

from mixdet.model import (
    DecoderVariant,
    Detector,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
    variant_config,
)

from .conftest import tiny_model_config


def tiny_detector(seed=0, **overrides) -> Detector:
    torch.manual_seed(seed)
    return Detector(tiny_model_config(**overrides))


class TestConfig:
    def test_variant_letters(self):
        assert DecoderVariant.from_letter("a") == DecoderVariant("sa_ca_ffn", "layer_output")
        assert DecoderVariant.from_letter("b") == DecoderVariant("ca_sa_ffn", "layer_output")
        assert DecoderVariant.from_letter("c") == DecoderVariant("ca_sa_ffn", "internal")
        assert DecoderVariant.from_letter("d") == DecoderVariant("sa_ca_ffn", "internal")
        assert DecoderVariant.from_letter("c").letter == "c"
        with pytest.raises(ValueError):
            DecoderVariant.from_letter("e")

    def test_invalid_fields(self):
        with pytest.raises(ValueError):
            ModelConfig(embed_dim=30, num_heads=4)
        with pytest.raises(ValueError):
            DecoderVariant(order="ffn_first", tap="internal")
        with pytest.raises(ValueError):
            ModelConfig(image_size=60)

    def test_dict_round_trip(self):
        cfg = tiny_model_config(variant=DecoderVariant.from_letter("d"))
        assert ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestEncode:
    def test_sequence_length(self):
        model = tiny_detector()
        memory, pos = model.encode(torch.rand(2, 3, 32, 32))
        assert memory.shape == (2, 16, 32)  # (32 / 8)^2 tokens
        assert pos.shape == (16, 32)

    def test_deterministic(self):
        model = tiny_detector()
        images = torch.rand(1, 3, 32, 32)
        a, _ = model.encode(images)
        b, _ = model.encode(images)
        assert torch.equal(a, b)

    def test_zero_image_finite(self):
        model = tiny_detector()
        memory, _ = model.encode(torch.zeros(1, 3, 32, 32))
        assert bool(torch.isfinite(memory).all())

    def test_dimension_mismatch(self):
        model = tiny_detector()
        with pytest.raises(ValueError):
            model.encode(torch.rand(1, 3, 64, 64))
        with pytest.raises(ValueError):
            model.encode(torch.rand(1, 1, 32, 32))


class TestDecodeShapes:
    @pytest.mark.parametrize("letter", ["a", "b", "c", "d"])
    def test_prediction_shapes(self, letter):
        model = tiny_detector(variant=DecoderVariant.from_letter(letter))
        preds = model(torch.rand(2, 3, 32, 32))
        assert preds.o2o_logits.shape == (2, 2, 8, 3)
        assert preds.o2o_boxes.shape == (2, 2, 8, 4)
        assert preds.o2m_logits.shape == (2, 2, 8, 3)
        assert preds.o2m_boxes.shape == (2, 2, 8, 4)

    def test_boxes_are_sigmoid_bounded(self):
        model = tiny_detector()
        with torch.no_grad():
            preds = model(torch.rand(2, 3, 32, 32))
        for tensor in (preds.o2o_boxes, preds.o2m_boxes):
            assert float(tensor.min()) > 0.0
            assert float(tensor.max()) < 1.0

    def test_shared_head_layer_output_is_bitwise_equal(self):
        model = tiny_detector(
            variant=DecoderVariant.from_letter("b"), share_cls_head=True, share_box_head=True
        )
        preds = model(torch.rand(1, 3, 32, 32))
        assert torch.equal(preds.o2m_logits, preds.o2o_logits)
        assert torch.equal(preds.o2m_boxes, preds.o2o_boxes)

    def test_scene_and_layer_slicing(self):
        model = tiny_detector()
        preds = model(torch.rand(3, 3, 32, 32))
        scene = preds.scene(1)
        assert scene.o2o_logits.shape == (2, 8, 3)
        layer = scene.layer_slice(0)
        assert layer.o2m_boxes.shape == (8, 4)


def perturb(module: torch.nn.Module) -> None:
    with torch.no_grad():
        for parameter in module.parameters():
            parameter.add_(torch.randn_like(parameter))


class TestTapSemantics:
    """Perturbation probes: the tap must ignore blocks that run after it."""

    def run_tap(self, model, images):
        preds = model(images)
        return preds.o2m_logits.detach().clone(), preds.o2m_boxes.detach().clone()

    @pytest.mark.parametrize(
        "letter,insensitive,sensitive",
        [
            ("c", "self_attn", "cross_attn"),  # CA -> tap -> SA
            ("d", "cross_attn", "self_attn"),  # SA -> tap -> CA
        ],
    )
    def test_internal_tap_ignores_unapplied_attention(self, letter, insensitive, sensitive):
        torch.manual_seed(3)
        images = torch.rand(1, 3, 32, 32)
        model = tiny_detector(
            seed=1, num_decoder_layers=1, variant=DecoderVariant.from_letter(letter)
        )
        before = self.run_tap(model, images)
        perturb(getattr(model.decoder_layers[0], insensitive))
        after = self.run_tap(model, images)
        assert torch.equal(before[0], after[0])
        assert torch.equal(before[1], after[1])
        perturb(getattr(model.decoder_layers[0], sensitive))
        changed = self.run_tap(model, images)
        assert not torch.equal(after[0], changed[0])

    @pytest.mark.parametrize("letter", ["a", "b"])
    def test_layer_output_tap_sees_both_attentions(self, letter):
        torch.manual_seed(3)
        images = torch.rand(1, 3, 32, 32)
        model = tiny_detector(
            seed=1, num_decoder_layers=1, variant=DecoderVariant.from_letter(letter)
        )
        before = self.run_tap(model, images)
        perturb(model.decoder_layers[0].self_attn)
        after_sa = self.run_tap(model, images)
        assert not torch.equal(before[0], after_sa[0])
        perturb(model.decoder_layers[0].cross_attn)
        after_ca = self.run_tap(model, images)
        assert not torch.equal(after_sa[0], after_ca[0])


class TestPredict:
    def test_candidate_count_and_range(self):
        model = tiny_detector()
        with torch.no_grad():
            detections = model.predict(torch.rand(2, 3, 32, 32))
        assert detections.scores.shape == (2, 8, 3)
        assert detections.boxes.shape == (2, 8, 4)
        assert float(detections.scores.min()) > 0.0
        assert float(detections.scores.max()) < 1.0

    def test_o2m_heads_do_not_affect_predict(self):
        model = tiny_detector(share_cls_head=False, share_box_head=False)
        images = torch.rand(2, 3, 32, 32)
        with torch.no_grad():
            before = model.predict(images)
        for parameter in model.o2m_only_parameters():
            perturb_source = torch.randn_like(parameter)
            with torch.no_grad():
                parameter.copy_(perturb_source)
        with torch.no_grad():
            after = model.predict(images)
        assert torch.equal(before.scores, after.scores)
        assert torch.equal(before.boxes, after.boxes)

    @pytest.mark.parametrize("letter", ["a", "c"])
    def test_gradient_isolation(self, letter):
        model = tiny_detector(
            share_cls_head=False, share_box_head=False, variant=DecoderVariant.from_letter(letter)
        )
        o2m_params = model.o2m_only_parameters()
        assert o2m_params, "unshared config must expose o2m-only parameters"
        detections = model.predict(torch.rand(1, 3, 32, 32))
        objective = detections.scores.sum() + detections.boxes.sum()
        grads = torch.autograd.grad(objective, o2m_params, allow_unused=True)
        assert all(g is None or not g.abs().any() for g in grads)

    def test_fully_shared_model_has_no_o2m_only_parameters(self):
        for letter in "bc":
            model = tiny_detector(variant=DecoderVariant.from_letter(letter))
            assert model.o2m_only_parameters() == []
        unshared = tiny_detector(share_cls_head=False, share_box_head=False)
        assert len(unshared.o2m_only_parameters()) > 0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = tiny_detector(seed=5)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(model, path)
        restored = load_checkpoint(path)
        assert restored.config == model.config
        images = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            a = model.predict(images)
            b = restored.predict(images)
        assert torch.equal(a.scores, b.scores)
        assert torch.equal(a.boxes, b.boxes)

    def test_config_mismatch_rejected(self, tmp_path):
        model = tiny_detector()
        path = tmp_path / "ckpt.pt"
        save_checkpoint(model, path)
        other = tiny_model_config(num_queries=9)
        with pytest.raises(ValueError, match="does not match"):
            load_checkpoint(path, expected_config=other)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.pt"
        torch.save({"something": 1}, path)
        with pytest.raises(ValueError, match="not a recognized checkpoint"):
            load_checkpoint(path)

    def test_variant_config_helper(self):
        cfg = tiny_model_config()
        assert variant_config(cfg, "d").variant == DecoderVariant.from_letter("d")
