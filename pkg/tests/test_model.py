import math

import pytest
import torch
from torch import nn

from sodawidenet import ModelConfig, build_model, full_head_set, init_weights, parameter_count
from sodawidenet.config import ConfigurationError
from sodawidenet.model import HeadId, SODAWideNetPP, head_set_for_ablation


class TestHeadContract:
    def test_fourteen_heads_with_expected_membership(self, toy_model):
        heads = set(toy_model.head_ids)
        assert len(heads) == 14
        sal = {h for h in heads if h.kind == "saliency"}
        con = {h for h in heads if h.kind == "contour"}
        assert len(sal) == 10 and len(con) == 4
        assert {h.site for h in con} == {"MRFFAM", "CFMD"}
        assert {h.site for h in sal} == {"AGLRFE", "ALPM", "CFM", "MRFFAM", "CFMD"}

    def test_head_resolutions_divide_input(self, toy_model):
        toy_model.eval()
        x = torch.rand(1, 3, 16, 16)
        out = toy_model(x)
        assert set(out) == set(full_head_set())
        for h, t in out.items():
            assert t.shape[0] == 1 and t.shape[1] == 1
            assert 16 % t.shape[-1] == 0 and 16 % t.shape[-2] == 0
            up = torch.nn.functional.interpolate(
                t, size=(16, 16), mode="bilinear", align_corners=False)
            assert up.shape[-2:] == (16, 16)

    def test_encoder_decoder_scale_algebra(self, toy_model):
        toy_model.eval()
        out = toy_model(torch.rand(1, 3, 16, 16))
        assert out[HeadId("CFM", 1, "saliency")].shape[-2:] == (8, 8)
        assert out[HeadId("CFM", 2, "saliency")].shape[-2:] == (4, 4)
        assert out[HeadId("CFMD", 1, "saliency")].shape[-2:] == (8, 8)
        assert out[HeadId("CFMD", 2, "saliency")].shape[-2:] == (16, 16)

    def test_batch_entries_independent_in_eval(self, toy_model):
        toy_model.eval()
        img = torch.rand(1, 3, 16, 16)
        out = toy_model(img.expand(2, -1, -1, -1))
        for t in out.values():
            assert torch.equal(t[0], t[1])

    def test_final_prediction_is_sigmoid_of_last_head(self, toy_model):
        toy_model.eval()
        x = torch.rand(1, 3, 16, 16)
        prob = toy_model.predict_saliency(x)
        logits = toy_model(x)[HeadId("CFMD", 2, "saliency")]
        assert torch.allclose(prob, torch.sigmoid(logits))
        assert prob.min() > 0 and prob.max() < 1


class TestInputValidation:
    def test_wrong_channel_count(self, toy_model):
        with pytest.raises(ValueError, match="3, H, W"):
            toy_model(torch.rand(1, 1, 16, 16))

    def test_nonfinite_input(self, toy_model):
        x = torch.rand(1, 3, 16, 16)
        x[0, 0, 0, 0] = float("nan")
        with pytest.raises(ValueError, match="non-finite"):
            toy_model(x)

    def test_indivisible_spatial_size(self, toy_model):
        with pytest.raises(ValueError, match="divisible by 8"):
            toy_model(torch.rand(1, 3, 20, 20))


class TestInitWeights:
    def test_fan_in_std(self):
        conv = nn.Conv2d(64, 48, 3, padding=1)
        init_weights(conv, seed=5)
        target = math.sqrt(2.0 / (64 * 9))
        sample_std = conv.weight.detach().std().item()
        assert conv.weight.numel() >= 10_000
        assert abs(sample_std - target) / target < 0.05

    def test_biases_zero_and_norms_identity(self, toy_model):
        for m in toy_model.modules():
            if isinstance(m, nn.Conv2d) and m.bias is not None:
                assert torch.all(m.bias.detach() == 0)
            if isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)):
                assert torch.all(m.weight.detach() == 1)
                assert torch.all(m.bias.detach() == 0)

    def test_same_seed_bit_identical(self, toy_config):
        a = build_model(toy_config, seed=11)
        b = build_model(toy_config, seed=11)
        for (ka, ta), (kb, tb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb
            assert torch.equal(ta, tb)


class TestParameterCount:
    def test_count_independent_of_input_size(self, toy_config):
        import dataclasses
        n16 = parameter_count(SODAWideNetPP(toy_config))
        n384 = parameter_count(
            SODAWideNetPP(dataclasses.replace(toy_config, input_size=(384, 384))))
        assert n16 == n384


class TestNoNanAcrossSeeds:
    def test_hundred_seeds_all_heads_finite(self, toy_config):
        model = build_model(toy_config, seed=0)
        model.eval()
        with torch.no_grad():
            for seed in range(100):
                torch.manual_seed(seed)
                out = model(torch.rand(1, 3, 16, 16))
                for h, t in out.items():
                    assert torch.isfinite(t).all(), f"non-finite at {h.key} seed {seed}"


class TestAblation:
    def test_head_membership_per_flag(self):
        assert len(head_set_for_ablation(frozenset())) == 14
        assert len(head_set_for_ablation(frozenset({"no_aglrfe"}))) == 12
        assert len(head_set_for_ablation(frozenset({"no_alpm"}))) == 12
        assert len(head_set_for_ablation(frozenset({"no_cfm"}))) == 12
        # MRFFAM carries saliency and contour heads at both stages
        assert len(head_set_for_ablation(frozenset({"no_mrffam"}))) == 10
        assert len(head_set_for_ablation(frozenset({"fg_only"}))) == 14

    @pytest.mark.parametrize("flag", ["no_aglrfe", "no_alpm", "no_cfm", "no_mrffam", "fg_only"])
    def test_standins_preserve_downstream_shapes(self, toy_config, flag):
        reference = build_model(toy_config, seed=0)
        ablated = build_model(toy_config, ablation={flag}, seed=0)
        reference.eval(), ablated.eval()
        x = torch.rand(1, 3, 16, 16)
        ref_out, abl_out = reference(x), ablated(x)
        assert set(abl_out) == set(head_set_for_ablation(frozenset({flag})))
        for h in abl_out:
            assert abl_out[h].shape == ref_out[h].shape

    def test_unknown_flag_rejected(self, toy_config):
        with pytest.raises(ConfigurationError, match="no_everything"):
            SODAWideNetPP(toy_config, ablation={"no_everything"})


class TestConfigValidation:
    def test_dilations_must_increase(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(variant="x", stem_channels=4, stage_channels=(8, 8),
                        aglrfe_dilations=(6, 6, 10))

    def test_stage_width_divisibility(self):
        with pytest.raises(ConfigurationError, match="divisible"):
            ModelConfig(variant="x", stem_channels=4, stage_channels=(10, 8))

    def test_pool_stride_domain(self):
        with pytest.raises(ConfigurationError, match="attn_pool_stride"):
            ModelConfig(variant="x", stem_channels=4, stage_channels=(8, 8),
                        attn_pool_stride=3)

    def test_config_diff_lists_fields(self, toy_config):
        import dataclasses
        other = dataclasses.replace(toy_config, stem_channels=8, attn_dk=4)
        assert toy_config.diff(other) == ["attn_dk", "stem_channels"]

    def test_json_roundtrip(self, toy_config):
        assert ModelConfig.from_json(toy_config.to_json()) == toy_config
