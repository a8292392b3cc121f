"""Architecture construction, splitting, stats, and checkpoint round-trips."""

import numpy as np
import pytest

from splitfed.errors import CutOutOfRange, Truncated, UnknownArchitecture
from splitfed.models import (
    CHECKPOINT_HEADER,
    assemble_full,
    build_architecture,
    default_cut,
    init_params,
    load_checkpoint,
    model_stats,
    save_checkpoint,
    split_at,
)
from splitfed.nn import layer_forward, params_allclose


def forward_all(layers, params, x):
    h = x
    for layer in layers:
        h = layer_forward(layer, h, params)
    return h


class TestArchitectures:
    def test_lenet_small_parameter_count(self):
        # per-layer formula count, cross-checked by hand:
        # conv1 5*5*1*6+6, conv2 5*5*6*16+16, fc 400*120+120, 120*84+84, 84*10+10
        arch = build_architecture("lenet_small", (32, 32, 1), 10)
        expected = (5 * 5 * 1 * 6 + 6) + (5 * 5 * 6 * 16 + 16) + (400 * 120 + 120) + (
            120 * 84 + 84
        ) + (84 * 10 + 10)
        assert expected == 61706
        assert arch.param_count() == expected

    def test_mlp2_parameter_count(self):
        arch = build_architecture("mlp2", (64,), 10)
        assert arch.param_count() == (64 * 128 + 128) + (128 * 10 + 10) == 9610

    def test_unknown_architecture(self):
        with pytest.raises(UnknownArchitecture):
            build_architecture("resnet18")

    def test_chain_shapes_validate(self):
        arch = build_architecture("lenet_small")
        shapes = arch.layer_shapes()
        assert shapes[0][0] == (32, 32, 1)
        assert shapes[-1][1] == (10,)


class TestSplitModel:
    def test_paper_cut_smashed_size(self):
        arch = build_architecture("lenet_small", (32, 32, 1), 10)
        model = split_at(arch, default_cut("lenet_small"), seed=0)
        stats = model_stats(model)
        assert stats.smashed_size == 6 * 14 * 14 == 1176
        assert stats.total_params == 61706

    def test_mlp2_cut_stats(self):
        arch = build_architecture("mlp2", (64,), 10)
        model = split_at(arch, 1, seed=0)
        stats = model_stats(model)
        assert stats.smashed_size == 128
        assert stats.client_fraction == pytest.approx((64 * 128 + 128) / 9610)

    def test_cut_bounds(self):
        arch = build_architecture("mlp2", (64,), 10)
        with pytest.raises(CutOutOfRange):
            split_at(arch, 0, seed=0)
        with pytest.raises(CutOutOfRange):
            split_at(arch, len(arch.layers), seed=0)

    def test_server_holds_one_layer_at_max_cut(self):
        arch = build_architecture("mlp2", (64,), 10)
        model = split_at(arch, len(arch.layers) - 1, seed=0)
        assert len(model.server_layers) == 1

    def test_param_partition_is_exact(self):
        arch = build_architecture("lenet_small")
        for cut in (1, 3, 6, 11):
            model = split_at(arch, cut, seed=4)
            total = model.client_params.element_count() + model.server_params.element_count()
            assert total == arch.param_count()
            together = {n for n, _ in model.client_params.entries} | {
                n for n, _ in model.server_params.entries
            }
            assert len(together) == len(model.client_params.entries) + len(
                model.server_params.entries
            )

    def test_composition_identity(self):
        # full forward equals client-then-server forward, bit for bit
        rng = np.random.Generator(np.random.PCG64(2))
        arch = build_architecture("lenet_small", (32, 32, 1), 10)
        model = split_at(arch, 3, seed=9)
        full = assemble_full(arch, model.client_params, model.server_params)
        x = rng.uniform(0, 1, size=(4, 32, 32, 1))
        direct = forward_all(arch.layers, full, x)
        smashed = forward_all(model.client_layers, model.client_params, x)
        composed = forward_all(model.server_layers, model.server_params, smashed)
        assert np.array_equal(direct, composed)

    def test_same_seed_bit_identical_init(self):
        arch = build_architecture("mlp2", (16,), 4)
        a = split_at(arch, 1, seed=77)
        b = split_at(arch, 1, seed=77)
        assert params_allclose(a.client_params, b.client_params, 0.0)
        assert params_allclose(a.server_params, b.server_params, 0.0)
        # the same full-network draw regardless of cut position
        c = split_at(arch, 2, seed=77)
        full_b = assemble_full(arch, b.client_params, b.server_params)
        full_c = assemble_full(arch, c.client_params, c.server_params)
        assert params_allclose(full_b, full_c, 0.0)

    def test_gaussian_init_selectable(self):
        arch = build_architecture("mlp2", (16,), 4)
        xavier = init_params(arch, 5, "xavier")
        gauss = init_params(arch, 5, "gaussian")
        assert not params_allclose(xavier, gauss, 0.0)
        weights = gauss.get("fc1.weight")
        assert abs(weights.std() - 0.01) < 0.002


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        arch = build_architecture("mlp2", (8,), 3)
        params = init_params(arch, 123)
        path = tmp_path / "model.ckpt"
        save_checkpoint(str(path), params)
        loaded = load_checkpoint(str(path))
        assert params_allclose(params, loaded, 0.0)

    def test_header_bytes(self, tmp_path):
        arch = build_architecture("mlp2", (8,), 3)
        path = tmp_path / "model.ckpt"
        save_checkpoint(str(path), init_params(arch, 1))
        raw = path.read_bytes()
        assert raw.startswith(b"SPLITFED-CKPT v1\n")
        assert CHECKPOINT_HEADER == b"SPLITFED-CKPT v1\n"

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOT-A-CKPT\n")
        with pytest.raises(Truncated):
            load_checkpoint(str(path))

    def test_truncated_record_rejected(self, tmp_path):
        arch = build_architecture("mlp2", (8,), 3)
        path = tmp_path / "model.ckpt"
        save_checkpoint(str(path), init_params(arch, 1))
        raw = path.read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(raw[:-5])
        with pytest.raises(Truncated):
            load_checkpoint(str(tmp_path / "cut.ckpt"))
