import struct

import numpy as np
import pytest

from vigunet import (
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ModelConfig,
    ShapeError,
    Tensor,
    VigUnet,
    build_vig_unet,
    load_checkpoint,
    parameter_table,
    save_checkpoint,
)


def tiny_config(**kw):
    base = dict(image_h=64, image_w=64, dims=(4, 8, 16, 32, 64),
                k=3, heads=1, ffn_ratio=2)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=7, **kw):
    return build_vig_unet(tiny_config(**kw), rng=np.random.default_rng(seed))


def expected_param_count(cfg):
    """Analytic tensor-size total, derived layer by layer."""
    d = cfg.dims
    h, r = cfg.heads, cfg.ffn_ratio

    def grapher(dim):
        fc_in = dim * dim + dim
        heads = 4 * dim * dim // h + 2 * dim
        fc_out = 2 * dim * dim + dim
        bns = 2 * dim + 2 * (2 * dim) + 2 * dim
        return fc_in + heads + fc_out + bns

    def ffn(dim):
        return (r * dim * dim + r * dim) + 2 * r * dim + (r * dim * dim + dim) + 2 * dim

    def resample(din, dout):
        return 9 * din * dout + dout + 2 * dout

    stem = (9 * cfg.in_channels * d[0] + d[0]) + 2 * d[0] \
        + (9 * d[0] * d[0] + d[0]) + 2 * d[0] \
        + d[0] * (cfg.image_h // 2) * (cfg.image_w // 2)
    enc = sum(grapher(d[i]) + ffn(d[i]) + resample(d[i], d[i + 1]) for i in range(4))
    mid = cfg.bottleneck_graphers * grapher(d[4])
    dec = sum(resample(d[4 - i], d[3 - i]) + grapher(d[3 - i]) + ffn(d[3 - i])
              for i in range(4))
    final = d[0] * cfg.num_classes + cfg.num_classes
    return stem + enc + mid + dec + final


class TestConfig:
    def test_defaults_validate(self):
        ModelConfig().validate()
        tiny_config().validate()

    @pytest.mark.parametrize("kw", [
        dict(image_h=60),
        dict(dims=(4, 8, 16, 32)),
        dict(dims=(4, 8, 16, 32, 48)),
        dict(reductions=(1, 1, 1)),
        dict(reductions=(3, 1, 1, 1, 1)),
        dict(k=0),
        dict(heads=3),
        dict(droppath_rate=1.0),
        dict(bottleneck_graphers=0),
        dict(in_channels=0),
    ])
    def test_bad_configs_rejected(self, kw):
        with pytest.raises(ValueError):
            tiny_config(**kw).validate()

    def test_grid_at(self):
        cfg = tiny_config()
        assert cfg.grid_at(0) == (32, 32)
        assert cfg.grid_at(4) == (2, 2)

    def test_dict_roundtrip(self):
        cfg = tiny_config(reductions=(2, 1, 1, 1, 1), droppath_rate=0.1,
                          skip_before_blocks=True)
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_from_dict_missing_key(self):
        d = tiny_config().to_dict()
        del d["dims"]
        with pytest.raises(KeyError):
            ModelConfig.from_dict(d)


class TestBuild:
    def test_component_counts(self):
        m = tiny_model()
        assert len(m.enc_graphers) == 4
        assert len(m.enc_ffns) == 4
        assert len(m.downs) == 4
        assert len(m.bottleneck) == 2
        assert len(m.ups) == 4
        assert len(m.dec_graphers) == 4
        assert len(m.dec_ffns) == 4

    def test_parameter_count_matches_analytic_total(self):
        m = tiny_model()
        assert m.count_parameters() == expected_param_count(m.config)

    def test_parameter_table_sums_to_total(self):
        m = tiny_model()
        rows = parameter_table(m)
        assert rows[0][0] == "stem"
        assert rows[-1][0] == "final"
        assert sum(r[2] for r in rows) == m.count_parameters()

    def test_parameter_names_are_unique(self):
        m = tiny_model()
        names = [n for n, _ in m.named_parameters()]
        assert len(names) == len(set(names))
        assert "enc.0.grapher.fc_in.weight" in names
        assert "bottleneck.1.fc_out.bias" in names
        assert "dec.3.ffn.fc2.weight" in names
        assert "final.weight" in names


class TestForward:
    def test_output_shape(self, rng):
        m = tiny_model()
        x = Tensor(rng.normal(size=(2, 3, 64, 64)).astype(np.float32))
        out = m(x, mode="train", rng=rng)
        assert out.shape == (2, 1, 64, 64)

    def test_trace_shapes(self, rng):
        m = tiny_model()
        x = Tensor(rng.normal(size=(1, 3, 64, 64)).astype(np.float32))
        trace = []
        m(x, mode="train", rng=rng, trace=trace)
        got = dict(trace)
        assert got["stem"] == (1, 4, 32, 32)
        assert got["enc.0.ffn"] == (1, 4, 32, 32)
        assert got["enc.0.down"] == (1, 8, 16, 16)
        assert got["enc.3.down"] == (1, 64, 2, 2)
        assert got["bottleneck.1"] == (1, 64, 2, 2)
        assert got["dec.0.up"] == (1, 32, 4, 4)
        assert got["dec.3.skip"] == (1, 4, 32, 32)
        assert got["final.upsample"] == (1, 4, 64, 64)
        assert got["final.conv"] == (1, 1, 64, 64)
        skips = [name for name, _ in trace if name.endswith(".skip")]
        assert skips == ["dec.0.skip", "dec.1.skip", "dec.2.skip", "dec.3.skip"]

    def test_skip_joins_after_decoder_blocks_by_default(self, rng):
        m = tiny_model()
        x = Tensor(rng.normal(size=(1, 3, 64, 64)).astype(np.float32))
        trace = []
        m(x, mode="train", rng=rng, trace=trace)
        names = [n for n, _ in trace]
        assert names.index("dec.0.skip") == names.index("dec.0.ffn") + 1

    def test_skip_before_blocks_flag(self, rng):
        before = build_vig_unet(tiny_config(skip_before_blocks=True),
                                rng=np.random.default_rng(7))
        after = tiny_model(seed=7)
        x = Tensor(rng.normal(size=(1, 3, 64, 64)).astype(np.float32))
        trace = []
        out_b = before(x, mode="train", rng=np.random.default_rng(0), trace=trace)
        out_a = after(x, mode="train", rng=np.random.default_rng(0))
        names = [n for n, _ in trace]
        assert names.index("dec.0.skip") == names.index("dec.0.up") + 1
        assert not np.allclose(out_b.data, out_a.data)

    def test_eval_mode_is_deterministic(self, rng):
        m = tiny_model()
        x = Tensor(rng.normal(size=(1, 3, 64, 64)).astype(np.float32))
        a = m(x, mode="eval").data
        b = m(x, mode="eval").data
        np.testing.assert_array_equal(a, b)

    def test_wrong_input_size_rejected(self, rng):
        m = tiny_model()
        with pytest.raises(ShapeError):
            m(Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))
        with pytest.raises(ShapeError):
            m(Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32)))

    def test_gradients_reach_every_parameter(self, rng):
        m = tiny_model()
        x = Tensor(rng.normal(size=(1, 3, 64, 64)).astype(np.float32))
        out = m(x, mode="train", rng=rng)
        (out * out).mean().backward()
        for name, p in m.named_parameters():
            assert p.grad is not None, name


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        m = tiny_model(seed=3)
        x = Tensor(rng.normal(size=(1, 3, 64, 64)).astype(np.float32))
        m(x, mode="train", rng=rng)  # move the running stats off their init
        path = tmp_path / "m.vgun"
        save_checkpoint(m, path, extra={"norm_mean": "0.5,0.5,0.5"})
        again, extras = load_checkpoint(path)
        assert extras == {"norm_mean": "0.5,0.5,0.5"}
        assert again.config == m.config
        for (an, ap), (bn, bp) in zip(m.named_parameters(), again.named_parameters()):
            assert an == bn
            np.testing.assert_array_equal(ap.data, bp.data)
        for (an, ab), (bn, bb) in zip(m.named_buffers(), again.named_buffers()):
            assert an == bn
            np.testing.assert_array_equal(ab, bb)

    def test_save_load_save_is_byte_identical(self, tmp_path, rng):
        m = tiny_model(seed=5)
        p1, p2 = tmp_path / "a.vgun", tmp_path / "b.vgun"
        save_checkpoint(m, p1)
        again, extras = load_checkpoint(p1)
        save_checkpoint(again, p2, extra=extras)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_model_predicts_identically(self, tmp_path, rng):
        m = tiny_model(seed=9)
        x = Tensor(rng.normal(size=(1, 3, 64, 64)).astype(np.float32))
        m(x, mode="train", rng=rng)
        path = tmp_path / "m.vgun"
        save_checkpoint(m, path)
        again, _ = load_checkpoint(path)
        np.testing.assert_array_equal(m(x, mode="eval").data,
                                      again(x, mode="eval").data)

    def test_bad_magic(self, tmp_path):
        m = tiny_model()
        path = tmp_path / "m.vgun"
        save_checkpoint(m, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointMagicError):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        m = tiny_model()
        path = tmp_path / "m.vgun"
        save_checkpoint(m, path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    @pytest.mark.parametrize("keep", [6, 40, 0.5])
    def test_truncation(self, tmp_path, keep):
        m = tiny_model()
        path = tmp_path / "m.vgun"
        save_checkpoint(m, path)
        blob = path.read_bytes()
        cut = int(len(blob) * keep) if isinstance(keep, float) else keep
        path.write_bytes(blob[:cut])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(path)

    def test_config_override_shape_mismatch_names_tensor(self, tmp_path):
        m = tiny_model()
        path = tmp_path / "m.vgun"
        save_checkpoint(m, path)
        other = tiny_config(image_h=128, image_w=128)
        with pytest.raises(CheckpointShapeError, match="pos_embed"):
            load_checkpoint(path, config=other)

    def test_errors_share_a_base_class(self):
        from vigunet import CheckpointError
        for exc in (CheckpointMagicError, CheckpointVersionError,
                    CheckpointTruncatedError, CheckpointShapeError):
            assert issubclass(exc, CheckpointError)
