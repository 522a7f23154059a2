import math

import numpy as np
import pytest

from streamasr.layers import Conv2dSpec
from streamasr.model import (
    ModelSpec,
    RecurrentSpec,
    UNBOUNDED,
    baseline_spec,
    bidirectional_spec,
    build_model,
    convert_bgru_to_lc,
    is_deployable,
    load_checkpoint,
    lookahead_frames,
    model_forward,
    proposed_spec,
    save_checkpoint,
    total_time_stride,
)


def tiny_spec(recurrent=None, conv=True, frontend="log", la=None, grams=None, hidden=6):
    # 800 Hz / 20 ms window -> 9 bins keeps everything fast
    return ModelSpec(
        alphabet="abc",
        frontend=frontend,
        sample_rate=800,
        conv=[Conv2dSpec(3, (3, 3), 1, (2, 2))] if conv else [],
        recurrent=recurrent or [RecurrentSpec("fwd")],
        hidden=hidden,
        la_context=la,
        grams=grams,
    )


def random_features(rng, T, n_bins):
    return rng.uniform(0.01, 2.0, (T, n_bins))


class TestBuild:
    def test_same_seed_bit_identical(self):
        spec = proposed_spec("abc ", width=8, sample_rate=800)
        a = build_model(spec, seed=7)
        b = build_model(spec, seed=7)
        assert set(a.params) == set(b.params)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])

    def test_different_seed_differs(self):
        spec = tiny_spec()
        a = build_model(spec, seed=1)
        b = build_model(spec, seed=2)
        assert any(not np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_proposed_preset_lookahead(self):
        spec = proposed_spec("abc ", width=8)
        nominal, worst = lookahead_frames(spec)
        assert nominal == 20
        assert worst == 29

    def test_lc_layer_params_below_bgru_layer(self):
        lc = build_model(tiny_spec(recurrent=[RecurrentSpec("lc", 4, 2)]), seed=0)
        bg = build_model(tiny_spec(recurrent=[RecurrentSpec("bgru")]), seed=0)
        n_lc = sum(v.size for k, v in lc.params.items() if k.startswith("rec0."))
        n_bg = sum(v.size for k, v in bg.params.items() if k.startswith("rec0."))
        assert n_lc < n_bg

    def test_baseline_inventory(self):
        spec = baseline_spec("abc ", width=2560)
        assert [(c.filters, c.kernel, c.in_channels, c.stride) for c in spec.conv] == [
            (32, (41, 11), 1, (2, 2)),
            (32, (21, 11), 32, (2, 1)),
        ]
        assert len(spec.recurrent) == 3
        assert all(r.kind == "fwd" for r in spec.recurrent)
        assert spec.la_context == 30
        assert spec.hidden == 2560
        model = build_model(baseline_spec("ab", width=4, sample_rate=800), seed=0)
        assert [h.name for h in model.heads] == ["head_char"]
        assert "laconv.w" in model.params

    def test_stride_presets(self):
        assert total_time_stride(baseline_spec("ab")) == 2
        assert total_time_stride(baseline_spec("ab", time_resolution=4)) == 4


class TestForward:
    def test_rows_are_log_probs(self):
        rng = np.random.default_rng(0)
        model = build_model(tiny_spec(grams=["a", "b", "c", "ab"]), seed=3)
        out = model_forward(model, random_features(rng, 12, 9))
        assert set(out) == {"char", "gram"}
        for lp in out.values():
            np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-12)
        assert out["char"].shape == (6, 4)  # ceil(12/2) frames, 3 chars + blank
        assert out["gram"].shape == (6, 5)

    def test_doubling_length_doubles_frames(self):
        rng = np.random.default_rng(1)
        model = build_model(tiny_spec(), seed=4)
        x = random_features(rng, 10, 9)
        t1 = model_forward(model, x)["char"].shape[0]
        t2 = model_forward(model, np.concatenate([x, x]))["char"].shape[0]
        assert (t1, t2) == (5, 10)

    def test_feature_shape_error(self):
        model = build_model(tiny_spec(), seed=5)
        with pytest.raises(ValueError, match="feature shape error"):
            model_forward(model, np.ones((10, 7)))

    def test_forward_deterministic(self):
        rng = np.random.default_rng(2)
        model = build_model(tiny_spec(frontend="pcen"), seed=6)
        x = random_features(rng, 9, 9)
        a = model_forward(model, x)["char"]
        b = model_forward(model, x)["char"]
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("frontend", ["log", "pcen"])
    def test_end_to_end_gradient_spot_check(self, frontend):
        rng = np.random.default_rng(7)
        spec = tiny_spec(
            recurrent=[RecurrentSpec("fwd"), RecurrentSpec("lc", 3, 2)],
            frontend=frontend,
            la=2,
            hidden=4,
        )
        model = build_model(spec, seed=8)
        feats = [random_features(rng, 7, 9), random_features(rng, 9, 9)]
        projs = None

        def run():
            nonlocal projs
            buf_snapshot = {k: v.copy() for k, v in model.buffers.items()}
            outs, cache = model.forward_batch(feats, mode="train")
            for k, v in buf_snapshot.items():
                model.buffers[k][...] = v
            if projs is None:
                projs = [
                    {h: np.random.default_rng(99 + i).normal(size=o[h].shape) for h in o}
                    for i, o in enumerate(outs)
                ]
            val = sum(float(np.sum(o[h] * p[h])) for o, p in zip(outs, projs) for h in o)
            return val, outs, cache

        _, outs, cache = run()
        grads = model.backward_batch(projs, cache)

        from util import central_diff

        checked = 0
        for name in ["conv0.w", "rec1.u_bwd", "head_char.w", "rec0.w"] + (
            ["frontend.logit_s"] if frontend == "pcen" else []
        ):
            theta = model.params[name]
            fd = central_diff(lambda: run()[0], theta, eps=1e-5)
            np.testing.assert_allclose(grads[name], fd, rtol=1e-3, atol=1e-7, err_msg=name)
            checked += 1
        assert checked >= 4


class TestLookahead:
    def test_all_causal_zero(self):
        spec = tiny_spec(recurrent=[RecurrentSpec("fwd"), RecurrentSpec("fwd")])
        assert lookahead_frames(spec) == (0, 0)

    def test_bgru_unbounded(self):
        spec = tiny_spec(recurrent=[RecurrentSpec("bgru")])
        assert lookahead_frames(spec) == (UNBOUNDED, UNBOUNDED)
        assert not is_deployable(spec)

    def test_stacked_lc_nominal_by_perturbation(self):
        # no convs: input frames map 1:1 to recurrent frames
        c_w, c_s = 6, 3
        for k in (1, 2):
            spec = tiny_spec(
                recurrent=[RecurrentSpec("lc", c_w, c_s) for _ in range(k)], conv=False, hidden=3
            )
            nominal, worst = lookahead_frames(spec)
            assert nominal == k * (c_w - c_s)
            model = build_model(spec, seed=10 + k)
            rng = np.random.default_rng(20 + k)
            T = 40
            x = random_features(rng, T, 9)
            base = model_forward(model, x)["char"]
            t = c_s - 1  # frame with minimal chunk jitter at every level
            farthest = -1
            for u in range(t, T):
                x2 = x.copy()
                x2[u] += 0.5
                out = model_forward(model, x2)["char"]
                if not np.allclose(out[t], base[t], atol=1e-13):
                    farthest = u
            assert farthest - t == nominal
            # worst case really is a bound for every frame
            for t0 in range(T - int(worst) - 1):
                x3 = x.copy()
                x3[t0 + int(worst) + 1 :] += 1.0
                out = model_forward(model, x3)["char"]
                np.testing.assert_allclose(out[t0], base[t0], atol=1e-13)

    def test_converted_bgru_becomes_bounded(self):
        spec = tiny_spec(recurrent=[RecurrentSpec("bgru")])
        model = build_model(spec, seed=11)
        conv = convert_bgru_to_lc(model, 8, 4)
        assert lookahead_frames(conv.spec) == (4, 7)
        assert is_deployable(conv.spec)


class TestConvertedBgru:
    def test_matches_layer_level_chunked_run(self):
        from streamasr.layers import GruParams, run_bgru_as_lc_bgru

        spec = tiny_spec(recurrent=[RecurrentSpec("bgru")], conv=False, hidden=5)
        spec.use_batchnorm = False
        model = build_model(spec, seed=12)
        rng = np.random.default_rng(13)
        x = random_features(rng, 20, 9)
        # reproduce the trunk by hand: log frontend then the chunked run
        xin = (np.log(x + 1e-10) - model.buffers["frontend.mean"]) / np.sqrt(
            model.buffers["frontend.var"] + 1e-8
        )
        fwd = GruParams(model.params["rec0.fwd.w"], model.params["rec0.fwd.u"], model.params["rec0.fwd.b"])
        bwd = GruParams(model.params["rec0.bwd.w"], model.params["rec0.bwd.u"], model.params["rec0.bwd.b"])
        ref_trunk = run_bgru_as_lc_bgru(xin, fwd, bwd, 8, 4)
        conv = convert_bgru_to_lc(model, 8, 4)
        w, b = model.params["head_char.w"], model.params["head_char.b"]
        from streamasr.layers import log_softmax

        expected = log_softmax(ref_trunk @ w.T + b)
        got = model_forward(conv, x)["char"]
        np.testing.assert_allclose(got, expected, atol=1e-12)


class TestCheckpoint:
    def _model(self):
        spec = tiny_spec(frontend="pcen", grams=["a", "b", "c"])
        model = build_model(spec, seed=14)
        rng = np.random.default_rng(15)
        for v in model.params.values():
            v += rng.normal(0, 0.01, v.shape)
        return model

    def test_round_trip_bitwise(self, tmp_path):
        model = self._model()
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(model, p1, metadata={"epoch": 3, "seed": 14})
        loaded, meta = load_checkpoint(p1)
        assert meta == {"epoch": 3, "seed": 14}
        save_checkpoint(loaded, p2, metadata=meta)
        assert p1.read_bytes() == p2.read_bytes()

    def test_forward_identical_after_round_trip(self, tmp_path):
        model = self._model()
        rng = np.random.default_rng(16)
        x = random_features(rng, 11, 9)
        before = model_forward(model, x)["char"]
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        loaded, _ = load_checkpoint(path)
        after = model_forward(loaded, x)["char"]
        assert np.array_equal(before, after)

    def test_corrupt_header_byte(self, tmp_path):
        model = self._model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        raw[20] ^= 0xFF  # inside the manifest
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="checksum failure"):
            load_checkpoint(path)

    def test_corrupt_tensor_byte(self, tmp_path):
        model = self._model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        raw[-5] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="checksum failure"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="version mismatch"):
            load_checkpoint(path)

    def test_missing_tensor(self, tmp_path):
        import json
        import zlib

        model = self._model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        mlen = int.from_bytes(raw[4:8], "little")
        manifest = json.loads(raw[12 : 12 + mlen])
        manifest["tensors"] = [e for e in manifest["tensors"] if e["name"] != "head_char.b"]
        mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        path.write_bytes(
            raw[:4]
            + len(mbytes).to_bytes(4, "little")
            + zlib.crc32(mbytes).to_bytes(4, "little")
            + mbytes
            + raw[12 + mlen :]
        )
        with pytest.raises(ValueError, match="missing tensor"):
            load_checkpoint(path)

    def test_shape_mismatch(self, tmp_path):
        import json
        import zlib

        model = self._model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        mlen = int.from_bytes(raw[4:8], "little")
        manifest = json.loads(raw[12 : 12 + mlen])
        for e in manifest["tensors"]:
            if e["name"] == "head_char.b":
                e["shape"] = [e["shape"][0] + 1]
        mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        path.write_bytes(
            raw[:4]
            + len(mbytes).to_bytes(4, "little")
            + zlib.crc32(mbytes).to_bytes(4, "little")
            + mbytes
            + raw[12 + mlen :]
        )
        with pytest.raises(ValueError, match="shape mismatch"):
            load_checkpoint(path)

    def test_load_as_chunked_eval(self, tmp_path):
        spec = bidirectional_spec("ab", width=4, sample_rate=800)
        model = build_model(spec, seed=17)
        path = tmp_path / "bi.ckpt"
        save_checkpoint(model, path)
        loaded, _ = load_checkpoint(path, bgru_as_lc=(16, 8))
        assert loaded.spec.bgru_as_lc == (16, 8)
        assert is_deployable(loaded.spec)
