import numpy as np
import pytest

from ofattn.engine import ContractError, NonFiniteError, Tape
from ofattn.grid import apply_multiscale_mask, sample_cell_mask
from ofattn.model import (
    Adam, Batch, VitConfig, compute_losses, embed_tokens, forward, init_params, load_checkpoint,
    gradcheck_tiny, mae_forward, mae_step, param_count, pos_index, prepare_patches, save_checkpoint, train_step,
)
from ofattn.ofa import OfaConfig
from ofattn.pam import build_pam


def tiny_cfg(**kw):
    base = dict(depth=2, dim=8, heads=1, patch_size=8, scales=(16,), n_classes=2, ofa=OfaConfig(0.7, (1, 2)))
    base.update(kw)
    return VitConfig(**base)


def tiny_batch(cfg, seed=0, n=2):
    rng = np.random.default_rng(seed)
    size = cfg.scales[0]
    imgs = rng.integers(0, 256, (n, size, size, 3))
    maps = np.zeros((n, size, size), np.uint8)
    maps[0, 2:10, 3:12] = 1
    maps[-1, size // 2:, size // 2:] = 1
    pams = [build_pam(m, cfg.scale_set) for m in maps]
    labels = rng.integers(0, 2, (n, cfg.n_classes))
    return Batch(prepare_patches(imgs, cfg), labels, np.stack([p.B_dprime for p in pams]),
                 np.stack([p.object_rows for p in pams]))


class TestConfig:
    def test_depth_guard(self):
        with pytest.raises(ContractError):
            VitConfig(depth=0, ofa=OfaConfig(ofa_layers=()))

    def test_layers_within_depth(self):
        with pytest.raises(ContractError):
            VitConfig(depth=2)  # default layers reach 6

    def test_json_round_trip(self):
        cfg = VitConfig(scales=(64, 32), ofa=OfaConfig(0.5, (1, 6), 0.8))
        assert VitConfig.from_json(cfg.to_json()) == cfg


class TestInit:
    def test_parameter_count_closed_form(self):
        L, d, P, C, hidden = 2, 16, 8 * 8 * 3, 4, 64
        cfg = VitConfig(depth=L, dim=d, heads=2, patch_size=8, scales=(32,), n_classes=C,
                        ofa=OfaConfig(ofa_layers=(1,)))
        cells = 16
        per_block = 2 * d + 4 * d * d + d + 2 * d + d * hidden + hidden + hidden * d + d
        expected = (P * d + d) + cells * d + d + L * per_block + 2 * d + (d * C + C) + (d * P + P) + d
        assert param_count(init_params(cfg, 0)) == expected

    def test_seeded(self):
        cfg = tiny_cfg()
        a, b, c = init_params(cfg, 3), init_params(cfg, 3), init_params(cfg, 4)
        assert all(np.array_equal(a[k].value, b[k].value) for k in a)
        assert any(not np.array_equal(a[k].value, c[k].value) for k in a)

    def test_init_values(self):
        p = init_params(VitConfig(), 0)
        assert np.all(p["blocks.1.ln1.g"].value == 1) and np.all(p["blocks.1.ln1.b"].value == 0)
        assert np.all(p["head.b"].value == 0)
        w = p["blocks.3.mlp.w1"].value
        assert np.abs(w).max() <= 0.04 and 0.015 < w.std() < 0.02


class TestEmbedding:
    def test_token_count(self):
        cfg = VitConfig(depth=1, dim=8, heads=1, patch_size=16, scales=(32,), ofa=OfaConfig(ofa_layers=()))
        x = embed_tokens(Tape(), prepare_patches(np.zeros((32, 32, 3), np.uint8), cfg)[0], init_params(cfg, 0), cfg)
        assert x.shape == (5, 8)

    def test_scales_get_distinct_positions(self):
        cfg = VitConfig(depth=1, dim=8, heads=1, patch_size=8, scales=(32, 16), ofa=OfaConfig(ofa_layers=()))
        idx = pos_index(cfg)
        cells = cfg.scale_set.token_cells()
        # a coarse token and a fine token on the same reference cell
        fine = int(np.flatnonzero(cells[:16] == cells[16])[0])
        assert idx[16] != idx[fine]
        assert len(set(idx.tolist())) == len(idx)

    def test_zero_embeddings(self):
        cfg = tiny_cfg()
        params = init_params(cfg, 0)
        params["patch_embed.w"].value[:] = 0
        x = embed_tokens(Tape(), prepare_patches(np.full((16, 16, 3), 200, np.uint8), cfg)[0], params, cfg).value
        np.testing.assert_array_equal(x[0], params["cls_token"].value)
        np.testing.assert_array_equal(x[1:], params["pos_embed"].value[pos_index(cfg)])

    def test_mask_replacement_leaves_others(self):
        cfg = tiny_cfg()
        params = init_params(cfg, 1)
        patches = tiny_batch(cfg).patches
        mask = np.array([[True, False, False, True], [False, False, True, False]])
        plain = embed_tokens(Tape(), patches, params, cfg).value
        masked = embed_tokens(Tape(), patches, params, cfg, mask).value
        keep = np.concatenate([np.ones((2, 1), bool), ~mask], axis=1)
        np.testing.assert_array_equal(masked[keep], plain[keep])
        expected = params["mask_token"].value + params["pos_embed"].value[pos_index(cfg)][mask[0]]
        np.testing.assert_array_equal(masked[0, 1:][mask[0]], expected)

    def test_scale_mismatch(self):
        cfg = tiny_cfg()
        with pytest.raises(ContractError):
            prepare_patches(np.zeros((2, 32, 32, 3), np.uint8), cfg)
        with pytest.raises(ContractError):
            embed_tokens(Tape(), np.zeros((2, 5, cfg.patch_dim)), init_params(cfg, 0), cfg)


class TestForward:
    def test_zero_network(self):
        cfg = tiny_cfg()
        params = init_params(cfg, 0)
        for p in params.values():
            p.value[:] = 0
        params["head.b"].value[:] = [0.3, -1.2]
        out = forward(Tape(), tiny_batch(cfg).patches, params, cfg)
        np.testing.assert_array_equal(out.logits.value, [[0.3, -1.2], [0.3, -1.2]])

    def test_traces_and_row_sums(self):
        cfg = VitConfig(depth=3, dim=8, heads=2, patch_size=8, scales=(16,), n_classes=2,
                        ofa=OfaConfig(ofa_layers=(1, 3)))
        out = forward(Tape(), tiny_batch(cfg).patches, init_params(cfg, 0), cfg)
        assert sorted(out.traces) == [1, 3]
        for tr in out.traces.values():
            for a in tr.A:
                np.testing.assert_allclose(a.value.sum(-1), 1.0, atol=1e-12)

    def test_unbatched_matches_batched(self):
        cfg = tiny_cfg()
        params = init_params(cfg, 2)
        patches = tiny_batch(cfg).patches
        both = forward(Tape(), patches, params, cfg).logits.value
        one = forward(Tape(), patches[1], params, cfg).logits.value
        np.testing.assert_allclose(one, both[1], atol=1e-13)

    def test_inference_tape_records_nothing(self):
        cfg = tiny_cfg()
        tape = Tape(grad=False)
        forward(tape, tiny_batch(cfg).patches, init_params(cfg, 0), cfg)
        assert len(tape) == 0


def test_full_model_gradient_check():
    assert gradcheck_tiny(0) < 1e-4


class TestTrainStep:
    def test_breakdown_identity(self):
        cfg = tiny_cfg()
        params = init_params(cfg, 0)
        out = train_step(tiny_batch(cfg), params, Adam(), cfg)
        assert out["total"] == out["task"] + 0.7 * out["ofa_total"]
        assert sorted(out["ofa_per_layer"]) == [1, 2]
        w = cfg.ofa.weights()
        assert out["ofa_total"] == pytest.approx(sum(w[k] * v for k, v in out["ofa_per_layer"].items()) / 2,
                                                 abs=1e-15)

    def test_alpha_zero_matches_baseline(self):
        cfg = tiny_cfg()
        batch = tiny_batch(cfg)
        grads = []
        for b in (batch, Batch(batch.patches, batch.labels)):
            params = init_params(cfg, 5)
            tape = Tape()
            _, _, _, total = compute_losses(tape, b, params, cfg, alpha=0.0)
            tape.backward(total)
            grads.append({k: p.grad.copy() for k, p in params.items()})
        for k in grads[0]:
            assert np.array_equal(grads[0][k], grads[1][k]), k

    def test_one_step_decreases_loss(self):
        cfg = tiny_cfg()
        wins = 0
        for seed in range(10):
            params = init_params(cfg, seed)
            batch = tiny_batch(cfg, seed)
            before = train_step(batch, params, Adam(lr=1e-3), cfg)["total"]
            tape = Tape()
            after = compute_losses(tape, batch, params, cfg)[3].item()
            wins += after < before
        assert wins >= 9

    def test_deterministic(self):
        cfg = tiny_cfg()
        runs = []
        for _ in range(2):
            params, opt = init_params(cfg, 1), Adam()
            for k in range(3):
                train_step(tiny_batch(cfg, k), params, opt, cfg)
            runs.append(params)
        assert all(np.array_equal(runs[0][k].value, runs[1][k].value) for k in runs[0])

    def test_nan_names_op(self):
        cfg = tiny_cfg()
        params = init_params(cfg, 0)
        params["patch_embed.w"].value[:] = 1e308
        batch = tiny_batch(cfg)
        batch.patches = np.ones_like(batch.patches)  # 48 * 1e308 overflows
        with pytest.raises(NonFiniteError) as err:
            with np.errstate(all="ignore"):
                train_step(batch, params, Adam(), cfg)
        assert err.value.op_name == "linear"

    def test_constant_target_ofa_learns(self):
        # every sample shares the same region map, hence the same B''
        cfg = tiny_cfg(dim=16, heads=2, scales=(32,))
        rng = np.random.default_rng(0)
        region = np.zeros((32, 32), np.uint8)
        region[4:20, 6:22] = 1
        pam = build_pam(region, cfg.scale_set)
        params, opt = init_params(cfg, 0), Adam(lr=3e-3)
        first = None
        for step in range(300):
            imgs = rng.integers(0, 256, (4, 32, 32, 3))
            batch = Batch(prepare_patches(imgs, cfg), rng.integers(0, 2, (4, 2)),
                          np.broadcast_to(pam.B_dprime, (4, 16, 16)), np.broadcast_to(pam.object_rows, (4, 16)))
            out = train_step(batch, params, opt, cfg)
            mean_layer = np.mean(list(out["ofa_per_layer"].values()))
            first = mean_layer if first is None else first
        assert mean_layer < 0.5 * first


class TestMae:
    def test_empty_mask_rejected(self):
        cfg = tiny_cfg()
        with pytest.raises(ContractError):
            mae_forward(Tape(), tiny_batch(cfg).patches, np.zeros((2, 4), bool), init_params(cfg, 0), cfg)

    def test_loss_counts_masked_tokens_only(self):
        cfg = tiny_cfg()
        params = init_params(cfg, 0)
        patches = tiny_batch(cfg).patches
        mask = np.array([[True, False, False, False], [False, True, True, False]])
        tape = Tape()
        loss = mae_forward(tape, patches, mask, params, cfg).item()
        # reference: decode the same masked forward by hand
        from ofattn.model import encoder_forward
        x, _ = encoder_forward(Tape(), embed_tokens(Tape(), patches, params, cfg, mask), params, cfg, capture=())
        pred = x.value[:, 1:] @ params["mae.w"].value + params["mae.b"].value
        err = ((pred - patches) ** 2)[mask]
        assert loss == pytest.approx(err.mean(), rel=1e-12)

    def test_constant_image_reconstruction(self):
        cfg = tiny_cfg(dim=16)
        params, opt = init_params(cfg, 0), Adam(lr=1e-3)
        patches = prepare_patches(np.full((4, 16, 16, 3), 180, np.uint8), cfg)
        rng = np.random.default_rng(0)
        losses = []
        for step in range(200):
            m = np.stack([apply_multiscale_mask(sample_cell_mask(cfg.scale_set.reference, 0.5, int(s)), cfg.scale_set)
                          for s in rng.integers(0, 2**31, 4)])
            losses.append(mae_step(patches, m, params, opt, cfg))
        assert losses[-1] < 0.5 * losses[0]


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        cfg = tiny_cfg()
        params = init_params(cfg, 0)
        params["head.b"].value[:] = [np.pi, -0.0]
        save_checkpoint(tmp_path / "m.ofa", {"model": cfg.to_json()}, params)
        config, loaded = load_checkpoint(tmp_path / "m.ofa")
        assert VitConfig.from_json(config["model"]) == cfg
        assert list(loaded) == list(params)
        for k in params:
            assert loaded[k].value.tobytes() == params[k].value.tobytes()
        save_checkpoint(tmp_path / "n.ofa", config, loaded)
        assert (tmp_path / "m.ofa").read_bytes() == (tmp_path / "n.ofa").read_bytes()

    def test_header(self, tmp_path):
        save_checkpoint(tmp_path / "m.ofa", {"a": 1}, init_params(tiny_cfg(), 0))
        data = (tmp_path / "m.ofa").read_bytes()
        assert data[:4] == b"OFA1" and data[4:8] == (7).to_bytes(4, "little") and data[8:15] == b'{"a":1}'

    def test_corrupt_files(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"NOPE")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "bad")
        save_checkpoint(tmp_path / "m.ofa", {}, init_params(tiny_cfg(), 0))
        data = (tmp_path / "m.ofa").read_bytes()
        (tmp_path / "t.ofa").write_bytes(data[:-10])
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "t.ofa")
