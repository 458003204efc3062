"""Model construction, head surgery, forward pass, checkpoint round-trips."""

import json
import os

import numpy as np
import pytest

import ftscope.model as M
import ftscope.tensor as T


def shape_walk(num_blocks=9, input_size=32, classes=8, aux=()):
    """Independent parameter/shape walker built from the architecture rules.

    Recomputes every tensor shape from the stated widths and branch rules
    without touching the library's param_shapes machinery.
    """
    widths = [32, 32, 48, 48, 64, 64, 80, 96, 96][:num_blocks]
    names = ["mixed3a", "mixed3b", "mixed4a", "mixed4b", "mixed4c",
             "mixed4d", "mixed4e", "mixed5a", "mixed5b"][:num_blocks]
    shapes = {}
    size = input_size
    # stem: conv(3->16) pool conv(16->32) pool, both convs 3x3 stride 1 pad 1
    shapes["conv0.w"] = (16, 3, 3, 3)
    shapes["conv0.b"] = (16,)
    size //= 2
    shapes["conv1.w"] = (32, 16, 3, 3)
    shapes["conv1.b"] = (32,)
    size //= 2
    in_ch = 32
    spatial = {}
    for name, w in zip(names, widths):
        if name in ("mixed4a", "mixed5a") and name != names[0]:
            size //= 2
        q, r = w // 4, w // 8
        shapes[f"{name}.b1x1.w"] = (q, in_ch, 1, 1)
        shapes[f"{name}.b1x1.b"] = (q,)
        shapes[f"{name}.b3x3_reduce.w"] = (q, in_ch, 1, 1)
        shapes[f"{name}.b3x3_reduce.b"] = (q,)
        shapes[f"{name}.b3x3.w"] = (q, q, 3, 3)
        shapes[f"{name}.b3x3.b"] = (q,)
        shapes[f"{name}.b5x5_reduce.w"] = (r, in_ch, 1, 1)
        shapes[f"{name}.b5x5_reduce.b"] = (r,)
        shapes[f"{name}.b5x5.w"] = (q, r, 5, 5)
        shapes[f"{name}.b5x5.b"] = (q,)
        shapes[f"{name}.pool_proj.w"] = (q, in_ch, 1, 1)
        shapes[f"{name}.pool_proj.b"] = (q,)
        spatial[name] = (w, size, size)
        in_ch = w
    shapes["head.w"] = (in_ch, classes)
    shapes["head.b"] = (classes,)
    for aux_name in aux:
        shapes[f"aux_{aux_name}.w"] = (spatial[aux_name][0], classes)
        shapes[f"aux_{aux_name}.b"] = (classes,)
    total = sum(int(np.prod(s)) for s in shapes.values())
    return shapes, spatial, total


@pytest.fixture
def small_spec():
    return M.default_spec(M.Head("softmax", 5), input_size=16, num_blocks=2)


@pytest.fixture
def small_model(small_spec):
    return M.build_model(small_spec, 123)


class TestBuildModel:
    def test_same_seed_bitwise_identical(self, small_spec):
        a = M.build_model(small_spec, 7)
        b = M.build_model(small_spec, 7)
        assert list(a.params) == list(b.params)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])

    def test_from_checkpoint_identical(self, small_model, small_spec):
        clone = M.build_model(small_spec, small_model)
        for k in small_model.params:
            assert np.array_equal(clone.params[k], small_model.params[k])
        clone.params["head.b"][0] = 99.0
        assert small_model.params["head.b"][0] == 0.0  # deep copy

    def test_default_spec_matches_shape_walker(self):
        spec = M.default_spec(M.Head("softmax", 8))
        model = M.build_model(spec, 0)
        walked, _, total = shape_walk(classes=8)
        got = {k: v.shape for k, v in model.params.items()}
        assert got == walked
        assert sum(v.size for v in model.params.values()) == total

    def test_biases_zero_weights_bounded(self, small_model):
        for name, arr in small_model.params.items():
            if name.endswith(".b"):
                assert np.all(arr == 0.0)
            else:
                fan_in = int(np.prod(arr.shape[1:])) if arr.ndim == 4 else arr.shape[0]
                assert np.max(np.abs(arr)) <= np.sqrt(6.0 / fan_in)

    def test_noncontiguous_blocks_rejected(self):
        with pytest.raises(M.SpecError, match="contiguous"):
            M.ModelSpec(head=M.Head("softmax", 2),
                        blocks=(M.InceptionBlock("mixed3a", 32), M.InceptionBlock("mixed4a", 32)))

    def test_aux_head_must_attach_to_existing_block(self):
        with pytest.raises(M.SpecError, match="aux head"):
            M.default_spec(M.Head("softmax", 2), num_blocks=2,
                           aux_heads=(M.AuxHead("mixed4d"),))


class TestReplaceHead:
    def test_body_preserved_bitwise(self, small_model):
        swapped = M.replace_head(small_model, M.Head("sigmoid", 7), seed=9)
        head_names = {"head.w", "head.b"}
        for k in small_model.params:
            if k not in head_names:
                assert np.array_equal(swapped.params[k], small_model.params[k])
        assert swapped.params["head.w"].shape == (32, 7)

    def test_replace_twice_same_seed_is_deterministic(self, small_model):
        first = M.replace_head(small_model, M.Head("sigmoid", 7), seed=5)
        back = M.replace_head(first, M.Head("softmax", 5), seed=1)
        again = M.replace_head(back, M.Head("sigmoid", 7), seed=5)
        assert np.array_equal(first.params["head.w"], again.params["head.w"])
        assert np.array_equal(first.params["head.b"], again.params["head.b"])

    def test_parameter_count_delta(self, small_model):
        # head goes 32->5 to 32->7: delta = 32*(7-5) + (7-5)
        before = sum(v.size for v in small_model.params.values())
        after = sum(v.size for v in M.replace_head(small_model, M.Head("sigmoid", 7), 0).params.values())
        assert after - before == 32 * 2 + 2


class TestForward:
    def test_no_capture_probs_sum_to_one(self, small_model):
        rng = np.random.default_rng(0)
        batch = rng.random((3, 3, 16, 16))
        probs, records = M.forward(small_model, batch)
        assert records == []
        assert probs.shape == (3, 5)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_duplicate_forward_identical(self, small_model):
        batch = np.random.default_rng(1).random((2, 3, 16, 16))
        p1, _ = M.forward(small_model, batch)
        p2, _ = M.forward(small_model, batch)
        assert np.array_equal(p1, p2)

    def test_capture_shape_matches_walker(self):
        spec = M.default_spec(M.Head("softmax", 8))
        model = M.build_model(spec, 3)
        _, spatial, _ = shape_walk(classes=8)
        batch = np.random.default_rng(2).random((2, 3, 32, 32))
        _, records = M.forward(model, batch, capture=["mixed4b"])
        assert len(records) == 1
        c, h, w = spatial["mixed4b"]
        assert records[0].layer == "mixed4b"
        assert records[0].values.shape == (2, c, h, w)

    def test_records_follow_canonical_order(self, small_model):
        batch = np.random.default_rng(3).random((1, 3, 16, 16))
        _, records = M.forward(small_model, batch, capture=["mixed3b", "conv0", "mixed3a"])
        assert [r.layer for r in records] == ["conv0", "mixed3a", "mixed3b"]

    def test_unknown_layer_raises(self, small_model):
        with pytest.raises(M.SpecError, match="unknown layer"):
            M.forward(small_model, np.zeros((1, 3, 16, 16)), capture=["mixed9z"])

    def test_sigmoid_head_probs_in_unit_interval(self):
        spec = M.default_spec(M.Head("sigmoid", 4), input_size=16, num_blocks=2)
        model = M.build_model(spec, 11)
        probs, _ = M.forward(model, np.random.default_rng(4).random((2, 3, 16, 16)))
        assert np.all((probs > 0) & (probs < 1))

    def test_bad_batch_shape(self, small_model):
        with pytest.raises(M.SpecError, match="batch shape"):
            M.forward(small_model, np.zeros((2, 3, 8, 8)))


class TestRandomizeBlocks:
    def test_lower_blocks_preserved(self, small_model):
        out = M.randomize_blocks(small_model, ["mixed3b"], seed=21)
        for k in small_model.params:
            if k.startswith("mixed3b") or k in ("head.w", "head.b"):
                continue
            assert np.array_equal(out.params[k], small_model.params[k])
        assert not np.array_equal(out.params["mixed3b.b1x1.w"], small_model.params["mixed3b.b1x1.w"])

    def test_unknown_block_raises(self, small_model):
        with pytest.raises(M.SpecError, match="unknown blocks"):
            M.randomize_blocks(small_model, ["mixed5b"], seed=0)


class TestCheckpointIO:
    def test_roundtrip_bitwise(self, small_model, tmp_path):
        path = str(tmp_path / "ckpt")
        M.save_checkpoint(small_model, path)
        loaded = M.load_checkpoint(path)
        assert loaded.spec == small_model.spec
        assert loaded.meta == small_model.meta
        assert list(loaded.params) == list(small_model.params)
        for k in small_model.params:
            assert np.array_equal(loaded.params[k], small_model.params[k])

    def test_truncated_blob_raises_length_mismatch(self, small_model, tmp_path):
        path = str(tmp_path / "ckpt")
        M.save_checkpoint(small_model, path)
        bin_path = os.path.join(path, "params.bin")
        blob = open(bin_path, "rb").read()
        with open(bin_path, "wb") as f:
            f.write(blob[:-16])
        with pytest.raises(M.CheckpointError, match="length mismatch"):
            M.load_checkpoint(path)

    def test_missing_tensor_in_manifest_names_key(self, small_model, tmp_path):
        path = str(tmp_path / "ckpt")
        M.save_checkpoint(small_model, path)
        mpath = os.path.join(path, "manifest.json")
        manifest = json.load(open(mpath))
        dropped = [t for t in manifest["tensors"] if t["name"] != "mixed3a.b3x3.w"]
        manifest["tensors"] = dropped
        json.dump(manifest, open(mpath, "w"))
        with pytest.raises(M.CheckpointError, match="missing parameter 'mixed3a.b3x3.w'"):
            M.load_checkpoint(path)

    def test_unknown_version_raises(self, small_model, tmp_path):
        path = str(tmp_path / "ckpt")
        M.save_checkpoint(small_model, path)
        mpath = os.path.join(path, "manifest.json")
        manifest = json.load(open(mpath))
        manifest["format_version"] = 99
        json.dump(manifest, open(mpath, "w"))
        with pytest.raises(M.CheckpointError, match="version"):
            M.load_checkpoint(path)

    def test_checkpoint_id_tracks_content(self, small_model):
        a = M.checkpoint_id(small_model)
        clone = small_model.copy()
        assert M.checkpoint_id(clone) == a
        clone.params["head.w"][0, 0] += 1.0
        assert M.checkpoint_id(clone) != a


class TestGradientThroughModel:
    """Finite-difference check of every parameter on a tiny full network."""

    def _tiny_spec(self, head_kind):
        return M.ModelSpec(
            head=M.Head(head_kind, 3),
            input_size=8,
            stem=(M.ConvStage(4), M.PoolStage(), M.ConvStage(8), M.PoolStage()),
            blocks=(M.InceptionBlock("mixed3a", 8), M.InceptionBlock("mixed3b", 8)),
        )

    @pytest.mark.parametrize("head_kind", ["softmax", "sigmoid"])
    def test_full_network_gradients(self, head_kind):
        from oracles import finite_difference_grad, relative_error

        spec = self._tiny_spec(head_kind)
        model = M.build_model(spec, 5)
        rng = np.random.default_rng(6)
        batch = rng.random((2, 3, 8, 8))
        if head_kind == "softmax":
            labels = np.array([0, 2])
        else:
            labels = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])

        def loss_from(params):
            out = M.run_graph(spec, {k: T.Tensor(v) for k, v in params.items()}, T.Tensor(batch))
            if head_kind == "softmax":
                return T.cross_entropy(out["probs"], labels)
            return T.multilabel_bce(out["probs"], labels)

        tape = T.Tape()
        leaves = {k: tape.leaf(v) for k, v in model.params.items()}
        out = M.run_graph(spec, leaves, T.Tensor(batch))
        if head_kind == "softmax":
            loss = T.cross_entropy(out["probs"], labels)
        else:
            loss = T.multilabel_bce(out["probs"], labels)
        grads = T.backward(tape, loss)

        for name in model.params:
            def scalar_fn(x, name=name):
                probe = dict(model.params)
                probe[name] = x
                return loss_from(probe).item()

            fd = finite_difference_grad(scalar_fn, model.params[name].copy(), h=1e-5)
            err = relative_error(grads[leaves[name].node], fd)
            assert err <= 1e-4, f"{name}: relative error {err:.2e}"
