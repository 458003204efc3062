"""Synthetic corpora and folder ingestion."""

import numpy as np
import pytest

import ftscope.data as D
from ftscope.ppm import read_ppm, write_ppm


@pytest.fixture(scope="module")
def style_small():
    return D.generate_style_corpus(D.SynthConfig(images_per_class=12, seed=3))


class TestStyleCorpus:
    def test_same_config_bitwise_identical(self):
        cfg = D.SynthConfig(images_per_class=4, seed=1)
        a = D.generate_style_corpus(cfg)
        b = D.generate_style_corpus(cfg)
        assert a.ids == b.ids
        for i in a.ids:
            assert np.array_equal(a.images[i], b.images[i])
        assert a.splits == b.splits

    def test_ids_sorted_and_unique(self, style_small):
        ids = style_small.ids
        assert ids == sorted(ids)
        assert len(ids) == len(set(ids))

    def test_splits_disjoint_and_cover(self, style_small):
        splits = style_small.splits
        train, val, test = set(splits["train"]), set(splits["val"]), set(splits["test"])
        assert not (train & val) and not (train & test) and not (val & test)
        assert train | val | test == set(style_small.ids)

    def test_split_membership_pure_function(self, style_small):
        for image_id in style_small.ids[:20]:
            split = next(s for s, ids in style_small.splits.items() if image_id in ids)
            assert D.split_of(image_id, 3) == split

    def test_pixels_in_unit_interval(self, style_small):
        for img in list(style_small.images.values())[:20]:
            assert img.shape == (3, 32, 32)
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_class_palettes_separate(self):
        # between-class palette distance exceeds within-class: t-statistic > 5
        corpus = D.generate_style_corpus(D.SynthConfig(images_per_class=200, seed=5))
        means = {i: corpus.images[i].mean(axis=(1, 2)) for i in corpus.ids}
        by_class = {}
        for i in corpus.ids:
            by_class.setdefault(corpus.labels[i], []).append(means[i])
        centroids = {k: np.mean(v, axis=0) for k, v in by_class.items()}
        within, between = [], []
        for i in corpus.ids:
            k = corpus.labels[i]
            within.append(np.linalg.norm(means[i] - centroids[k]))
            others = [np.linalg.norm(means[i] - centroids[c]) for c in centroids if c != k]
            between.append(np.mean(others))
        within, between = np.array(within), np.array(between)
        t = (between.mean() - within.mean()) / np.sqrt(
            between.var(ddof=1) / len(between) + within.var(ddof=1) / len(within))
        assert t > 5.0, f"palette separation t-statistic {t:.2f}"

    def test_linear_classifier_baseline(self):
        # learnable but non-trivial: raw-pixel softmax regression lands
        # strictly between chance and 90% top-1 (thresholds pinned after
        # a one-time calibration run)
        corpus = D.generate_style_corpus(D.SynthConfig(images_per_class=40, seed=2))
        train_ids = corpus.split_ids("train")
        test_ids = corpus.split_ids("test")
        xtr = corpus.batch(train_ids).reshape(len(train_ids), -1)
        ytr = corpus.label_array(train_ids)
        xte = corpus.batch(test_ids).reshape(len(test_ids), -1)
        yte = corpus.label_array(test_ids)
        k = corpus.num_classes
        w = np.zeros((xtr.shape[1], k))
        b = np.zeros(k)
        onehot = np.eye(k)[ytr]
        for _ in range(150):
            logits = xtr @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot) / len(ytr)
            w -= 0.5 * (xtr.T @ g)
            b -= 0.5 * g.sum(axis=0)
        acc = float(np.mean((xte @ w + b).argmax(axis=1) == yte))
        chance = 1.0 / k
        assert chance + 0.05 < acc < 0.90, f"linear baseline top-1 {acc:.3f}"


class TestObjectCorpus:
    @pytest.fixture(scope="class")
    def corpus(self):
        return D.generate_object_corpus(D.SynthConfig(images_per_class=30, seed=4))

    def test_deterministic(self):
        cfg = D.SynthConfig(images_per_class=5, seed=9)
        a = D.generate_object_corpus(cfg)
        b = D.generate_object_corpus(cfg)
        for i in a.ids:
            assert np.array_equal(a.images[i], b.images[i])

    def test_zero_object_images_occur(self, corpus):
        zero = [i for i in corpus.ids if corpus.labels[i].sum() == 0]
        assert zero, "expected some images with all-zero label vectors"

    def test_label_vectors_well_formed(self, corpus):
        for i in corpus.ids:
            vec = corpus.labels[i]
            assert vec.shape == (4,)
            assert set(np.unique(vec)) <= {0.0, 1.0}
            assert vec.sum() <= 3

    def test_positive_rate_near_configured(self):
        # uniform 0..3 shapes over 4 labels gives rate 1.5/4 = 0.375
        corpus = D.generate_object_corpus(D.SynthConfig(images_per_class=250, seed=6))
        mat = np.stack([corpus.labels[i] for i in corpus.ids])
        rates = mat.mean(axis=0)
        assert np.all(np.abs(rates - 0.375) < 0.05), f"rates {rates}"

    def test_style_source_controls_backgrounds(self):
        cfg = D.SynthConfig(images_per_class=3, seed=8)
        alt = D.SynthConfig(images_per_class=3, seed=99)
        a = D.generate_object_corpus(cfg, style_source=cfg)
        b = D.generate_object_corpus(cfg, style_source=alt)
        diff = [not np.array_equal(a.images[i], b.images[i]) for i in a.ids]
        assert any(diff)


class TestBilinearResize:
    def test_matches_scalar_oracle(self):
        from oracles import bilinear_resize_loops

        rng = np.random.default_rng(0)
        img = rng.random((3, 5, 7))
        out = D.bilinear_resize(img, 8, 4)
        np.testing.assert_allclose(out, bilinear_resize_loops(img, 8, 4), atol=1e-12)

    def test_identity_when_same_size(self):
        img = np.random.default_rng(1).random((3, 6, 6))
        np.testing.assert_allclose(D.bilinear_resize(img, 6, 6), img, atol=1e-12)


class TestLoadFolder:
    def _write_corpus(self, tmp_path, rows, images):
        (tmp_path / "labels.csv").write_text("\n".join(rows) + "\n")
        for name, img in images.items():
            write_ppm(str(tmp_path / f"{name}.ppm"), img)

    def test_two_image_folder(self, tmp_path):
        rng = np.random.default_rng(2)
        self._write_corpus(
            tmp_path,
            ["id,label", "a,cat", "b,dog"],
            {"a": rng.random((3, 4, 4)), "b": rng.random((3, 4, 4))},
        )
        ds = D.load_folder(str(tmp_path), image_size=4)
        assert len(ds.ids) == 2
        assert ds.task == "style"
        assert ds.class_names == ["cat", "dog"]

    def test_missing_label_row_names_file(self, tmp_path):
        rng = np.random.default_rng(3)
        self._write_corpus(
            tmp_path,
            ["id,label", "a,cat"],
            {"a": rng.random((3, 4, 4)), "b": rng.random((3, 4, 4))},
        )
        with pytest.raises(D.DataError, match="'b'"):
            D.load_folder(str(tmp_path), image_size=4)

    def test_ppm_pixels_decode_exactly(self, tmp_path):
        img = np.arange(3 * 2 * 2).reshape(3, 2, 2) / 255.0
        self._write_corpus(tmp_path, ["id,label", "x,only"], {"x": img})
        ds = D.load_folder(str(tmp_path), image_size=2)
        np.testing.assert_array_equal(ds.images["x"], img)

    def test_multilabel_csv(self, tmp_path):
        rng = np.random.default_rng(4)
        self._write_corpus(
            tmp_path,
            ["id,disk,cross", "a,1,0", "b,0,1"],
            {"a": rng.random((3, 4, 4)), "b": rng.random((3, 4, 4))},
        )
        ds = D.load_folder(str(tmp_path), image_size=4)
        assert ds.task == "object"
        np.testing.assert_array_equal(ds.labels["a"], [1.0, 0.0])

    def test_resize_on_load(self, tmp_path):
        rng = np.random.default_rng(5)
        self._write_corpus(tmp_path, ["id,label", "a,c"], {"a": rng.random((3, 8, 8))})
        ds = D.load_folder(str(tmp_path), image_size=4)
        assert ds.images["a"].shape == (3, 4, 4)

    def test_save_then_load_roundtrip(self, tmp_path):
        corpus = D.generate_style_corpus(D.SynthConfig(images_per_class=2, seed=7))
        out = tmp_path / "corpus"
        D.save_folder(corpus, str(out))
        back = D.load_folder(str(out), image_size=32, split_seed=7)
        assert back.ids == corpus.ids
        assert back.splits == corpus.splits
        # pixel values survive the 8-bit quantization within half a step
        for i in corpus.ids[:5]:
            assert np.max(np.abs(back.images[i] - corpus.images[i])) <= 0.5 / 255 + 1e-12


class TestPPM:
    def test_roundtrip_bitwise(self, tmp_path):
        img = np.random.default_rng(6).random((3, 5, 9))
        p = str(tmp_path / "img.ppm")
        write_ppm(p, img)
        back = read_ppm(p)
        write_ppm(str(tmp_path / "img2.ppm"), back)
        assert open(p, "rb").read() == open(str(tmp_path / "img2.ppm"), "rb").read()

    def test_comment_in_header(self, tmp_path):
        p = str(tmp_path / "c.ppm")
        with open(p, "wb") as f:
            f.write(b"P6\n# a comment\n2 1\n255\n" + bytes([0, 0, 0, 255, 255, 255]))
        img = read_ppm(p)
        np.testing.assert_array_equal(img[:, 0, 0], 0.0)
        np.testing.assert_array_equal(img[:, 0, 1], 1.0)
