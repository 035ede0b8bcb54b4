import json

import numpy as np
import pytest

from densealign import data as D
from densealign import segeval as S


def embed_by_table(table, dim=4):
    """Deterministic fake text embedder backed by a dict."""

    def embed(text):
        if text in table:
            return np.asarray(table[text], dtype=np.float64)
        rng = np.random.default_rng(abs(hash(text)) % (2**32))
        return rng.normal(size=dim)

    return embed


def make_world(**kw):
    defaults = dict(
        concepts=["cow", "tree", "grass", "cat"],
        d_v=8, grid=(4, 4), regions_per_image=2,
        sigma=0.0, image_count=8, seed=5, mask_scale=4,
    )
    defaults.update(kw)
    return D.generate_synthetic_world(D.SyntheticWorldSpec(**defaults))


# ---- class embedding -----------------------------------------------------------


def test_embed_classes_singleton_is_normalized_embedding():
    fn = embed_by_table({"a photo of a cow.": [3.0, 4.0, 0.0, 0.0]})
    protos = S.embed_classes(["cow"], ["a photo of a {}."], fn)
    np.testing.assert_allclose(protos[0], [0.6, 0.8, 0.0, 0.0])


def test_embed_classes_duplicate_templates_idempotent():
    fn = embed_by_table({})
    a = S.embed_classes(["cow"], ["a photo of a {}."], fn)
    b = S.embed_classes(["cow"], ["a photo of a {}."] * 3, fn)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def test_embed_classes_orthogonal_average_at_45_degrees():
    fn = embed_by_table({
        "one cow": [1.0, 0.0, 0.0, 0.0],
        "two cow": [0.0, 1.0, 0.0, 0.0],
    })
    protos = S.embed_classes(["cow"], ["one {}", "two {}"], fn)
    assert abs(np.linalg.norm(protos[0]) - 1.0) < 1e-12
    assert abs(protos[0] @ [1, 0, 0, 0] - np.sqrt(0.5)) < 1e-12


def test_embed_classes_template_without_placeholder():
    with pytest.raises(S.ConfigError, match="placeholder"):
        S.embed_classes(["cow"], ["a photo"], embed_by_table({}))


# ---- windows -------------------------------------------------------------------


def test_windows_4x4_window2_stride2():
    wins = S.sliding_windows(4, 4, 2, 2)
    assert len(wins) == 4
    cover = np.zeros((4, 4), dtype=int)
    for r0, c0, r1, c1 in wins:
        cover[r0:r1, c0:c1] += 1
    assert (cover == 1).all()


def test_windows_clamped_to_edge():
    starts = S.window_starts(5, 2, 2)
    assert starts == [0, 2, 3]
    cover = np.zeros(5, dtype=int)
    for s in starts:
        cover[s : s + 2] += 1
    assert (cover >= 1).all()


def test_windows_degenerate_whole_grid():
    assert S.sliding_windows(4, 4, 0, 0) == [(0, 0, 4, 4)]


def test_eval_config_validation():
    with pytest.raises(S.ConfigError):
        S.EvalConfig(protocol="nope")
    with pytest.raises(S.ConfigError):
        S.EvalConfig(window=2, stride=3)
    with pytest.raises(S.ConfigError):
        S.EvalConfig(protocol="foreground", background_threshold=0.5)


# ---- bilinear upsample ---------------------------------------------------------


def test_bilinear_constant_map():
    up = S.bilinear_upsample(np.full((3, 3), 2.5), 12, 9)
    np.testing.assert_allclose(up, 2.5)


def test_bilinear_identity_at_same_size():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(4, 5))
    np.testing.assert_allclose(S.bilinear_upsample(g, 4, 5), g)


def test_bilinear_hand_values_half_pixel():
    g = np.array([[0.0], [1.0]])
    up = S.bilinear_upsample(g, 4, 1)
    np.testing.assert_allclose(up[:, 0], [0.0, 0.25, 0.75, 1.0])


# ---- prediction ----------------------------------------------------------------


def test_predict_empty_classes():
    store, _, _, _ = make_world()
    with pytest.raises(S.ConfigError):
        S.predict_image(store.records[0], np.zeros((0, 8)), (4, 4))


def test_predict_windowing_matches_single_window():
    store, _, _, means = make_world(sigma=0.1)
    protos = np.stack([means[n] for n in sorted(means)])
    rec = store.records[0]
    base = S.predict_image(rec, protos, (16, 16))
    windowed = S.predict_image(rec, protos, (16, 16),
                               S.EvalConfig(window=2, stride=1))
    np.testing.assert_allclose(windowed.scores, base.scores)
    np.testing.assert_array_equal(windowed.labels, base.labels)


def test_predict_cosine_scale_invariant():
    store, _, _, means = make_world()
    protos = np.stack([means[n] for n in sorted(means)])
    rec = store.records[0]
    scaled = D.FeatureRecord(rec.image_id, rec.h_p, rec.w_p,
                             rec.cls, rec.patches * 7.5)
    a = S.predict_image(rec, protos, (8, 8))
    b = S.predict_image(scaled, protos * 0.3, (8, 8))
    np.testing.assert_allclose(a.scores, b.scores)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_predict_oracle_means_reproduce_masks_exactly():
    store, _, masks, means = make_world()
    protos = np.stack([means[n] for n in sorted(means)])
    for rec in store.records:
        mask = masks[rec.image_id]
        pred = S.predict_image(rec, protos, mask.shape)
        np.testing.assert_array_equal(pred.labels, mask)


def test_evaluate_oracle_miou_is_one():
    store, _, masks, means = make_world(sigma=0.05)
    protos = np.stack([means[n] for n in sorted(means)])
    report = S.evaluate(store.records, masks, protos, sorted(means),
                        S.EvalConfig())
    assert report.miou >= 0.99
    assert report.pixels_scored == 8 * 16 * 16


# ---- background ----------------------------------------------------------------


def toy_prediction():
    labels = np.array([[0, 1], [1, 0]])
    scores = np.array([[0.9, 0.2], [0.6, 0.4]])
    return S.SegPrediction(labels, scores)


def test_background_extremes():
    pred = toy_prediction()
    same = S.apply_background(pred, -np.inf, 2)
    np.testing.assert_array_equal(same.labels, pred.labels)
    allbg = S.apply_background(pred, np.inf, 2)
    assert (allbg.labels == 2).all()


def test_background_monotone():
    pred = toy_prediction()
    prev = 0
    for t in np.linspace(0, 1, 11):
        count = (S.apply_background(pred, t, 2).labels == 2).sum()
        assert count >= prev
        prev = count


# ---- confusion and mIoU --------------------------------------------------------


def test_miou_perfect_prediction():
    truth = np.array([[0, 1], [1, 0]])
    conf = S.confusion_matrix(truth, truth, 2)
    assert S.miou(conf, ["a", "b"]).miou == 1.0


def test_miou_hand_case_point_six():
    conf = np.array([[3, 1], [1, 3]])
    report = S.miou(conf, ["a", "b"])
    assert report.miou == pytest.approx(0.6)
    assert report.per_class == {"a": pytest.approx(0.6), "b": pytest.approx(0.6)}
    assert report.pixels_scored == 8


def test_miou_absent_class_excluded():
    conf = np.array([[3, 1, 0], [1, 3, 0], [0, 0, 0]])
    report = S.miou(conf, ["a", "b", "c"])
    assert "c" not in report.per_class
    assert report.miou == pytest.approx(0.6)


def test_miou_zero_pixels_errors():
    with pytest.raises(S.ReportError):
        S.miou(np.zeros((2, 2), dtype=int), ["a", "b"])


def test_confusion_ignores_sentinel():
    truth = np.array([[0, 255], [255, 1]])
    pred = np.array([[0, 0], [1, 1]])
    conf = S.confusion_matrix(pred, truth, 2)
    assert conf.sum() == 2
    np.testing.assert_array_equal(conf, np.eye(2, dtype=int))


def test_miou_permutation_equivariant():
    rng = np.random.default_rng(3)
    truth = rng.integers(0, 3, size=(10, 10))
    pred = rng.integers(0, 3, size=(10, 10))
    conf = S.confusion_matrix(pred, truth, 3)
    base = S.miou(conf, ["a", "b", "c"]).miou
    perm = np.array([2, 0, 1])
    conf2 = S.confusion_matrix(perm[pred], perm[truth], 3)
    assert S.miou(conf2, ["a", "b", "c"]).miou == pytest.approx(base)


def test_report_json_roundtrip(tmp_path):
    report = S.MIoUReport({"a": 0.5}, 0.5, 100, "whole-image", 0.3)
    p = tmp_path / "report.json"
    report.save(p)
    loaded = json.loads(p.read_text())
    assert loaded == {"per_class": {"a": 0.5}, "miou": 0.5,
                      "pixels_scored": 100, "protocol": "whole-image",
                      "threshold": 0.3}


# ---- threshold calibration -----------------------------------------------------


def separable_fixture():
    """2 images; foreground scores >= 0.7, background scores <= 0.3."""
    preds, masks = [], []
    labels = np.array([[0, 0], [1, 1]])
    scores = np.array([[0.9, 0.8], [0.3, 0.2]])
    preds.append(S.SegPrediction(labels, scores))
    masks.append(np.array([[0, 0], [2, 2]]))  # 2 = background
    labels = np.array([[1, 1], [0, 0]])
    scores = np.array([[0.7, 0.9], [0.25, 0.1]])
    preds.append(S.SegPrediction(labels, scores))
    masks.append(np.array([[1, 1], [2, 2]]))
    return preds, masks


def test_calibrate_singleton_grid():
    preds, masks = separable_fixture()
    assert S.calibrate_threshold(preds, masks, [0.5], 2) == 0.5


def test_calibrate_separable_lowest_tie():
    preds, masks = separable_fixture()
    grid = [0.35, 0.5, 0.65, 0.95]
    # 0.35, 0.5, 0.65 all separate perfectly; the lowest must win
    assert S.calibrate_threshold(preds, masks, grid, 2) == 0.35


def test_calibrate_matches_exhaustive_scan():
    rng = np.random.default_rng(9)
    preds, masks = [], []
    for _ in range(3):
        scores = rng.uniform(size=(6, 6))
        labels = rng.integers(0, 2, size=(6, 6))
        truth = rng.integers(0, 3, size=(6, 6))
        preds.append(S.SegPrediction(labels, scores))
        masks.append(truth)
    grid = np.linspace(0.0, 1.0, 21)

    def scan_miou(t):
        conf = np.zeros((3, 3), dtype=np.int64)
        for pred, mask in zip(preds, masks):
            lab = np.where(pred.scores < t, 2, pred.labels)
            for a, b in zip(mask.ravel(), lab.ravel()):
                conf[a, b] += 1
        ious = []
        for c in range(3):
            tp = conf[c, c]
            denom = conf[c].sum() + conf[:, c].sum() - tp
            if denom:
                ious.append(tp / denom)
        return np.mean(ious)

    best = max(sorted(grid), key=lambda t: (scan_miou(t), -t))
    assert S.calibrate_threshold(preds, masks, grid, 2) == pytest.approx(best)


def test_calibrated_never_worse_than_no_threshold():
    preds, masks = separable_fixture()
    grid = [-1e18, 0.35, 0.95]
    t = S.calibrate_threshold(preds, masks, grid, 2)

    def score(thr):
        conf = np.zeros((3, 3), dtype=np.int64)
        for pred, mask in zip(preds, masks):
            lab = S.apply_background(pred, thr, 2)
            conf += S.confusion_matrix(lab.labels, mask, 3)
        return S.miou(conf, ["0", "1", "2"]).miou

    assert score(t) >= score(-1e18)


def test_calibrate_empty_grid():
    with pytest.raises(S.ConfigError):
        S.calibrate_threshold([], [], [], 2)


def test_evaluate_whole_image_requires_threshold():
    store, _, masks, means = make_world()
    protos = np.stack([means[n] for n in sorted(means)])
    with pytest.raises(S.ConfigError):
        S.evaluate(store.records, masks, protos, sorted(means),
                   S.EvalConfig(protocol="whole-image"))


# ---- heatmap -------------------------------------------------------------------


def test_heatmap_constant_features_is_zero(tmp_path):
    rec = D.FeatureRecord("x", 2, 2, np.ones(4), np.ones((4, 4)))
    img = S.heatmap(rec, "cow", embed_by_table({}), tmp_path / "h.pgm", (8, 8))
    assert (img == 0).all()
    assert img.shape == (8, 8)


def test_heatmap_synthetic_region_saturates(tmp_path):
    store, _, masks, means = make_world()
    names = sorted(means)
    rec = store.records[0]
    mask = masks[rec.image_id][::4, ::4]  # patch-resolution labels
    target = names[int(mask[0, 0])]
    img = S.heatmap(rec, target, embed_by_table({target: means[target]}, dim=8),
                    tmp_path / "h.pgm", (rec.h_p, rec.w_p))
    assert (img[mask == mask[0, 0]] == 255).all()
    assert img[mask != mask[0, 0]].max() < 255
    assert D.read_mask(tmp_path / "h.pgm").shape == (rec.h_p, rec.w_p)


# ---- pca -----------------------------------------------------------------------


def test_pca_variance_optimality():
    rng = np.random.default_rng(1)
    patches = rng.normal(size=(50, 8)) * np.linspace(3, 0.2, 8)
    _, projected = S.pca_components(patches, 3)
    pca_var = projected.var(axis=0).sum()
    centered = patches - patches.mean(axis=0)
    for _ in range(20):
        q, _ = np.linalg.qr(rng.normal(size=(8, 3)))
        rand_var = (centered @ q).var(axis=0).sum()
        assert pca_var >= rand_var - 1e-9


def test_pca_rank_one_leaves_two_channels_constant(tmp_path):
    t = np.linspace(-1, 1, 9)
    v = np.array([1.0, 2.0, 3.0, 4.0])
    rec = D.FeatureRecord("x", 3, 3, v.copy(), np.outer(t, v))
    img = S.pca_rgb(rec, tmp_path / "p.ppm", (3, 3))
    assert img.shape == (3, 3, 3)
    assert len(np.unique(img[..., 1])) == 1
    assert len(np.unique(img[..., 2])) == 1
    assert len(np.unique(img[..., 0])) > 1


def test_pca_synthetic_world_distinct_region_colors(tmp_path):
    store, _, masks, _ = make_world(
        concepts=["cow", "tree", "grass"], regions_per_image=3, d_v=8,
        grid=(4, 4), image_count=4,
    )
    rec = store.records[0]
    mask = masks[rec.image_id][::4, ::4]
    img = S.pca_rgb(rec, tmp_path / "p.ppm", (rec.h_p, rec.w_p))
    colors = set()
    for label in np.unique(mask):
        region = img[mask == label].reshape(-1, 3)
        assert (region == region[0]).all()
        colors.add(tuple(region[0]))
    assert len(colors) >= min(3, len(np.unique(mask)))


def test_pca_too_few_patches():
    rec = D.FeatureRecord("x", 1, 2, np.ones(4), np.ones((2, 4)))
    with pytest.raises(ValueError, match="at least 3"):
        S.pca_rgb(rec, "/dev/null", (1, 2))


def test_ppm_header(tmp_path):
    img = np.zeros((2, 3, 3), dtype=np.uint8)
    p = tmp_path / "x.ppm"
    S.write_ppm(img, p)
    assert p.read_bytes() == b"P6\n3 2\n255\n" + b"\x00" * 18
