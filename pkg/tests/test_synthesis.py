import hashlib

import numpy as np
import pytest

from g2d import netpbm
from g2d import synthesis as S


@pytest.fixture(scope="module")
def small():
    return S.synthesize_dataset(4, 14, 5, master_seed=3)


def test_render_is_deterministic():
    ident = S.generate_identities(3, seed=1)[2]
    a, ka = S.render_face(ident, 99)
    b, kb = S.render_face(ident, 99)
    assert np.array_equal(a, b) and np.array_equal(ka, kb)
    assert a.shape == (3, 32, 32) and a.min() >= 0 and a.max() <= 1


def test_identity_separation_and_bounds():
    ids = S.generate_identities(16, seed=0)
    P = np.stack([i.params for i in ids])
    d = np.max(np.abs(P[:, None] - P[None]), axis=2) + np.eye(16)
    assert d.min() >= S.MIN_SEPARATION
    with pytest.raises(ValueError):
        S.IdentityParams(0, np.full(12, 1.5))


def test_intra_identity_variation_is_below_inter():
    ids = S.generate_identities(16, seed=0)
    intra, inter = [], []
    for k, ident in enumerate(ids):
        a, _ = S.render_face(ident, 1000 + k)
        b, _ = S.render_face(ident, 2000 + k)
        c, _ = S.render_face(ids[(k + 1) % 16], 1000 + k)
        intra.append(np.abs(a - b).mean())
        inter.append(np.abs(a - c).mean())
    assert max(intra) <= 0.15
    assert np.mean(inter) > 0.15


def test_zero_alpha_template_leaves_face_untouched():
    face, kp = S.render_face(S.generate_identities(1, 0)[0], 5)
    t = S.builtin_templates(1)[0]
    blank = S.MaskTemplate(9, np.zeros_like(t.alpha), t.color)
    masked, mask = S.overlay_mask(face, kp, blank)
    assert np.array_equal(masked, face) and not mask.any()


def test_lower_half_template_under_identity_map():
    size = 32
    alpha = np.zeros((size, size))
    alpha[size // 2:] = 1.0
    t = S.MaskTemplate(0, alpha, np.zeros((size, size, 3)))
    face = np.full((3, size, size), 0.5)
    masked, mask = S.overlay_mask(face, S.TEMPLATE_ANCHORS, t)
    assert np.array_equal(mask, alpha)
    assert np.array_equal(masked[:, : size // 2], face[:, : size // 2])
    assert np.allclose(masked[:, size // 2:], 0.0, atol=1e-12)


def test_collinear_keypoints_rejected():
    line = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    with pytest.raises(ValueError, match="collinear"):
        S.affine_from_points(S.TEMPLATE_ANCHORS, line)


def test_keypoints_outside_image_rejected():
    t = S.builtin_templates(1)[0]
    with pytest.raises(ValueError):
        S.overlay_mask(np.zeros((3, 32, 32)), np.array([[-1.0, 3.0], [4, 18], [28, 18]]), t)


def test_affine_recovers_exact_map():
    A = np.array([[1.2, 0.1, 3.0], [-0.2, 0.9, -1.0]])
    src = S.TEMPLATE_ANCHORS
    dst = src @ A[:, :2].T + A[:, 2]
    assert np.allclose(S.affine_from_points(src, dst), A, atol=1e-12)


def test_templates_cover_plausible_area():
    for t in S.builtin_templates(5):
        support = (t.alpha > 0.5).mean()
        assert 0.05 < support < 0.6, t.shape


def test_masked_equals_groundtruth_outside_mask(small):
    keep = small.masks == 0
    assert set(np.unique(small.masks)) <= {0.0, 1.0}
    assert np.array_equal(np.where(keep[:, None], small.masked, 0), np.where(keep[:, None], small.faces, 0))


def test_area_fraction_bounds(small):
    ids = S.generate_identities(4, 3)
    areas = np.array([S.face_area(ids[i]) for i in small.identity])
    frac = small.masks.sum(axis=(1, 2)) / areas
    assert frac.min() >= S.AREA_RANGE[0] and frac.max() <= S.AREA_RANGE[1]


def test_split_is_six_to_one_and_covers_identities(small):
    assert [S.split_for_view(v, 14) for v in range(14)].count("val") == 2
    assert [S.split_for_view(v, 40) for v in range(40)].count("val") == 6
    for split in ("train", "val"):
        assert set(small.subset(split).identity) == set(range(4))


def test_thread_count_does_not_change_output(small):
    par = S.synthesize_dataset(4, 14, 5, master_seed=3, threads=4)
    for name in ("faces", "masks", "masked", "template"):
        assert np.array_equal(getattr(par, name), getattr(small, name))


def test_template_choice_roughly_uniform():
    ds = S.synthesize_dataset(8, 40, 5, master_seed=11)
    counts = np.bincount(ds.template, minlength=5)
    assert counts.min() > 0.5 * len(ds) / 5


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_on_disk_dataset_is_byte_identical(tmp_path):
    a = S.synthesize_dataset(16, 40, 5, master_seed=7, out_dir=tmp_path / "a")
    S.synthesize_dataset(16, 40, 5, master_seed=7, out_dir=tmp_path / "b", threads=3)
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    rows = S.read_manifest(tmp_path / "a")
    assert len(rows) == 16 * 40
    back = S.load_dataset(tmp_path / "a")
    for name in ("faces", "masks", "masked", "identity", "view", "template", "split"):
        assert np.array_equal(getattr(back, name), getattr(a, name))


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        S.read_manifest(tmp_path)
    (tmp_path / S.MANIFEST).write_text("1\t2\n")
    with pytest.raises(ValueError, match="7 fields"):
        S.read_manifest(tmp_path)


def test_counts_must_be_positive():
    with pytest.raises(ValueError):
        S.synthesize_dataset(0, 3, 1, 0)


# -- augmentation ----------------------------------------------------------------

def test_flip_and_translate_contracts(small):
    t = small.triplet(5)
    f = S.augment(t, "flip")
    ff = S.augment(f, "flip")
    assert np.array_equal(ff.groundtruth, t.groundtruth) and np.array_equal(ff.mask, t.mask)
    assert f.mask.sum() == t.mask.sum()
    z = S.augment(t, "translate", 0, 0)
    assert np.array_equal(z.masked, t.masked)
    for aug in (f, S.augment(t, "translate", 3, -2)):
        keep = aug.mask == 0
        assert np.array_equal(aug.masked[:, keep], aug.groundtruth[:, keep])
    with pytest.raises(ValueError):
        S.augment(t, "translate", 4, 0)
    with pytest.raises(ValueError):
        S.augment(t, "rotate")


def test_translate_replicates_edges():
    img = np.arange(16.0).reshape(1, 4, 4)
    out = S._shift(img, 1, 0)
    assert np.array_equal(out[0, :, 0], img[0, :, 0])
    assert np.array_equal(out[0, :, 1:], img[0, :, :3])


def test_batch_augment_matches_per_sample(small):
    rng = np.random.default_rng(0)
    n = 12
    flips = rng.random(n) < 0.5
    shifts = rng.integers(-3, 4, size=(n, 2))
    faces, masks = S.augment_batch((small.faces[:n], small.masks[:n]), flips, shifts)
    for k in range(n):
        t = small.triplet(k)
        if flips[k]:
            t = S.augment(t, "flip")
        t = S.augment(t, "translate", *shifts[k])
        assert np.array_equal(faces[k], t.groundtruth)
        assert np.array_equal(masks[k], t.mask)


# -- netpbm ----------------------------------------------------------------------

def test_netpbm_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    rgb = netpbm.quantize(rng.random((3, 5, 7)))
    gray = (rng.random((5, 7)) < 0.5).astype(float)
    netpbm.write_ppm(tmp_path / "a.ppm", rgb)
    netpbm.write_pgm(tmp_path / "a.pgm", gray)
    assert np.array_equal(netpbm.read_ppm(tmp_path / "a.ppm"), rgb)
    assert np.array_equal(netpbm.read_pgm(tmp_path / "a.pgm"), gray)
