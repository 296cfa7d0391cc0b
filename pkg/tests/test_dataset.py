import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from builtcount.dataset import (HIGH, LOW, MEDIUM, ImageTile, Manifest, ManifestEntry, ManifestError,
                                ManifestParseError, augment_counting, augment_patch, band_of,
                                built_up_ratio, built_up_table, ground_resolution, load_manifest,
                                load_tile, rotate_reflect, tile_extent_meters, write_manifest)

from conftest import make_tile


def _write_images(tmp_path, n):
    for i in range(n):
        Image.fromarray(np.full((8, 8, 3), i * 20, np.uint8)).save(tmp_path / f"img{i}.png")
        Image.fromarray(np.full((8, 8), 255 * (i % 2), np.uint8)).save(tmp_path / f"mask{i}.png")


def test_load_three_rows(tmp_path):
    _write_images(tmp_path, 3)
    text = ("# a comment\n"
            "id\timage_path\tcount\tsplit\tmask_path\tbounds\n"
            "a\timg0.png\t4\ttrain\n"
            "b\timg1.png\t0\tval\tmask1.png\n"
            "c\timg2.png\t61\ttest\t-\t30.0,30.1,31.2,31.3\n")
    (tmp_path / "m.tsv").write_text(text)
    m = load_manifest(tmp_path / "m.tsv")
    assert len(m) == 3
    assert [e.count for e in m] == [4, 0, 61]
    assert m.entries[1].mask_path == tmp_path / "mask1.png"
    assert m.entries[2].geo_bounds == (30.0, 30.1, 31.2, 31.3)
    assert len(m.split("train")) == 1


def test_negative_count_names_line(tmp_path):
    _write_images(tmp_path, 2)
    (tmp_path / "m.tsv").write_text("a\timg0.png\t3\ttrain\n# c\nb\timg1.png\t-2\ttrain\n")
    with pytest.raises(ManifestParseError) as exc:
        load_manifest(tmp_path / "m.tsv")
    assert exc.value.lineno == 3
    assert ":3:" in str(exc.value)


def test_empty_manifest(tmp_path):
    (tmp_path / "m.tsv").write_text("")
    assert len(load_manifest(tmp_path / "m.tsv")) == 0


def test_missing_file_and_bad_paths(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "nope.tsv")
    (tmp_path / "m.tsv").write_text("a\tmissing.png\t3\ttrain\n")
    with pytest.raises(ManifestError, match="not a readable file"):
        load_manifest(tmp_path / "m.tsv")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    (tmp_path / "m.tsv").write_text("a\tjunk.png\t3\ttrain\n")
    with pytest.raises(ManifestError, match="not a readable image"):
        load_manifest(tmp_path / "m.tsv")


@pytest.mark.parametrize("row", ["a\timg0.png\tx\ttrain", "a\timg0.png\t3\tholdout", "a\timg0.png",
                                 "a\timg0.png\t3\ttrain\t-\t1,2,3"])
def test_malformed_rows(tmp_path, row):
    _write_images(tmp_path, 1)
    (tmp_path / "m.tsv").write_text(row + "\n")
    with pytest.raises(ManifestParseError):
        load_manifest(tmp_path / "m.tsv")


def test_duplicate_ids_rejected(tmp_path):
    _write_images(tmp_path, 2)
    (tmp_path / "m.tsv").write_text("a\timg0.png\t1\ttrain\na\timg1.png\t2\ttest\n")
    with pytest.raises(ManifestParseError, match="duplicate"):
        load_manifest(tmp_path / "m.tsv")


def test_roundtrip_idempotent(tmp_path):
    _write_images(tmp_path, 3)
    entries = (ManifestEntry("a", tmp_path / "img0.png", 1, "train"),
               ManifestEntry("b", tmp_path / "img1.png", 40, "val", tmp_path / "mask1.png"),
               ManifestEntry("c", tmp_path / "img2.png", 99, "test", None, (1.0, 2.0, 3.0, 4.0)))
    write_manifest(Manifest(entries), tmp_path / "m1.tsv")
    m1 = load_manifest(tmp_path / "m1.tsv")
    write_manifest(m1, tmp_path / "m2.tsv")
    m2 = load_manifest(tmp_path / "m2.tsv")
    assert m1.entries == entries == m2.entries
    assert (tmp_path / "m1.tsv").read_text() == (tmp_path / "m2.tsv").read_text()


def test_load_tile_reads_mask(tmp_path):
    _write_images(tmp_path, 2)
    tile = load_tile(ManifestEntry("b", tmp_path / "img1.png", 2, "train", tmp_path / "mask1.png"))
    assert tile.pixels.shape == (8, 8, 3) and tile.mask.all()


@pytest.mark.parametrize("count,band", [(30, LOW), (31, MEDIUM), (61, HIGH), (0, LOW), (60, MEDIUM), (10**6, HIGH)])
def test_band_of(count, band):
    assert band_of(count) == band


def test_band_of_negative():
    with pytest.raises(ValueError):
        band_of(-1)


@given(st.integers(min_value=0, max_value=10**7))
def test_bands_partition(c):
    assert c in band_of(c)
    assert sum(c in b for b in (LOW, MEDIUM, HIGH)) == 1


def test_tile_extent():
    assert tile_extent_meters(336, 0.3) == pytest.approx(100.8)
    assert tile_extent_meters(1008, 0.3) == pytest.approx(302.4)
    assert tile_extent_meters(3024, 0.3) == pytest.approx(907.2)
    assert tile_extent_meters(1, 1.0) == 1.0
    with pytest.raises(ValueError):
        tile_extent_meters(0, 0.3)
    with pytest.raises(ValueError):
        tile_extent_meters(10, -1)


def test_zoom19_resolution_is_about_0_3m():
    assert ground_resolution(0.0, 19) == pytest.approx(0.2986, abs=1e-4)


def test_tile_invariants():
    px = np.zeros((4, 4, 3), np.uint8)
    with pytest.raises(ValueError):
        ImageTile("x", px, -1)
    with pytest.raises(ValueError):
        ImageTile("x", px, 1.5)
    with pytest.raises(ValueError):
        ImageTile("x", px, 1, mask=np.zeros((3, 4)))
    with pytest.raises(ValueError):
        ImageTile("x", px, 1, meters_per_pixel=0)
    assert ImageTile("x", px, 2).meters_per_pixel == 0.3


def test_augment_counting_labels_and_shapes():
    tile = make_tile(336, 336, count=7)
    out = augment_counting(tile)
    assert len(out) == 5
    assert all(t.count == 7 for t in out)
    assert all(t.pixels.shape == (336, 336, 3) for t in out)
    assert len({t.pixels.tobytes() for t in out}) == 5


def test_augment_counting_transforms_mask_with_pixels():
    tile = make_tile(40, 40)
    for t, op in zip(augment_counting(tile), [lambda a: a, np.fliplr, np.flipud,
                                              lambda a: np.rot90(a, 1), lambda a: np.rot90(a, 3)]):
        assert np.array_equal(t.mask, op(tile.mask))
        assert np.array_equal(t.pixels, op(tile.pixels))
        assert t.mask.sum() == tile.mask.sum()


def test_augment_counting_twice_is_same_set():
    tile = make_tile(24, 24)
    first = {t.pixels.tobytes() for t in augment_counting(tile)}
    # the augmented set of each isometric image spans the same dihedral orbit members
    again = {t.pixels.tobytes() for t in augment_counting(augment_counting(tile)[0])}
    assert first == again


def test_augment_patch():
    r = np.random.default_rng(0)
    patch = ImageTile("p", r.integers(0, 256, (64, 64, 3), dtype=np.uint8), 1)
    out = augment_patch(patch)
    assert len(out) == 5 and all(t.count == 1 for t in out)
    assert all(t.pixels.shape == (64, 64, 3) for t in out)
    zero = augment_patch(ImageTile("z", np.zeros((64, 64, 3), np.uint8), 0))
    assert all(not t.pixels.any() for t in zero)
    with pytest.raises(ValueError):
        augment_patch(ImageTile("r", np.zeros((64, 32, 3), np.uint8), 0))


def test_rotate45_matches_inverse_mapping_oracle():
    r = np.random.default_rng(3)
    img = r.random((64, 64)).astype(np.float32)
    # oracle: each output pixel samples the input at the inverse-rotated position about the centre
    from scipy import ndimage
    yy, xx = np.mgrid[0:64, 0:64].astype(float)
    c, t = 31.5, np.deg2rad(-45)
    sy = c + np.cos(t) * (yy - c) - np.sin(t) * (xx - c)
    sx = c + np.sin(t) * (yy - c) + np.cos(t) * (xx - c)
    oracle = ndimage.map_coordinates(img, [sy, sx], order=1)
    ours = rotate_reflect(img, 45)
    assert ours.shape == (64, 64)
    inner = np.hypot(yy - c, xx - c) < 28  # away from the reflected corners
    assert np.abs(ours[inner] - oracle[inner]).max() < 1e-5
    smooth = np.sin(yy / 7.0) + np.cos(xx / 5.0)
    back = rotate_reflect(rotate_reflect(smooth, 45), -45)
    assert np.abs(back - smooth)[np.hypot(yy - c, xx - c) < 20].max() < 0.05


def test_built_up_ratio():
    assert built_up_ratio(np.ones((4, 4))) == 1.0
    assert built_up_ratio(np.zeros((4, 4))) == 0.0
    assert built_up_ratio(np.array([[0.5, 0.2], [0.1, 0.49]])) == 0.25
    with pytest.raises(ValueError):
        built_up_ratio(np.ones((2, 2)), 1.5)


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.floats(0, 1), st.floats(0, 1))
def test_built_up_ratio_monotone(values, t1, t2):
    lo, hi = sorted((t1, t2))
    arr = np.array(values)
    assert built_up_ratio(arr, hi) <= built_up_ratio(arr, lo)
    assert built_up_ratio(arr, lo) == np.mean(arr >= lo)


def test_built_up_table_counts_every_image():
    table = built_up_table([0.05, 0.15, 0.35, 0.9], [3, 40, 70, 10])
    assert table.sum() == 4 and table.shape == (5, 3)
