import math
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from scenessl.data import (
    PLACES8_CLASSES,
    PLACES8_SOURCES,
    ManifestRow,
    SampleManifest,
    ToySceneSpec,
    build_remap_table,
    compose_pretext,
    generate_toy_objects,
    generate_toy_scenes,
    largest_remainder,
    load_image,
    load_images,
    make_folds,
    make_ood_manifest,
    nearest_centroid_accuracy,
    read_listing,
    remap_manifest,
    save_png,
    source_report,
    stratified_split,
)
from scenessl.errors import ContractError, DataError
from scenessl.numerics import Rng

# Places8 counts (Test, Train) per class as published
PLACES8_COUNTS = {
    "bathroom": (5740, 51655),
    "bedroom": (11112, 100012),
    "child's room": (4650, 41849),
    "classroom": (3751, 33763),
    "dressing room": (2432, 21889),
    "living room": (9940, 89458),
    "studio": (1404, 12633),
    "swimming pool": (1505, 13547),
}


def manifest_from_counts(counts, split="train", prefix="r"):
    rows = [ManifestRow(f"{prefix}/{c}/{i}", c, c, split, "stub") for c, n in counts.items() for i in range(n)]
    return SampleManifest("stub", rows)


def listing_manifest(per_category=3, extra=()):
    cats = [o for origs in PLACES8_SOURCES.values() for o in origs] + list(extra)
    rows = [ManifestRow(f"/{c[0]}/{c}/{i:08d}.jpg", c, None, "train", "places") for c in cats for i in range(per_category)]
    return SampleManifest("listing", rows)


# -- remap table ----------------------------------------------------------

def test_table_has_23_categories_onto_8_classes():
    t = build_remap_table()
    assert len(t) == 23
    assert set(t.mapping.values()) == set(PLACES8_CLASSES) and len(PLACES8_CLASSES) == 8


@pytest.mark.parametrize("orig,cls", [
    ("hotel room", "bedroom"),
    ("kindergarden classroom", "classroom"),
    ("television studio", "studio"),
    ("shower", "bathroom"),
    ("jacuzzi", "swimming pool"),
    ("nursery", "child's room"),
    ("closet", "dressing room"),
    ("waiting room", "living room"),
])
def test_table_entries(orig, cls):
    assert build_remap_table().lookup(orig) == cls


def test_lookup_normalises_places_style_names():
    t = build_remap_table()
    assert t.lookup("/b/bedroom") == "bedroom"
    assert t.lookup("/j/jacuzzi/indoor") == "swimming pool"
    assert t.lookup("childs_room") == "child's room"
    assert t.lookup("/s/swimming_pool/outdoor") is None


def test_remap_three_rows():
    m = SampleManifest("m", [ManifestRow(f"u{i}", c) for i, c in enumerate(["bedroom", "shower", "volcano"])])
    out = remap_manifest(m, build_remap_table())
    assert [r.mapped_class for r in out.rows] == ["bedroom", "bathroom", None]
    assert out.unmapped_count() == 1


def test_full_listing_maps_to_exactly_8_classes():
    out = remap_manifest(listing_manifest(extra=("volcano", "airport terminal")), build_remap_table())
    assert out.classes() == sorted(PLACES8_CLASSES)
    assert out.unmapped_count() == 6
    assert all(r.split == "none" for r in out.rows if not r.mapped)


def test_remap_is_idempotent():
    t = build_remap_table()
    once = remap_manifest(listing_manifest(extra=("volcano",)), t)
    assert remap_manifest(once, t).rows == once.rows


def test_remap_nothing_matched_is_an_error():
    with pytest.raises(DataError):
        remap_manifest(SampleManifest("m", [ManifestRow("u", "volcano")]), build_remap_table())


# -- manifest format --------------------------------------------------------

@given(st.lists(st.tuples(st.text("abcdé/_ .'", min_size=1, max_size=8), st.sampled_from([None, "x", "y z"]),
                          st.sampled_from(["train", "val", "test", "none"]), st.booleans()), max_size=8))
def test_manifest_round_trip_is_bit_exact(items):
    rows = [ManifestRow(f"img{i}-{u}", u, m, s, "src", syn) for i, (u, m, s, syn) in enumerate(items)]
    m = SampleManifest("data set", rows, {"seed": "3"})
    text = m.dumps()
    back = SampleManifest.loads(text)
    assert back.rows == m.rows and back.dumps() == text


def test_manifest_detects_tampering():
    text = manifest_from_counts({"a": 2}).dumps()
    with pytest.raises(DataError, match="checksum"):
        SampleManifest.loads(text.replace("r/a/1", "r/a/9"))


def test_manifest_rejects_duplicate_uri():
    m = SampleManifest("m", [ManifestRow("u", "a", "a", "train"), ManifestRow("u", "a", "a", "test")])
    with pytest.raises(DataError):
        m.validate()


# -- stratified split -------------------------------------------------------

def test_split_60_40():
    out = stratified_split(manifest_from_counts({"a": 60, "b": 40}), 0.1, Rng(0))
    assert out.class_counts("test") == Counter({"a": 6, "b": 4})


def test_split_reproduces_published_test_counts():
    pool = {c: test + train for c, (test, train) in PLACES8_COUNTS.items()}
    quota = largest_remainder(pool, Fraction(1, 10))
    for c, (test, _) in PLACES8_COUNTS.items():
        assert abs(quota[c] - test) <= 1, c


def test_split_is_deterministic():
    m = manifest_from_counts({"a": 33, "b": 17})
    assert stratified_split(m, 0.2, Rng(4)).rows == stratified_split(m, 0.2, Rng(4)).rows


def test_split_errors():
    with pytest.raises(DataError, match="'b'"):
        stratified_split(manifest_from_counts({"a": 20, "b": 5}), 0.1, Rng(0))
    with pytest.raises(ContractError):
        stratified_split(manifest_from_counts({"a": 20}), 1.0, Rng(0))


@given(counts=st.dictionaries(st.sampled_from("abcdefgh"), st.integers(10, 80), min_size=1),
       frac=st.sampled_from([0.1, 0.15, 0.2, 0.25]), seed=st.integers(0, 1000))
def test_split_properties(counts, frac, seed):
    m = manifest_from_counts(counts)
    out = stratified_split(m, frac, Rng(seed))
    test = out.class_counts("test")
    for c, n in counts.items():
        assert abs(test[c] - n * frac) <= 1
    assert sum(test.values()) == math.floor(sum(counts.values()) * Fraction(frac).limit_denominator(10**6) + Fraction(1, 2))
    assert {r.uri for r in out.rows} == {r.uri for r in m.rows}
    assert all(r.split in ("train", "test") for r in out.rows)


# -- folds ------------------------------------------------------------------

def fold_histograms(m, plan, r):
    return [Counter(m.rows[i].mapped_class for i in plan.split(r, f)[1]) for f in range(plan.k)]


def test_folds_fifty_rows():
    m = manifest_from_counts({c: 10 for c in "abcde"})
    plan = make_folds(m, 5, 3, Rng(0))
    for r in range(3):
        for h in fold_histograms(m, plan, r):
            assert h == Counter({c: 2 for c in "abcde"})


def test_repetitions_reshuffle_but_keep_histograms():
    m = manifest_from_counts({"a": 13, "b": 9, "c": 7})
    plan = make_folds(m, 5, 2, Rng(1))
    assert not np.array_equal(plan.assignments[0], plan.assignments[1])
    assert fold_histograms(m, plan, 0) == fold_histograms(m, plan, 1)


@given(counts=st.dictionaries(st.sampled_from("abcdef"), st.integers(5, 30), min_size=1),
       k=st.integers(2, 5), seed=st.integers(0, 1000))
def test_fold_partition_properties(counts, k, seed):
    m = manifest_from_counts(counts)
    plan = make_folds(m, k, 2, Rng(seed))
    for r in range(2):
        held = [set(plan.split(r, f)[1].tolist()) for f in range(k)]
        assert set().union(*held) == set(range(len(m)))
        assert sum(len(h) for h in held) == len(m)
        for c in counts:
            sizes = [sum(m.rows[i].mapped_class == c for i in h) for h in held]
            assert max(sizes) - min(sizes) <= 1
        train, test = plan.split(r, 0)
        assert not set(train.tolist()) & set(test.tolist())


def test_folds_class_smaller_than_k():
    with pytest.raises(DataError):
        make_folds(manifest_from_counts({"a": 10, "b": 3}), 5, 1, Rng(0))


# -- pretext composition and OOD manifest ------------------------------------

def test_compose_pretext_modes():
    real = SampleManifest("p", [ManifestRow(f"p{i}", "x", None, "train", "placesStub") for i in range(100)])
    synth = SampleManifest("h", [ManifestRow(f"h{i}", "x", None, "none", "hypersimStub", True) for i in range(50)])
    assert len(compose_pretext([real, synth], "real")) == 100
    both = compose_pretext([synth, real], "all")
    assert len(both) == 150
    assert [s for s, _, _ in source_report(both)] == ["placesStub", "hypersimStub"]
    with pytest.raises(DataError):
        compose_pretext([synth], "real")


def test_source_report_follows_pretext_order():
    rows = [ManifestRow(f"{s}{i}", "x", None, "train", s, s != "places") for s in
            ("openrooms", "hypersim", "places", "interiornet") for i in range(2)]
    assert [s for s, _, _ in source_report(SampleManifest("m", rows))] == ["places", "interiornet", "hypersim",
                                                                           "openrooms"]


def ood_available(n=10):
    return {c: {s: [f"{s}/{c}/{i}" for i in range(n)] for s in ("google", "bing", "dollarstreet")}
            for c in PLACES8_CLASSES}


def test_ood_manifest_has_80_rows_in_4_3_3():
    m = make_ood_manifest(ood_available())
    assert len(m) == 80
    assert all(r.split == "val" for r in m.rows)
    for c in PLACES8_CLASSES:
        per = Counter(r.source_tag for r in m.rows if r.mapped_class == c)
        assert (per["google"], per["bing"], per["dollarstreet"]) == (4, 3, 3)


def test_ood_manifest_short_source_names_class_and_source():
    avail = ood_available()
    avail["studio"]["google"] = avail["studio"]["google"][:3]
    with pytest.raises(DataError, match="studio.*google"):
        make_ood_manifest(avail)


# -- images -----------------------------------------------------------------

def test_white_pixel_png_loads_as_ones(tmp_path):
    p = tmp_path / "w.png"
    Image.new("RGB", (1, 1), (255, 255, 255)).save(p)
    img = load_image(p)
    assert img.shape == (3, 1, 1) and np.all(img == 1.0)


def test_resize_on_load_is_deterministic(tmp_path):
    p = tmp_path / "a.png"
    save_png(Rng(0).uniform(0, 1, (3, 20, 30)), p)
    a, b = load_image(p, (8, 8)), load_image(p, (8, 8))
    assert a.shape == (3, 8, 8) and np.array_equal(a, b)


def test_corrupt_file_is_skipped_and_counted(tmp_path, caplog):
    uris = []
    for i in range(10):
        p = tmp_path / f"{i}.png"
        if i == 4:
            p.write_bytes(b"not a png")
        else:
            save_png(np.full((3, 4, 4), i / 10), p)
        uris.append(p.name)
    images, kept, skipped = load_images(uris, (4, 4), root=tmp_path, workers=3)
    assert len(images) == 9 and skipped == 1 and 4 not in kept
    assert images[4][0, 0, 0] == pytest.approx(0.5, abs=1 / 255)
    assert any("skipping" in r.message for r in caplog.records)


def test_read_listing_formats(tmp_path):
    (tmp_path / "places.txt").write_text("/b/bedroom/00000001.jpg 3\n/s/shower/00000002.jpg 7\n")
    m = read_listing(tmp_path / "places.txt")
    assert [r.original_category for r in m.rows] == ["b/bedroom", "s/shower"]
    assert remap_manifest(m, build_remap_table()).classes() == ["bathroom", "bedroom"]
    (tmp_path / "pairs.tsv").write_text("x.png\tnursery\tval\n")
    assert read_listing(tmp_path / "pairs.tsv").rows[0].split == "val"
    with pytest.raises(DataError):
        read_listing(tmp_path / "missing")


# -- toy scenes -------------------------------------------------------------

def test_toy_scene_counts_and_splits():
    ds = generate_toy_scenes(ToySceneSpec(per_class=120, image_size=64))
    assert ds.images.shape == (960, 3, 64, 64)
    counts = ds.manifest.class_counts()
    assert len(counts) == 8 and set(counts.values()) == {120}
    splits = Counter(r.split for r in ds.manifest.rows)
    assert set(splits) == {"train", "val", "test"} and sum(splits.values()) == 960
    assert remap_manifest(ds.manifest, build_remap_table()).rows == ds.manifest.rows


def test_toy_scenes_are_byte_identical_and_round_trip(tmp_path):
    spec = ToySceneSpec(per_class=12, image_size=16)
    a = generate_toy_scenes(spec, root=tmp_path)
    b = generate_toy_scenes(spec)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.manifest.dumps() == b.manifest.dumps()
    first = a.manifest.rows[0].uri
    np.testing.assert_array_equal(load_image(first, root=tmp_path), a.images[0])
    assert SampleManifest.read(tmp_path / "manifest.tsv").rows == a.manifest.rows


def test_toy_classes_separable_by_nearest_centroid():
    ds = generate_toy_scenes(ToySceneSpec(per_class=40, image_size=32))
    train = np.array([r.split == "train" for r in ds.manifest.rows])
    acc = nearest_centroid_accuracy(ds.images[train], ds.labels[train], ds.images[~train], ds.labels[~train])
    assert acc > 1 / 8 + 0.2


def test_toy_class_parameter_ranges_disjoint():
    spec = ToySceneSpec()
    for key in ("angle", "hue"):
        ranges = sorted(spec.class_params(c)[key] for c in range(spec.classes))
        assert all(hi <= lo2 for (_, hi), (lo2, _) in zip(ranges, ranges[1:]))


def test_toy_objects():
    ds = generate_toy_objects(per_class=4, image_size=16)
    assert ds.images.shape == (24, 3, 16, 16) and len(ds.class_names) == 6
    assert {r.split for r in ds.manifest.rows} == {"train"}
