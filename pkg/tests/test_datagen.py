import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from dadet import datagen as dg
from dadet.datagen import Domain, DomainParams, generate_scene, generate_split


def _scan_box(mask):
    rows = [i for i in range(mask.shape[0]) if mask[i].any()]
    cols = [j for j in range(mask.shape[1]) if mask[:, j].any()]
    return [cols[0], rows[0], cols[-1] + 1, rows[-1] + 1]


@pytest.mark.parametrize("domain", list(Domain))
def test_scene_deterministic(domain):
    a, b = generate_scene(99, domain), generate_scene(99, domain)
    assert a == b and a.digest() == b.digest()


def test_zero_puffs():
    s = generate_scene(5, Domain.TARGET, DomainParams(puff_count=(0, 0), texture_noise=0.5))
    assert s.boxes.shape == (0, 4) and not s.mask.any()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**63 - 1), st.sampled_from(list(Domain)))
def test_single_puff_box_is_tight(seed, domain):
    params = DomainParams(puff_count=(1, 1), texture_noise=0.6, gamma=0.5, clutter_density=3.0)
    s = generate_scene(seed, domain, params)
    assert s.boxes.tolist() == [_scan_box(s.mask)]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**63 - 1), st.sampled_from(list(Domain)))
def test_scene_invariants(seed, domain):
    s = generate_scene(seed, domain)
    h, w = s.image.shape
    assert s.image.min() >= 0 and s.image.max() <= 1
    assert set(np.unique(s.mask)) <= {0, 1}
    covered = np.zeros_like(s.mask)
    for x0, y0, x1, y1 in s.boxes.astype(int):
        assert 0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h
        box = s.mask[y0:y1, x0:x1]
        # every edge row/column of a tight box touches the mask
        assert box[0].any() and box[-1].any() and box[:, 0].any() and box[:, -1].any()
        covered[y0:y1, x0:x1] = 1
    assert not (s.mask & (1 - covered)).any()


def test_domains_share_geometry():
    a, b = generate_scene(7, Domain.SOURCE), generate_scene(7, Domain.TARGET)
    assert np.array_equal(a.boxes, b.boxes) and np.array_equal(a.mask, b.mask)
    assert not np.array_equal(a.image, b.image)


def test_split_sizes_and_disjoint_seeds():
    ds = generate_split(3, {"source_train": 100, "target_train": 20, "target_test": 50})
    assert len(ds) == 170
    assert [len(ds[k]) for k in dg.SPLITS] == [100, 20, 50, 0]
    seeds = [s.seed for k in dg.SPLITS for s in ds[k]]
    assert len(set(seeds)) == len(seeds)
    assert all(s.domain == Domain.TARGET for s in ds["target_test"])


def test_empty_split():
    assert len(generate_split(3, {"source_train": 0, "target_train": 0, "target_test": 0})) == 0


def test_split_checksums_repeat():
    counts = {"source_train": 5, "target_train": 3, "target_test": 4}
    a, b = generate_split(11, counts), generate_split(11, counts)
    assert a.split_checksums() == b.split_checksums() and a.checksum() == b.checksum()
    assert generate_split(12, counts).checksum() != a.checksum()


def test_invalid_params_and_counts():
    with pytest.raises(ValueError, match="puff_radius"):
        DomainParams(puff_radius=(3.0, 1.0))
    with pytest.raises(ValueError):
        DomainParams(texture_noise=-1)
    with pytest.raises(ValueError, match="unknown split"):
        generate_split(0, {"bogus": 1})


def test_pixel_mean_probe_separates_domains():
    ds = generate_split(21, {"source_train": 200, "target_train": 200})
    scenes = ds["source_train"] + ds["target_train"]
    x = np.array([s.image.mean() for s in scenes])
    y = np.array([int(s.domain) for s in scenes], dtype=float)
    x = (x - x.mean()) / x.std()
    train = np.arange(len(x)) % 2 == 0

    def nll(p):
        z = p[0] * x[train] + p[1]
        return np.sum(np.logaddexp(0, z) - y[train] * z)

    p = minimize(nll, np.zeros(2)).x
    acc = np.mean(((p[0] * x[~train] + p[1]) > 0) == (y[~train] == 1))
    assert acc > 0.8


# -- container ------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny():
    return generate_split(4, {"source_train": 3, "target_train": 2, "target_test": 2, "source_test": 1})


def test_round_trip_bitwise(tiny, tmp_path):
    path = tmp_path / "d.bin"
    dg.export_scenes(tiny, path)
    back = dg.import_scenes(path)
    assert back == tiny and back.checksum() == tiny.checksum()
    assert dg.dumps(back) == path.read_bytes()


def test_rle_round_trip_edge_cases():
    for mask in (np.ones((4, 4), np.uint8), np.zeros((4, 4), np.uint8), np.eye(4, dtype=np.uint8)):
        assert np.array_equal(dg._rle_decode(dg._rle_encode(mask), mask.shape), mask)


def test_truncated_file(tiny):
    raw = dg.dumps(tiny)
    for cut in (3, 10, 20, len(raw) // 2, len(raw) - 1):
        with pytest.raises(dg.DatasetFormatError) as err:
            dg.loads(raw[:cut])
        assert err.value.field


def test_mismatched_dims_named(tiny):
    raw = bytearray(dg.dumps(tiny))
    raw[6:10] = (32).to_bytes(4, "little")
    with pytest.raises(dg.DatasetFormatError) as err:
        dg.loads(bytes(raw))
    assert "height" in err.value.field or "scene[0]" in err.value.field


def test_bad_magic_and_trailing(tiny):
    raw = dg.dumps(tiny)
    with pytest.raises(dg.DatasetFormatError, match="magic"):
        dg.loads(b"XXXXXX" + raw[6:])
    with pytest.raises(dg.DatasetFormatError, match="scene_count"):
        dg.loads(raw + b"\0")


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=64))
def test_garbage_never_crashes(blob):
    try:
        dg.loads(dg.MAGIC + blob)
    except dg.DatasetFormatError:
        pass
