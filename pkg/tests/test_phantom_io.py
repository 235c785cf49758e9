import numpy as np
import pytest

from lfsr import phantom_io as P
from lfsr.metrics import BoundingBox


class TestPhantoms:
    def test_deterministic(self):
        cfg = P.PhantomConfig(image_size=64, seed=4)
        a, b = P.gen_phantom(cfg, 3), P.gen_phantom(cfg, 3)
        assert a.hr.tobytes() == b.hr.tobytes() and a.lesion_mask.tobytes() == b.lesion_mask.tobytes()
        assert a.bbox == b.bbox
        assert not np.array_equal(a.hr, P.gen_phantom(cfg, 4).hr)

    def test_bbox_tight(self):
        cfg = P.PhantomConfig(seed=2)
        for i in range(10):
            s = P.gen_phantom(cfg, i)
            m, b = s.lesion_mask > 0, s.bbox
            assert m[b.row0].any() and m[b.row1 - 1].any()
            assert m[:, b.col0].any() and m[:, b.col1 - 1].any()
            assert m[b.row0 : b.row1, b.col0 : b.col1].sum() == m.sum()

    def test_range_and_contrast(self):
        cfg = P.PhantomConfig(seed=7)
        margins = []
        for i in range(100):
            s = P.gen_phantom(cfg, i)
            assert s.hr.min() >= -1.0 and s.hr.max() <= 1.0
            m = s.lesion_mask > 0
            margins.append(s.hr[m].mean() - s.hr[~m].mean())
        assert min(margins) >= 0.3

    def test_radius_bounds(self):
        cfg = P.PhantomConfig(seed=9)
        for i in range(20):
            b = P.gen_phantom(cfg, i).bbox
            assert max(b.height, b.width) <= 2 * 20 + 1
            assert min(b.height, b.width) >= 2 * 6 - 1

    def test_split_stable(self):
        train, val = P.split_ids(range(200))
        assert (len(train), len(val)) == (160, 40)
        assert val[:5] == P.split_ids(range(200))[1][:5]

    def test_config_validation(self):
        with pytest.raises(P.PhantomError, match="power of two"):
            P.PhantomConfig(image_size=100)

    def test_placement_failure(self):
        cfg = P.PhantomConfig(image_size=16, radius_min=20, radius_max=30)
        with pytest.raises(P.PhantomError, match="100 tries"):
            P.gen_phantom(cfg, 0)


class TestContainer:
    def test_round_trip(self, tmp_path, rng):
        named = {"a": rng.normal(size=(3, 4, 2)), "b.w": rng.normal(size=(7,)), "s": np.array(2.5)}
        P.save_tensors(tmp_path / "x.lftb", named)
        back = P.load_tensors(tmp_path / "x.lftb")
        assert list(back) == list(named)
        for k in named:
            assert back[k].shape == named[k].shape
            assert back[k].tobytes() == named[k].tobytes()
        assert back["s"].ndim == 0 and float(back["s"]) == 2.5

    def test_layout(self, tmp_path):
        P.save_tensors(tmp_path / "x.lftb", {"ab": np.array([[1.0, 2.0]])})
        raw = (tmp_path / "x.lftb").read_bytes()
        expected = (b"LFTB" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + b"ab"
                    + (2).to_bytes(4, "little") + (1).to_bytes(8, "little") + (2).to_bytes(8, "little")
                    + np.array([1.0, 2.0], dtype="<f8").tobytes())
        assert raw == expected

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.lftb").write_bytes(b"NOPE\x01\x00\x00\x00")
        with pytest.raises(P.ContainerError, match="magic"):
            P.load_tensors(tmp_path / "x.lftb")

    def test_truncated(self, tmp_path, rng):
        P.save_tensors(tmp_path / "x.lftb", {"a": rng.normal(size=(4, 4))})
        raw = (tmp_path / "x.lftb").read_bytes()
        (tmp_path / "y.lftb").write_bytes(raw[:-9])
        with pytest.raises(P.ContainerError, match="offset"):
            P.load_tensors(tmp_path / "y.lftb")

    def test_bad_name(self, tmp_path):
        with pytest.raises(P.ContainerError):
            P.save_tensors(tmp_path / "x.lftb", {"": np.zeros(1)})


class TestPGM:
    def test_extremes_and_mid(self, tmp_path):
        assert P.export_pgm(np.full((3, 4), -1.0), tmp_path / "a.pgm") == 0
        assert np.all(P.read_pgm(tmp_path / "a.pgm") == 0)
        P.export_pgm(np.full((3, 4), 1.0), tmp_path / "b.pgm")
        assert np.all(P.read_pgm(tmp_path / "b.pgm") == 65535)
        P.export_pgm(np.zeros((2, 2)), tmp_path / "c.pgm")
        assert np.all(P.read_pgm(tmp_path / "c.pgm") == 32767)

    def test_clipping_counted(self, tmp_path):
        img = np.array([[-2.0, 0.0], [0.5, 3.0]])
        assert P.export_pgm(img, tmp_path / "a.pgm") == 2
        assert P.read_pgm(tmp_path / "a.pgm").shape == (2, 2)

    def test_header(self, tmp_path):
        P.export_pgm(np.zeros((3, 5)), tmp_path / "a.pgm")
        assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n5 3\n65535\n")

    def test_rejects_3d(self, tmp_path):
        with pytest.raises(ValueError):
            P.export_pgm(np.zeros((2, 2, 2)), tmp_path / "a.pgm")


def test_dataset_round_trip(tmp_path):
    cfg = P.PhantomConfig(image_size=32, n_samples=3, seed=1, radius_min=3, radius_max=5)
    samples = P.generate(cfg)
    for s in samples:
        P.save_sample(s, tmp_path)
    P.write_manifest(samples, tmp_path)
    back = P.load_dataset(tmp_path)
    assert [s.id for s in back] == [0, 1, 2]
    for a, b in zip(samples, back):
        assert a.bbox == b.bbox and a.hr.tobytes() == b.hr.tobytes()
    assert isinstance(back[0].bbox, BoundingBox)
