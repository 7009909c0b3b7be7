import numpy as np
import pytest

from dynsplat import fileio


def test_tensor_roundtrip(tmp_path):
    arr = np.arange(24, dtype=np.float64).reshape(2, 3, 4) / 7.0
    p = tmp_path / "t.ggdt"
    fileio.save_tensor(p, arr)
    back = fileio.load_tensor(p)
    assert back.shape == (2, 3, 4)
    np.testing.assert_array_equal(back, arr.astype(np.float32).astype(np.float64))


def test_tensor_header(tmp_path):
    p = tmp_path / "t.ggdt"
    fileio.save_tensor(p, np.ones((3, 5)))
    raw = p.read_bytes()
    assert raw[:4] == b"GGDT"
    assert int.from_bytes(raw[4:8], "little") == 2
    assert int.from_bytes(raw[8:12], "little") == 3
    assert int.from_bytes(raw[12:16], "little") == 5
    assert len(raw) == 16 + 4 * 15


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.ggdt"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(fileio.ContainerError, match="magic"):
        fileio.load_tensor(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "t.ggdt"
    fileio.save_tensor(p, np.ones(10))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(fileio.ContainerError, match="truncated"):
        fileio.load_tensor(p)


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"a": np.random.default_rng(0).random((4, 2)),
              "b_scale": np.array([1.5])}
    fileio.save_checkpoint(tmp_path / "ckpt", arrays)
    assert (tmp_path / "ckpt" / "manifest.txt").is_file()
    back = fileio.load_checkpoint(tmp_path / "ckpt")
    assert set(back) == {"a", "b_scale"}
    np.testing.assert_allclose(back["a"], arrays["a"], atol=1e-7)


def test_pgm_roundtrip(tmp_path):
    mask = (np.random.default_rng(1).random((9, 7)) > 0.5)
    p = tmp_path / "m.pgm"
    fileio.save_pgm(p, mask)
    back = fileio.load_pgm(p)
    np.testing.assert_array_equal(back > 0.5, mask)


def test_ppm_roundtrip(tmp_path):
    img = np.random.default_rng(2).random((6, 8, 3))
    p = tmp_path / "i.ppm"
    fileio.save_ppm(p, img)
    back = fileio.load_ppm(p)
    assert back.shape == (6, 8, 3)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9


def test_load_image_png(tmp_path):
    from PIL import Image

    img = (np.random.default_rng(3).random((8, 8, 3)) * 255).astype(np.uint8)
    p = tmp_path / "i.png"
    Image.fromarray(img).save(p)
    back = fileio.load_image(p)
    np.testing.assert_allclose(back, img / 255.0, atol=1e-9)
