import numpy as np
import pytest

from hdrjoint.imageio import ImageFormatError, load_image, quantize, save_image


@pytest.mark.parametrize("ext", [".png", ".tif", ".ppm"])
def test_16bit_round_trip(tmp_path, rng, ext):
    x = rng.random((17, 23, 3)).astype(np.float32)
    save_image(tmp_path / f"a{ext}", x, bits=16)
    back = load_image(tmp_path / f"a{ext}")
    assert back.shape == x.shape and back.dtype == np.float32
    assert np.abs(back.astype(np.float64) - x).max() <= 1 / 65535


def test_8bit_black_white_exact(tmp_path):
    x = np.zeros((4, 4, 3), np.float32)
    x[:2] = 1.0
    save_image(tmp_path / "bw.png", x, bits=8)
    assert np.array_equal(load_image(tmp_path / "bw.png"), x)


def test_channel_order_preserved(tmp_path):
    x = np.zeros((2, 2, 3), np.float32)
    x[..., 0] = 1.0
    save_image(tmp_path / "red.png", x, bits=8)
    assert np.array_equal(load_image(tmp_path / "red.png"), x)


def test_round_half_up():
    assert quantize(np.array([0.5 / 255, 1.5 / 255]), bits=8).tolist() == [1, 2]
    assert quantize(np.array([-0.3, 1.7]), bits=8).tolist() == [0, 255]


def test_non_image_file(tmp_path):
    p = tmp_path / "notes.png"
    p.write_text("definitely not pixels")
    with pytest.raises(ImageFormatError):
        load_image(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "nope.png")


def test_lossy_extension_rejected(tmp_path):
    with pytest.raises(ImageFormatError):
        save_image(tmp_path / "a.jpg", np.zeros((2, 2, 3)))


def test_gray_file_expanded(tmp_path):
    import cv2

    cv2.imwrite(str(tmp_path / "g.png"), np.full((3, 3), 128, np.uint8))
    img = load_image(tmp_path / "g.png")
    assert img.shape == (3, 3, 3) and np.allclose(img, 128 / 255)
