import numpy as np
import pytest

from tests.conftest import perturb
from tools.visualize import heat_source, layer_k_map, to_gray, visualize_conduction, write_pgm


def test_heat_source_bounds():
    u = heat_source((5, 7), (6, 4))
    assert u[4, 6] == 1.0 and u.sum() == 1.0
    with pytest.raises(ValueError, match="超出"):
        heat_source((5, 7), (7, 0))
    with pytest.raises(ValueError):
        heat_source((5, 7), (0, -1))


def test_to_gray_scaling():
    img = to_gray(np.array([[2.0, 1.0], [-0.5, 0.0]]))
    assert img.dtype == np.uint8
    np.testing.assert_array_equal(img, [[255, 128], [0, 0]])
    assert np.all(to_gray(np.full((2, 2), -1.0)) == 0)


def test_spreads_symmetrically_and_cools():
    frames = visualize_conduction((16, 16), [0, 1, 5, 20], k=1.0, extent=33)
    first = frames[0].image
    assert first[16, 16] == 255 and first.sum() == 255
    peaks = [f.raw_max for f in frames]
    assert all(a > b for a, b in zip(peaks, peaks[1:]))
    for f in frames[1:]:
        np.testing.assert_allclose(f.field, f.field.T, atol=1e-12)
        np.testing.assert_allclose(f.field, f.field[::-1, ::-1], atol=1e-12)
        assert f.field.sum() == pytest.approx(1.0)


def test_long_time_is_uniform():
    (frame,) = visualize_conduction((0, 0), [1e5], k=1.0, extent=9)
    assert np.all(frame.image == 255)
    np.testing.assert_allclose(frame.field, 1.0 / 81, atol=1e-12)


def test_writes_pgm_frames(tmp_path):
    logs = []
    frames = visualize_conduction((2, 3), [0, 2.5], out_dir=str(tmp_path / "out"), extent=8,
                                  log_callback=logs.append)
    raw = open(frames[1].path, "rb").read()
    assert frames[1].path.endswith("heat_t2.5.pgm")
    assert raw.startswith(b"P5\n8 8\n255\n")
    assert len(raw) == len(b"P5\n8 8\n255\n") + 64
    assert len(logs) == 2


def test_write_pgm_non_square(tmp_path):
    path = tmp_path / "x.pgm"
    write_pgm(str(path), np.zeros((3, 5), dtype=np.uint8))
    assert path.read_bytes().startswith(b"P5\n5 3\n255\n")


def test_png_output(tmp_path):
    pytest.importorskip("PIL")
    (frame,) = visualize_conduction((1, 1), [1], out_dir=str(tmp_path), extent=4, fmt="png")
    assert frame.path.endswith(".png")
    assert open(frame.path, "rb").read(8) == b"\x89PNG\r\n\x1a\n"


def test_argument_checks():
    with pytest.raises(ValueError):
        visualize_conduction((0, 0), [1], fmt="bmp")
    with pytest.raises(ValueError):
        visualize_conduction((0, 0), [1], k=-1.0)
    with pytest.raises(ValueError):
        visualize_conduction((0, 0), [-1])


def test_untrained_model_does_not_conduct(micro_model):
    frames = visualize_conduction((3, 3), [0, 10], model=micro_model, layer=(0, 1))
    np.testing.assert_array_equal(frames[0].image, frames[1].image)
    assert frames[0].image.shape == (8, 8)


def test_trained_layer_k_map(micro_cfg):
    from model.backbone import build_model
    model = perturb(build_model(micro_cfg, seed=0))
    kmap = layer_k_map(model, 1, 0, channel=2)
    assert kmap.shape == (4, 4)
    assert np.abs(kmap).max() > 0
    with pytest.raises(ValueError):
        layer_k_map(model, 4, 0)
    with pytest.raises(ValueError):
        layer_k_map(model, 0, 2)
    with pytest.raises(ValueError):
        layer_k_map(model, 0, 0, channel=16)
