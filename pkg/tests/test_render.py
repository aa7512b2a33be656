import numpy as np

from multispecies_mfc.render import TERRAIN_TINT, density_image, read_ppm, strip, write_ppm
from multispecies_mfc.scenario import TerrainGrid


def test_zero_density_is_background():
    g = TerrainGrid(3, 2, np.array(["n"] * 6))
    img = density_image(g, np.zeros(6))
    assert img.shape == (2, 3, 3)
    assert (img == np.array(TERRAIN_TINT["n"], np.uint8)).all()


def test_unit_density_is_full_intensity_at_its_cell():
    g = TerrainGrid(3, 2, np.array(list("nnnwnr")))
    d = np.zeros(6)
    d[4] = 1.0
    img = density_image(g, d)
    # cell 4 is row 1 (north), col 1; images put north on top
    assert (img[0, 1] == 255).all()
    assert tuple(img[0, 0]) == TERRAIN_TINT["w"] and tuple(img[1, 0]) == TERRAIN_TINT["n"]
    assert (density_image(g, 2 * d, vmax=2.0)[0, 1] == 255).all()
    assert density_image(g, d, scale=3).shape == (6, 9, 3)


def test_ppm_round_trip_and_strip(tmp_path):
    rng = np.random.default_rng(0)
    a = rng.integers(0, 256, (2, 3, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", a)
    assert (tmp_path / "a.ppm").read_text().startswith("P3\n3 2\n255\n")
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), a)
    s = strip([[a, a], [a, a]], gap=1)
    assert s.shape == (5, 7, 3)
    assert (s[2] == 255).all() and (s[:, 3] == 255).all()
