
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import flood_fill_oracle

from bimanip.grasps import BimanualGrasp, GraspFinder, GraspParams
from bimanip.kinematics import Box
from bimanip.reachability import (CoverageInterval, analyze_placement_connectivity, label_components,
                                  path_grasp_coverage, read_grid, write_grid)
from bimanip.scene import load_scene
from bimanip.transforms import Transform
from bimanip.typea import ObjectPath

COARSE = (0.04, 0.04, np.deg2rad(20.0))


@pytest.fixture(scope="module")
def walled():
    return load_scene("walled")


@pytest.fixture(scope="module")
def walled_coarse(walled):
    return analyze_placement_connectivity(walled, 2, COARSE)


@pytest.fixture(scope="module")
def short_path(box):
    sigma = ObjectPath(2, np.array([[-0.05, 0.0, 0.0], [0.05, 0.0, 0.0]]), box)
    found = GraspFinder(box).find(sigma.poses([0.0])[0])
    assert found is not None
    return sigma, found[0]


def test_open_scene_classes_are_connected(box, box_grids):
    for cid in box.stable_classes:
        g = box_grids[cid]
        assert g.n_components == 1
        assert g.component_sizes[0] == int(g.occupancy.sum()) > 0


def test_lshape_classes_are_connected(lshape, lshape_grids):
    for cid in lshape.stable_classes:
        assert lshape_grids[cid].n_components == 1


def test_grid_shape_and_theta_axis(walled_coarse):
    nt = walled_coarse.shape[2]
    assert nt == round(2 * np.pi / COARSE[2])
    assert np.allclose(walled_coarse.thetas, 2 * np.pi * np.arange(nt) / nt)
    assert walled_coarse.resolution[2] == pytest.approx(COARSE[2])


def test_wall_splits_placements_in_two(walled_coarse):
    g = walled_coarse
    assert g.n_components == 2
    # the components lie on opposite sides of the wall plane x = 0
    for lab in range(2):
        xs = g.xs[np.nonzero(g.labels == lab)[0]]
        assert np.all(xs < 0) or np.all(xs > 0)


def test_labels_match_flood_fill(walled_coarse, box_grids):
    for g in (walled_coarse, box_grids[0]):
        assert np.array_equal(g.labels, flood_fill_oracle(g.occupancy))


def test_halving_cells_keeps_wall_separation(walled, walled_coarse):
    fine = analyze_placement_connectivity(walled, 2, (0.02, 0.02, np.deg2rad(10.0)))
    assert fine.n_components == walled_coarse.n_components == 2


def test_occupied_cells_carry_valid_witnesses(walled_coarse):
    g = walled_coarse
    assert set(g.witnesses) == {tuple(c) for c in np.argwhere(g.occupancy)}


def test_grid_dump_round_trip(walled_coarse, tmp_path):
    raw, hdr = write_grid(walled_coarse, tmp_path / "sub" / "class2")
    occ, meta = read_grid(tmp_path / "sub" / "class2")
    assert np.array_equal(occ, walled_coarse.occupancy)
    assert meta["components"] == "2"
    assert raw.stat().st_size == walled_coarse.occupancy.size


def test_cell_lookup(walled_coarse):
    g = walled_coarse
    x, y, t = g.coord((1, 2, 3))
    assert g.cell_of(x + 0.4 * COARSE[0], y - 0.4 * COARSE[1], t + 2 * np.pi) == (1, 2, 3)
    with pytest.raises(ValueError):
        g.cell_of(5.0, 0.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 7), st.floats(0.1, 0.9), st.integers(0, 2**32 - 1))
def test_label_components_matches_oracle(nx, ny, nt, p, seed):
    occ = np.random.default_rng(seed).random((nx, ny, nt)) < p
    labels, sizes = label_components(occ)
    ref = flood_fill_oracle(occ)
    assert np.array_equal(labels, ref)
    assert sizes == [int(np.sum(ref == i)) for i in range(len(sizes))]


def test_empty_grid_has_no_components():
    labels, sizes = label_components(np.zeros((3, 3, 4), dtype=bool))
    assert sizes == [] and np.all(labels == -1)


def test_coverage_single_interval_on_short_path(box, short_path):
    sigma, g = short_path
    cov = path_grasp_coverage(box, sigma, g)
    assert len(cov) >= 1
    iv = cov[0]
    assert iv.a == 0.0 and iv.b == 1.0
    # dense re-check at a tenth of the scan step from the interval's own start
    dense = path_grasp_coverage(box, sigma, g, seed_config=iv.q_at(0.0), ds=0.0005)
    assert (dense[0].a, dense[0].b) == (0.0, 1.0)


def test_coverage_gap_around_blocking_obstacle(box, short_path):
    sigma, g = short_path
    blocked = box.with_obstacles([Box([0.008, 0.008, 0.008], Transform(None, [-0.001, -0.192, 0.165]))])
    cov = path_grasp_coverage(blocked, sigma, g)
    assert len(cov) >= 2
    assert not any(iv.a <= 0.5 <= iv.b for iv in cov)
    # monotone: the obstacle-free coverage contains every blocked interval
    free = path_grasp_coverage(box, sigma, g)
    for iv in cov:
        assert any(f.a <= iv.a and iv.b <= f.b for f in free)


def test_coverage_empty_for_unfit_grasp(lshape):
    # link 0 is 12 cm long in x, wider than the stroke
    sigma = ObjectPath(0, np.array([[-0.02, 0.0, 0.0], [0.02, 0.0, 0.0]]), lshape)
    g = BimanualGrasp(GraspParams(0, 2, 3, 0.5), GraspParams(0, 5, 3, 0.5))
    assert path_grasp_coverage(lshape, sigma, g) == []


def test_coverage_interval_validation(short_path):
    _, g = short_path
    with pytest.raises(ValueError):
        CoverageInterval(g, (0, 0), 0.5, 0.5)
