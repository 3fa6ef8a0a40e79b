import numpy as np
import pytest

from bpscan.geometry import from_chart
from bpscan.lidar import make_rng
from bpscan.measurement import log_joint_density_exact, log_marginal_exact
from bpscan.oracle import (
    bp_tree_error,
    exact_log_marginal,
    grid_charts,
    random_tree_beliefs,
    run_all,
    toy_instance,
    valid_associations,
)


def test_valid_associations_count():
    # 2 destinations, 2 sources: 9 vectors minus (1,1) and (2,2)
    assert len(valid_associations(2, 2)) == 7
    assert len(valid_associations(3, 1)) == 4
    assert all(len(set(x for x in a if x)) == sum(1 for x in a if x) for a in valid_associations(3, 3))


def test_vectorized_marginal_matches_term_by_term_sum():
    rng = make_rng(2, 0)
    for _ in range(6):
        inst = toy_instance(rng, n_grid=3)
        charts = grid_charts(inst.grid)[::5]
        fast = exact_log_marginal(charts, inst.surface, inst.source, inst.model)
        slow = [log_marginal_exact(from_chart(c), inst.surface, inst.source, inst.model) for c in charts]
        assert np.allclose(fast, slow, rtol=1e-12, atol=1e-12)


def test_single_vector_term_matches_joint():
    rng = make_rng(3, 0)
    inst = toy_instance(rng)
    n_d, n_s = len(inst.surface), len(inst.source)
    pose = from_chart(inst.truth)
    # an instance with one destination point has one vector per choice of a_1
    total = np.logaddexp.reduce(
        [log_joint_density_exact(pose, a, inst.surface, inst.source, inst.model) for a in valid_associations(n_d, n_s)]
    )
    assert exact_log_marginal(inst.truth, inst.surface, inst.source, inst.model)[0] == pytest.approx(total, rel=1e-12)


def test_truth_lies_on_grid():
    inst = toy_instance(make_rng(4, 0))
    charts = grid_charts(inst.grid)
    assert np.min(np.max(np.abs(charts - inst.truth), axis=1)) == 0.0
    assert inst.prior.contains(charts).all()


def test_tree_instances_are_exact():
    rng = make_rng(5, 0)
    assert max(bp_tree_error(random_tree_beliefs(rng)) for _ in range(200)) < 1e-9


def test_run_all_reports_both_checks():
    lines = list(run_all(0, n_posterior=2, n_trees=20))
    assert len(lines) == 2
    assert all(isinstance(t, str) and isinstance(ok, bool) for t, ok in lines)
    assert lines[1][1]
