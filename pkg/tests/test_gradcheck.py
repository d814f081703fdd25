import numpy as np

from warpmarks import gradcheck as G


def test_finite_difference_on_quadratic():
    # f(a) = sum(a^2) has exact gradient 2a under central differences
    a = np.linspace(-1, 1, 6).reshape(2, 3)
    (grad,) = G.finite_difference(lambda arrs: float((arrs[0] ** 2).sum()), [a])
    assert np.abs(grad - 2 * a).max() < 1e-9


def test_relative_error_scales_by_magnitude():
    big = np.array([1000.0])
    assert G.relative_error(big, big * (1 + 1e-6)) < 2e-6
    assert G.relative_error(np.array([0.0]), np.array([5e-5])) == 5e-5


def test_check_result_threshold():
    assert G.CheckResult("x", 9e-5).ok
    assert not G.CheckResult("x", 2e-4).ok


def test_run_suite_covers_all_layers_and_losses():
    results = G.run_suite(instances=1, seed=3)
    names = {r.name for r in results}
    assert names == ({f"layer/{k}" for k in G.LAYER_KINDS}
                     | {f"loss/{n}" for n in G.LOSS_NAMES})
    assert all(r.ok for r in results)


def test_run_suite_deterministic():
    a = G.run_suite(instances=2, seed=5)
    b = G.run_suite(instances=2, seed=5)
    assert [(r.name, r.max_relative_error) for r in a] == \
           [(r.name, r.max_relative_error) for r in b]
