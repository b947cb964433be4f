import numpy as np
import pytest

from colocmvps.brdf import analytic_family, learn_dictionary
from colocmvps.pipeline import render_scene


def scene_config(res=32, n_views=10, tilt=30.0, function="bumps", surface_res=129):
    return {
        "surface": {"function": function, "resolution": [surface_res, surface_res]},
        "dictionary": {"learn": {"n_curves": 40, "n_bases": 15, "seed": 1}},
        "material": {"analytic": {"albedo": 0.3, "specular_strength": 0.8, "roughness": 0.3}},
        "gamma": 1.0,
        "cameras": {"ring": {"n_views": n_views, "tilt_deg": tilt, "focal": 4.0 * res, "width": res, "height": res}},
    }


@pytest.fixture(scope="session")
def dictionary():
    return learn_dictionary(analytic_family(40, seed=1), 15)


@pytest.fixture(scope="session")
def small_scene():
    """10 views of the bumps surface at 32x32."""
    return render_scene(scene_config(32))


@pytest.fixture(scope="session")
def tiny_scene():
    """10 views at 12x12, for solver tests that must stay quick."""
    return render_scene(scene_config(12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
