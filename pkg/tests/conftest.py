import pytest

from fbmcontrol.fbm import TimeGrid, fbm_from_kernel, generate_bm


@pytest.fixture(scope="session")
def coupled_paths_256():
    """Coupled B/B^H bundle reused across modules (H=0.75, 256 steps)."""
    grid = TimeGrid(1.0, 256)
    return fbm_from_kernel(generate_bm(grid, 1, 8000, seed=1234), 0.75)


@pytest.fixture(scope="session")
def coupled_paths_fine():
    """Fine bundle for refinement studies (H=0.75, 2048 steps, fewer paths)."""
    grid = TimeGrid(1.0, 2048)
    return fbm_from_kernel(generate_bm(grid, 1, 3000, seed=777), 0.75)


@pytest.fixture(scope="session")
def bm_large():
    """Plain Brownian bundle for the statistical generator checks."""
    grid = TimeGrid(1.0, 256)
    return generate_bm(grid, 2, 100_000, seed=2024)
