import os
import sys
import time
from pathlib import Path
from types import SimpleNamespace

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from hrfa import harness
from hrfa.harness import ExperimentConfig
from hrfa.models.fixtures import load_fixtures, train_fixtures
from hrfa.models.training import FixtureSpec

N = 100
DEFENSES = [{"kind": "mean_filter", "window": 5},
            {"kind": "pixel_deflection", "deflections": 64, "radius": 4, "strength": 0.04},
            {"kind": "jpeg", "quality": 75}]


@pytest.fixture(scope="session")
def tiny_fixtures(tmp_path_factory):
    """Seconds-long fixture set for plumbing tests; quality gates are off."""
    out = tmp_path_factory.mktemp("tiny-fixtures")
    train_fixtures(seed=0, spec=FixtureSpec.small(), out_dir=out)
    return out


@pytest.fixture(scope="session")
def full_fixtures():
    """The acceptance fixture set, built into the cache on first use (about 20 minutes)."""
    default = Path(__file__).resolve().parents[1] / ".fixture_cache" / "seed0"
    path = Path(os.environ.get("HRFA_FIXTURES", default))
    if not (path / "calibration.json").exists():
        train_fixtures(seed=0, out_dir=path)
    return SimpleNamespace(path=path, fx=load_fixtures(path))


def classification_config(fixtures, out, seed, samples=N):
    return ExperimentConfig.from_dict({
        "name": f"cls-s{seed}", "task": "classification", "fixtures": str(fixtures),
        "output": str(out), "samples": samples, "seed": seed, "export_images": False,
        "attacks": [{"name": "hrfa", "kind": "hrfa", "lambda": 50, "max_iters": 100, "lr": 0.05},
                    {"name": "pgd", "kind": "pgd", "alpha": 0.003, "eps": 0.03, "max_iters": 100},
                    {"name": "cw", "kind": "cw"}],
        "defenses": DEFENSES,
    })


@pytest.fixture(scope="session")
def classification_grid(full_fixtures, tmp_path_factory):
    """``run(seed)`` -> (report, seconds); each seed's grid runs once per session."""
    cache = {}

    def run(seed):
        if seed not in cache:
            out = tmp_path_factory.mktemp(f"cls-grid-{seed}")
            start = time.perf_counter()
            report = harness.run_experiment(classification_config(full_fixtures.path, out, seed),
                                            fixtures=full_fixtures.fx)
            cache[seed] = report, time.perf_counter() - start
        return cache[seed]

    return run


@pytest.fixture(scope="session")
def verification_grid(full_fixtures, tmp_path_factory):
    out = tmp_path_factory.mktemp("ver-grid")
    cfg = ExperimentConfig.from_dict({
        "name": "ver", "task": "verification", "mode": "real", "fixtures": str(full_fixtures.path),
        "output": str(out), "samples": N, "seed": 0, "export_images": False,
        "attacks": [{"name": "hrfa", "kind": "hrfa", "lambda": 10, "max_iters": 1000, "lr": 0.05},
                    {"name": "pgd", "kind": "pgd"}],
        "defenses": DEFENSES,
    })
    report = harness.run_experiment(cfg, fixtures=full_fixtures.fx)
    return cfg, report
