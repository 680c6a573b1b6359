# %% [markdown]
# # A full attack x defense grid from a config file
#
# This is what ``hrfa attack run --config configs/classification.yaml``
# does: sample originals from per-example streams, run every attack on
# the same originals, hand each successful adversarial example to every
# defense, and write report.csv, report.json, summary.txt, traces and
# image triplets.

# %%
import os
import tempfile
from pathlib import Path

from hrfa import harness
from hrfa.models.fixtures import train_fixtures
from hrfa.models.training import FixtureSpec

work = Path(tempfile.mkdtemp(prefix="hrfa-demo-"))
fixtures = os.environ.get("HRFA_FIXTURES")
if not fixtures:
    fixtures = work / "fixtures"
    train_fixtures(seed=0, spec=FixtureSpec.small(), out_dir=fixtures)

cfg = harness.ExperimentConfig.load(Path(__file__).parent / "configs" / "classification.yaml")
cfg.fixtures, cfg.output, cfg.samples = str(fixtures), str(work / "run"), 12
report = harness.run_experiment(cfg)
print(report.summary())

# %%
print("files:")
for p in sorted((work / "run").rglob("*"))[:12]:
    print("  ", p.relative_to(work))
