"""Session fixtures for the acceptance suite.

The desk-scale acceptance runs train on >= 1e5 oracle events with the
package's default (published) configuration.  Training artifacts are cached
under .cache/acceptance keyed by the config hash, so repeated pytest runs
reuse the checkpoints; delete the directory to force a full retrain.
"""

import json
import time
from pathlib import Path

import pytest
from click.testing import CliRunner

from cascadeflow import cli

ROOT = Path(__file__).resolve().parent.parent
ACCEPT_DIR = ROOT / ".cache" / "acceptance"

# (label, kappa, coupling) for the ablation grid; the first entry is the
# primary model reused by most criteria
VARIANTS = [
    ("k8_independent", 8.0, "independent"),
    ("k1.4_independent", 1.4, "independent"),
    ("k8_ot", 8.0, "ot"),
    ("k1.4_ot", 1.4, "ot"),
]


def _cli(*args):
    result = CliRunner().invoke(cli.main, list(args), catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


def _base_args():
    return ["--set", f"run_dir={ACCEPT_DIR}"]


def _flow_args(label, kappa, coupling):
    return _base_args() + [
        "--set", f"base.kappa={kappa}",
        "--set", f"coupling.kind={coupling}",
        "--set", f"train_flow.checkpoint=checkpoints/flow_{label}.ckpt",
    ]


class AcceptanceRun:
    """Handle to the cached desk-scale training artifacts."""

    def __init__(self):
        self.run_dir = ACCEPT_DIR
        self.timings_path = ACCEPT_DIR / "timings.json"
        self.timings = (json.loads(self.timings_path.read_text())
                        if self.timings_path.exists() else {})

    def _record(self, key, seconds):
        self.timings[key] = seconds
        self.timings_path.parent.mkdir(parents=True, exist_ok=True)
        self.timings_path.write_text(json.dumps(self.timings, indent=2))

    def _step(self, key, marker: Path, command, args):
        if marker.exists() and key in self.timings:
            return
        t0 = time.monotonic()
        _cli(command, *args)
        self._record(key, time.monotonic() - t0)

    def ensure_dataset(self):
        self._step("gen_data", self.run_dir / "data/train.jsonl",
                   "gen-data", _base_args())

    def ensure_card(self):
        self.ensure_dataset()
        self._step("train_card", self.run_dir / "checkpoints/card.ckpt",
                   "train-card", _base_args())

    def ensure_flow(self, label, kappa, coupling):
        self.ensure_card()
        self._step(f"train_flow_{label}",
                   self.run_dir / f"checkpoints/flow_{label}.ckpt",
                   "train-flow", _flow_args(label, kappa, coupling))

    def config(self, kappa=8.0, coupling="independent"):
        return cli.RunConfig.load(None, [
            f"run_dir={ACCEPT_DIR}",
            f"base.kappa={kappa}",
            f"coupling.kind={coupling}",
        ])

    def card_model(self):
        return cli.load_card_model(self.run_dir / "checkpoints/card.ckpt")

    def flow_model(self, label):
        model, meta = cli.load_flow_model(
            self.run_dir / f"checkpoints/flow_{label}.ckpt")
        return model, meta

    def primary_train_seconds(self):
        keys = ("gen_data", "train_card", "train_flow_k8_independent")
        return sum(self.timings.get(k, 0.0) for k in keys)


@pytest.fixture(scope="session")
def acceptance_run():
    run = AcceptanceRun()
    label, kappa, coupling = VARIANTS[0]
    run.ensure_flow(label, kappa, coupling)
    return run


@pytest.fixture(scope="session")
def ablation_run(acceptance_run):
    for label, kappa, coupling in VARIANTS[1:]:
        acceptance_run.ensure_flow(label, kappa, coupling)
    return acceptance_run
