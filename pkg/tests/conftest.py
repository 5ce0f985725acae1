"""Shared fixtures for the desk-scale training experiments.

The heavy artifacts (two FHN datasets, two fully trained models, three
transfer runs) are produced once per recipe and cached on disk under
$LGNK_TEST_CACHE (default: <system tmp>/lgnk-test-cache), keyed by a hash of
the exact recipe, so repeated test sessions skip the expensive work. Delete
the cache directory after changing training internals.
"""

import dataclasses
import hashlib
import json
import os
import tempfile
from pathlib import Path

import pytest

from lgnk.datagen import FHNParams, gen_fitzhugh_nagumo, read_dataset, write_dataset
from lgnk.model import Model, ModelConfig, load_checkpoint
from lgnk.train import TrainConfig, TrainLog, train_loop, transfer_finetune

# Desk-scale recipe (acceptance criteria 7-9): FHN on 32x32 at two diffusion
# coefficients, 200 train / 50 test trajectories, r=8, M=8, 150 epochs.
DESK_FHN_A = FHNParams(n=32, Du=0.01, T_snapshots=15, seed=101)
DESK_FHN_B = FHNParams(n=32, Du=0.001, T_snapshots=15, seed=202)
DESK_COUNT = 250
DESK_N_TRAIN = 200
DESK_MODEL = ModelConfig(n=32, T_in=10, T_out=5, r=8, M=8, w=16, hidden=32, variant="sd", seed=0)
DESK_TRAIN = TrainConfig(epochs=150, batch_size=10, seed=0)
# Data-scarce transfer runs (criterion 9): N = 50 on the Du=0.001 dataset.
N50_TRAIN = TrainConfig(epochs=100, batch_size=10, seed=0, N_train=50)


def cache_root() -> Path:
    root = os.environ.get("LGNK_TEST_CACHE")
    path = Path(root) if root else Path(tempfile.gettempdir()) / "lgnk-test-cache"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _key(*parts) -> str:
    blob = json.dumps([dataclasses.asdict(p) if dataclasses.is_dataclass(p) else p for p in parts],
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _cached_dataset(params: FHNParams, tag: str):
    d = cache_root() / "datasets" / f"{tag}_{_key(params, DESK_COUNT, DESK_N_TRAIN)}"
    path = d / "dataset.lgnk"
    if not path.exists():
        d.mkdir(parents=True, exist_ok=True)
        ds = gen_fitzhugh_nagumo(params, DESK_COUNT, n_train=DESK_N_TRAIN)
        write_dataset(path, ds)
    return read_dataset(path)


def _cached_run(tag: str, model_cfg, train_cfg, dataset, pretrained=None, mode=None):
    """Train (or load) one run; returns (run_dir, best Model, final Model, TrainLog)."""
    key = _key(model_cfg, train_cfg, dataset.manifest, mode or "scratch",
               str(pretrained) if pretrained else "none")
    run_dir = cache_root() / "models" / f"{tag}_{key}"
    if not (run_dir / "last.lgnk").exists():
        run_dir.mkdir(parents=True, exist_ok=True)
        if mode is None:
            train_loop(model_cfg, train_cfg, dataset, out_dir=run_dir)
        else:
            pre = load_checkpoint(pretrained)
            transfer_finetune(pre, mode, dataset, train_cfg, out_dir=run_dir)
    return (
        run_dir,
        load_checkpoint(run_dir / "best.lgnk"),
        load_checkpoint(run_dir / "last.lgnk"),
        TrainLog.read_csv(run_dir / "train_log.csv"),
    )


@pytest.fixture(scope="session")
def desk_dataset_a():
    return _cached_dataset(DESK_FHN_A, "fhn_a")


@pytest.fixture(scope="session")
def desk_dataset_b():
    return _cached_dataset(DESK_FHN_B, "fhn_b")


@pytest.fixture(scope="session")
def desk_run_a(desk_dataset_a):
    return _cached_run("desk_a", DESK_MODEL, DESK_TRAIN, desk_dataset_a)


@pytest.fixture(scope="session")
def desk_run_b(desk_dataset_b):
    return _cached_run("desk_b", DESK_MODEL, DESK_TRAIN, desk_dataset_b)


@pytest.fixture(scope="session")
def n50_scratch(desk_dataset_b):
    return _cached_run("n50_scratch", DESK_MODEL, N50_TRAIN, desk_dataset_b)


@pytest.fixture(scope="session")
def n50_freeze(desk_dataset_b, desk_run_a):
    run_dir_a = desk_run_a[0]
    cfg = dataclasses.replace(N50_TRAIN, mode="freeze_s", init_checkpoint=str(run_dir_a / "best.lgnk"))
    return _cached_run("n50_freeze", DESK_MODEL, cfg, desk_dataset_b,
                       pretrained=run_dir_a / "best.lgnk", mode="freeze_s")


@pytest.fixture(scope="session")
def n50_transfer_all(desk_dataset_b, desk_run_a):
    run_dir_a = desk_run_a[0]
    cfg = dataclasses.replace(N50_TRAIN, mode="transfer_all", init_checkpoint=str(run_dir_a / "best.lgnk"))
    return _cached_run("n50_all", DESK_MODEL, cfg, desk_dataset_b,
                       pretrained=run_dir_a / "best.lgnk", mode="transfer_all")


# ---------------------------------------------------------------------------
# Acceptance summary: one pass/fail line per criterion at the end of the run.
# ---------------------------------------------------------------------------

_CRITERION_RESULTS: dict[str, tuple[str, str]] = {}


def record_criterion(name: str, outcome: str, detail: str = "") -> None:
    _CRITERION_RESULTS[name] = (outcome, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERION_RESULTS, key=lambda s: int(s.split()[1])):
        outcome, detail = _CRITERION_RESULTS[name]
        line = f"{name}: {outcome}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
