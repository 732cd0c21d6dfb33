"""End-to-end runs of the console entry points."""

import contextlib
import io
import json
import os

import pytest

from curbloc.basemap import load_base_map
from curbloc.cli import main
from curbloc.config import load_config
from curbloc.curbmap import load_curb_map
from curbloc.graph import load_trajectory
from curbloc.simulate import load_dataset


def run_cli(argv) -> tuple[int, str]:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        rc = main(argv)
    return rc, buf.getvalue()


@pytest.fixture(scope="session")
def cli_chain(tmp_path_factory):
    """simulate -> build-map -> parameterize -> localize -> evaluate, once."""
    root = tmp_path_factory.mktemp("cli")
    paths = {
        "data": str(root / "run0"),
        "base": str(root / "maps" / "base.txt"),
        "curb": str(root / "maps" / "curb.txt"),
        "results": str(root / "results"),
    }
    paths["trajectory"] = os.path.join(paths["results"], "trajectory.csv")
    paths["metrics"] = os.path.join(paths["results"], "metrics.csv")
    out = {}
    steps = {
        "simulate": ["simulate", "--out", paths["data"], "--seed", "4", "--block", "60"],
        "build-map": ["build-map", "--data", paths["data"], "--out", paths["base"]],
        "parameterize": ["parameterize", "--base-map", paths["base"],
                         "--out", paths["curb"]],
        "localize": ["localize", "--data", paths["data"], "--base-map", paths["base"],
                     "--curb-map", paths["curb"], "--out", paths["results"]],
        "evaluate": ["evaluate", "--trajectory", paths["trajectory"],
                     "--data", paths["data"], "--out", paths["metrics"]],
    }
    for name, argv in steps.items():
        rc, text = run_cli(argv)
        assert rc == 0, f"{name} failed:\n{text}"
        out[name] = text
    return paths, out


class TestChain:
    def test_simulate_dataset(self, cli_chain):
        paths, out = cli_chain
        assert os.path.exists(os.path.join(paths["data"], "manifest.csv"))
        frames = load_dataset(paths["data"])
        assert len(frames) == 301
        assert "wrote 301 frames" in out["simulate"]

    def test_base_map_artifact(self, cli_chain):
        paths, out = cli_chain
        base = load_base_map(paths["base"])
        assert len(base) == 301
        assert all(v.curb_observation is not None for v in base)
        assert "301 vertices" in out["build-map"]

    def test_curb_map_artifact(self, cli_chain):
        paths, out = cli_chain
        curb = load_curb_map(paths["curb"])
        assert len(curb.segments) > 10
        # compression summary printed against the raw total
        assert f"of {curb.total_raw_points} raw points" in out["parameterize"]

    def test_localize_artifacts(self, cli_chain):
        paths, out = cli_chain
        estimates = load_trajectory(paths["trajectory"])
        assert len(estimates) == 301
        with open(os.path.join(paths["results"], "diagnostics.jsonl")) as fh:
            records = [json.loads(line) for line in fh]
        # frame 0 seeds the graph and is not tracked, so no record for it
        assert len(records) == 300
        assert {"status", "timestamp"} <= set(records[0])
        assert "localized 301 frames" in out["localize"]

    def test_most_frames_accepted(self, cli_chain):
        paths, _ = cli_chain
        with open(os.path.join(paths["results"], "diagnostics.jsonl")) as fh:
            statuses = [json.loads(line)["status"] for line in fh]
        assert statuses.count("accepted") > 0.9 * len(statuses)

    def test_metrics_artifact(self, cli_chain):
        paths, out = cli_chain
        with open(paths["metrics"]) as fh:
            header, row = fh.read().strip().split("\n")
        assert header.startswith("dataset")
        cells = row.split(",")
        assert cells[0] == paths["data"]
        assert float(cells[2]) > 95.0  # recall on a short clean-ish loop
        assert "metrics written" in out["evaluate"]


class TestSingleCommands:
    def test_write_config(self, tmp_path):
        out = tmp_path / "cfg.yaml"
        rc, text = run_cli(["write-config", "--out", str(out)])
        assert rc == 0 and "written" in text
        assert load_config(out).tracker.ndt.cell_size > 0

    def test_mask_flag_disables_visual_stretch(self, tmp_path):
        data = tmp_path / "masked"
        rc, _ = run_cli(["simulate", "--out", str(data), "--seed", "1",
                         "--block", "60", "--mask", "40:90"])
        assert rc == 0
        frames = load_dataset(data)
        masked = [f for f in frames if not f.visual_available]
        assert 0 < len(masked) < len(frames)

    def test_clean_flag(self, tmp_path):
        data = tmp_path / "clean"
        rc, _ = run_cli(["simulate", "--out", str(data), "--seed", "1",
                         "--block", "60", "--clean"])
        assert rc == 0
        frames = load_dataset(data)
        # no dropout: every frame keeps its detection
        assert all(len(f.detection) > 0 for f in frames)

    def test_evaluate_length_mismatch(self, cli_chain, tmp_path, capsys):
        paths, _ = cli_chain
        lines = open(paths["trajectory"]).read().strip().split("\n")
        short = tmp_path / "short.csv"
        short.write_text("\n".join(lines[:-5]) + "\n")
        rc = main(["evaluate", "--trajectory", str(short),
                   "--data", paths["data"], "--out", str(tmp_path / "m.csv")])
        assert rc == 1
        assert "trajectory has" in capsys.readouterr().err

    def test_missing_required_argument(self):
        with pytest.raises(SystemExit) as exc:
            main(["simulate"])
        assert exc.value.code == 2

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            main(["frobnicate"])
