"""End-to-end tests for the command-line interface."""

import contextlib
import hashlib
import io
from pathlib import Path

import numpy as np
import pytest

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from crossview.cli import RunConfig, _DEFAULTS, format_config, load_config, main
from crossview.retrieval import VIEW_DRONE, VIEW_SATELLITE, load_descriptors, save_descriptors


def run_cli(argv):
    out = io.StringIO()
    err = io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


def hash_tree(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


TINY = "\n".join(
    [
        "seed = 9",
        "[dataset]",
        "classes = 3",
        "views = 2",
        "size = 32",
        "[train]",
        "steps = 6",
        "",
    ]
)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full synth -> train -> embed -> eval run shared by the tests."""
    root = tmp_path_factory.mktemp("cli_run")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    out = root / "run"
    results = {}
    for label, argv in (
        ("synth", ["synth"]),
        ("train", ["train"]),
        ("embed_query", ["embed", "--split", "query"]),
        ("embed_gallery", ["embed", "--split", "gallery"]),
        # Flagless eval picks up the descriptor files embed wrote under out.
        ("eval", ["eval"]),
    ):
        results[label] = run_cli(["--config", str(cfg), "--out", str(out)] + argv)
    return {"root": root, "cfg": cfg, "out": out, "results": results}


class TestConfig:
    def test_defaults_without_file(self):
        values = load_config(None)
        assert values == _DEFAULTS
        values["train"]["steps"] = 1
        assert _DEFAULTS["train"]["steps"] != 1

    def test_file_overrides_merge(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[train]\nsteps = 25\nlr = 0.01\n")
        values = load_config(cfg)
        assert values["train"]["steps"] == 25
        assert values["train"]["lr"] == 0.01
        assert values["train"]["momentum"] == _DEFAULTS["train"]["momentum"]
        assert values["dataset"] == _DEFAULTS["dataset"]

    def test_int_accepted_for_float_field(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[train]\nlr = 1\n")
        values = load_config(cfg)
        assert values["train"]["lr"] == 1.0
        assert isinstance(values["train"]["lr"], float)

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[train]\nlr_rate = 0.1\n")
        with pytest.raises(ValueError, match="unknown config key: train.lr_rate"):
            load_config(cfg)

    def test_unknown_section_rejected(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[optimizer]\nname = \"sgd\"\n")
        with pytest.raises(ValueError, match="unknown config key: optimizer"):
            load_config(cfg)

    def test_wrong_types_rejected(self, tmp_path):
        for body, key in (
            ("[train]\nsteps = \"many\"\n", "train.steps"),
            ("[train]\nsteps = true\n", "train.steps"),
            ("[model]\nfusion = 1\n", "model.fusion"),
            ("[model]\nstage_channels = [4.5, 4, 4, 4]\n", "model.stage_channels"),
        ):
            cfg = tmp_path / "c.toml"
            cfg.write_text(body)
            with pytest.raises(ValueError, match=key.replace(".", r"\.")):
                load_config(cfg)

    def test_format_round_trips(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text(TINY)
        values = load_config(cfg)
        assert tomllib.loads(format_config(values)) == values
        assert tomllib.loads(format_config(_DEFAULTS)) == _DEFAULTS

    def test_validate_rejects_bad_values(self):
        for section, key, value, message in (
            (None, "seed", -1, "seed"),
            ("train", "steps", 0, "steps"),
            ("model", "stage_channels", [4, 4, 4], "stages"),
            ("augment", "k", 0, "k"),
            ("augment", "d_min", 300.0, "d_min"),
            ("dataset", "classes", 0, "class"),
        ):
            values = load_config(None)
            if section is None:
                values[key] = value
            else:
                values[section][key] = value
            with pytest.raises(ValueError, match=message):
                RunConfig(values).validate()

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "absent.toml")

    def test_invalid_toml_reported(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[train\nsteps = 3\n")
        with pytest.raises(ValueError, match="invalid config file"):
            load_config(cfg)


class TestPipeline:
    def test_synth(self, pipeline):
        code, out, err = pipeline["results"]["synth"]
        assert code == 0, err
        assert "train=18" in out and "query=18" in out and "gallery=18" in out
        dataset = pipeline["out"] / "dataset"
        for split in ("train", "query", "gallery"):
            assert (dataset / split / "drone").is_dir()
            assert (dataset / split / "satellite").is_dir()

    def test_effective_config_echoed(self, pipeline):
        echoed = pipeline["out"] / "config.toml"
        values = tomllib.loads(echoed.read_text())
        assert values["seed"] == 9
        assert values["dataset"]["classes"] == 3
        assert values["train"]["steps"] == 6
        assert values["train"]["lr"] == _DEFAULTS["train"]["lr"]

    def test_train_artifacts(self, pipeline):
        code, out, err = pipeline["results"]["train"]
        assert code == 0, err
        assert "checkpoint written" in out
        assert (pipeline["out"] / "model.ckpt").is_file()
        log_lines = (pipeline["out"] / "loss.log").read_text().splitlines()
        assert log_lines[0].split() == ["step", "total", "triplet", "ce"]
        assert len(log_lines) == 7

    def test_embed_artifacts(self, pipeline):
        for label in ("embed_query", "embed_gallery"):
            code, out, err = pipeline["results"][label]
            assert code == 0, err
        descs = load_descriptors(pipeline["out"] / "descriptors_query.bin")
        assert len(descs) == 9  # 3 classes x 2 drone views + 3 satellite
        views = [view for _, view, _ in descs]
        assert views.count(VIEW_DRONE) == 6 and views.count(VIEW_SATELLITE) == 3
        for _, _, vec in descs:
            np.testing.assert_allclose(np.linalg.norm(vec), 1.0, atol=1e-5)

    def test_eval_reports_both_directions(self, pipeline):
        code, out, err = pipeline["results"]["eval"]
        assert code == 0, err
        assert "drone_to_satellite" in out and "satellite_to_drone" in out
        text = (pipeline["out"] / "metrics.txt").read_text()
        for metric in ("R@1", "R@5", "R@10", "AP"):
            assert metric in text
        assert (pipeline["out"] / "metrics.csv").is_file()

    def test_rerun_from_echoed_config_reproduces_dataset(self, pipeline, tmp_path):
        echoed = pipeline["out"] / "config.toml"
        out2 = tmp_path / "rerun"
        code, _, err = run_cli(["--config", str(echoed), "--out", str(out2), "synth"])
        assert code == 0, err
        assert hash_tree(out2 / "dataset") == hash_tree(pipeline["out"] / "dataset")

    def test_train_deterministic(self, pipeline, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code, _, err = run_cli(
                [
                    "--config",
                    str(pipeline["cfg"]),
                    "--out",
                    str(out),
                    "train",
                    "--data",
                    str(pipeline["out"] / "dataset"),
                ]
            )
            assert code == 0, err
            outs.append(out)
        a, b = outs
        assert (a / "loss.log").read_bytes() == (b / "loss.log").read_bytes()
        assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()

    def test_seed_flag_overrides_config(self, pipeline, tmp_path):
        out = tmp_path / "seeded"
        code, _, err = run_cli(
            ["--config", str(pipeline["cfg"]), "--seed", "123", "--out", str(out), "synth"]
        )
        assert code == 0, err
        values = tomllib.loads((out / "config.toml").read_text())
        assert values["seed"] == 123
        assert hash_tree(out / "dataset") != hash_tree(pipeline["out"] / "dataset")


class TestEval:
    def test_self_retrieval_is_perfect(self, tmp_path):
        # Query i duplicating gallery i must score R@1 = 1 and AP = 1.
        rng = np.random.default_rng(4)
        vecs = rng.standard_normal((5, 8))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        query = [(i, VIEW_DRONE, vecs[i]) for i in range(5)]
        query += [(i, VIEW_SATELLITE, vecs[i]) for i in range(5)]
        gallery = [(i, VIEW_SATELLITE, vecs[i]) for i in range(5)]
        gallery += [(i, VIEW_DRONE, vecs[i]) for i in range(5)]
        q_path = tmp_path / "q.bin"
        g_path = tmp_path / "g.bin"
        save_descriptors(q_path, query)
        save_descriptors(g_path, gallery)
        out = tmp_path / "out"
        code, stdout, err = run_cli(
            ["--out", str(out), "eval", "--query", str(q_path), "--gallery", str(g_path)]
        )
        assert code == 0, err
        for line in (out / "metrics.csv").read_text().splitlines()[1:]:
            _, _, value = line.split(",")
            assert float(value) == 1.0
        assert "1.0000" in stdout

    def test_eval_needs_only_descriptor_files(self, tmp_path):
        # No dataset, checkpoint, or model anywhere near the run directory.
        vec = np.zeros(4)
        vec[0] = 1.0
        save_descriptors(tmp_path / "q.bin", [(1, VIEW_DRONE, vec), (1, VIEW_SATELLITE, vec)])
        save_descriptors(tmp_path / "g.bin", [(1, VIEW_SATELLITE, vec), (1, VIEW_DRONE, vec)])
        code, stdout, err = run_cli(
            [
                "--out",
                str(tmp_path / "out"),
                "eval",
                "--query",
                str(tmp_path / "q.bin"),
                "--gallery",
                str(tmp_path / "g.bin"),
            ]
        )
        assert code == 0, err

    def test_missing_descriptor_file(self, tmp_path):
        code, _, err = run_cli(
            [
                "--out",
                str(tmp_path / "out"),
                "eval",
                "--query",
                str(tmp_path / "missing.bin"),
                "--gallery",
                str(tmp_path / "missing.bin"),
            ]
        )
        assert code == 1
        assert "error:" in err

    def test_missing_view_reported(self, tmp_path):
        vec = np.zeros(4)
        vec[0] = 1.0
        save_descriptors(tmp_path / "q.bin", [(1, VIEW_DRONE, vec)])
        save_descriptors(tmp_path / "g.bin", [(1, VIEW_DRONE, vec)])
        code, _, err = run_cli(
            [
                "--out",
                str(tmp_path / "out"),
                "eval",
                "--query",
                str(tmp_path / "q.bin"),
                "--gallery",
                str(tmp_path / "g.bin"),
            ]
        )
        assert code == 1
        assert "no gallery descriptors" in err


class TestGradcheck:
    def test_passes_on_fresh_model(self, tmp_path):
        code, out, err = run_cli(["--out", str(tmp_path / "out"), "gradcheck"])
        assert code == 0, err
        assert "gradcheck passed" in out
        lines = [l for l in out.splitlines() if "max relative error" in l]
        assert len(lines) == 6
        for line in lines:
            assert float(line.split()[4]) <= 1e-4
            assert line.endswith("ok")

    def test_fusion_disabled_drops_group(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[model]\nfusion = false\n")
        code, out, err = run_cli(
            ["--config", str(cfg), "--out", str(tmp_path / "out"), "gradcheck"]
        )
        assert code == 0, err
        lines = [l for l in out.splitlines() if "max relative error" in l]
        assert len(lines) == 5
        assert not any("dafm" in l for l in lines)


class TestErrors:
    def test_missing_dataset(self, tmp_path):
        code, _, err = run_cli(["--out", str(tmp_path / "out"), "train"])
        assert code == 1
        assert "error:" in err

    def test_missing_config_file_flag(self, tmp_path):
        code, _, err = run_cli(
            ["--config", str(tmp_path / "absent.toml"), "--out", str(tmp_path / "out"), "synth"]
        )
        assert code == 1
        assert "config file not found" in err

    def test_invalid_config_value(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[train]\nsteps = 0\n")
        code, _, err = run_cli(["--config", str(cfg), "--out", str(tmp_path / "out"), "synth"])
        assert code == 1
        assert "steps" in err

    def test_invalid_seed_flag(self, tmp_path):
        code, _, err = run_cli(["--seed", "-3", "--out", str(tmp_path / "out"), "synth"])
        assert code == 1
        assert "seed" in err

    def test_subcommand_required(self):
        with pytest.raises(SystemExit):
            run_cli(["--out", "x"])

    def test_augment_needs_inputs(self, tmp_path):
        code, _, err = run_cli(["--out", str(tmp_path / "out"), "augment"])
        assert code == 1
        assert "recon" in err
