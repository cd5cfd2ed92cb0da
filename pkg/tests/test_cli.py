"""CLI tests: exit-code contract, reproducible generation, end-to-end train /
eval / study / map runs on tiny datasets."""

import math

import numpy as np
import pytest

from swarmset.cli import main
from swarmset.taskgen import read_dataset


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.bin"
    assert run_cli("gen", "--task", "direct", "--count", "24", "--seed", "5",
                   "--out", str(path), "--val-count", "6") == 0
    return path


@pytest.fixture(scope="module")
def trained_run(tiny_dataset, tmp_path_factory):
    outdir = tmp_path_factory.mktemp("run")
    config = tmp_path_factory.mktemp("cfg") / "train.cfg"
    config.write_text(
        f"""# tiny smoke config
family = swarm
code = 8-2-1
dataset = {tiny_dataset}
outdir = {outdir}
task = direct
batch_size = 6
max_epochs = 4
warmup_epochs = 2
lr0 = 0.003
seed = 11
"""
    )
    assert run_cli("train", "--config", str(config)) == 0
    return outdir


class TestGen:
    def test_split_default_is_ten_percent(self, tmp_path):
        out = tmp_path / "d.bin"
        assert run_cli("gen", "--task", "direct", "--count", "20", "--seed", "1",
                       "--out", str(out)) == 0
        _, manifest = read_dataset(out)
        assert manifest.train_count == 18 and manifest.val_count == 2

    def test_count_zero_is_a_valid_empty_dataset(self, tmp_path):
        out = tmp_path / "empty.bin"
        assert run_cli("gen", "--task", "param", "--count", "0", "--seed", "1",
                       "--out", str(out)) == 0
        tasks, manifest = read_dataset(out)
        assert tasks == [] and manifest.task_count == 0

    def test_same_seed_twice_gives_identical_files(self, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        for out in (a, b):
            assert run_cli("gen", "--task", "param", "--count", "10", "--seed", "7",
                           "--out", str(out)) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_missing_required_argument_exits_3(self, capsys):
        assert run_cli("gen", "--task", "direct", "--count", "5", "--out", "x.bin") == 3
        capsys.readouterr()

    def test_unwritable_out_exits_2(self, tmp_path):
        assert run_cli("gen", "--task", "param", "--count", "2", "--seed", "1",
                       "--out", str(tmp_path / "no_dir" / "x.bin")) == 2


class TestTrain:
    def test_run_directory_contents(self, trained_run):
        assert (trained_run / "metrics.csv").exists()
        assert (trained_run / "best.ckpt").exists()
        lines = (trained_run / "metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,lr,backtracked,wall_s"
        assert len(lines) == 5

    def test_prints_parameter_count(self, tiny_dataset, tmp_path, capsys):
        config = tmp_path / "t.cfg"
        config.write_text(f"family = setlinear\ncode = 8-2\ndataset = {tiny_dataset}\n"
                          f"outdir = {tmp_path / 'run'}\nmax_epochs = 1\nbatch_size = 8\n")
        assert run_cli("train", "--config", str(config)) == 0
        out = capsys.readouterr().out
        # setlinear 8-2 on 2 -> 10: (2*8*2 + 8) + (2*10*8 + 10) = 210
        assert "210 parameters" in out

    def test_invalid_architecture_code_exits_3(self, tiny_dataset, tmp_path, capsys):
        config = tmp_path / "bad.cfg"
        config.write_text(f"family = swarm\ncode = x-y\ndataset = {tiny_dataset}\n"
                          f"outdir = {tmp_path / 'run'}\n")
        assert run_cli("train", "--config", str(config)) == 3
        assert "code" in capsys.readouterr().err

    def test_malformed_config_line_exits_3(self, tmp_path, capsys):
        config = tmp_path / "bad.cfg"
        config.write_text("family swarm\n")
        assert run_cli("train", "--config", str(config)) == 3
        capsys.readouterr()

    def test_missing_dataset_exits_2(self, tmp_path, capsys):
        config = tmp_path / "t.cfg"
        config.write_text(f"family = swarm\ncode = 8-2-1\ndataset = {tmp_path / 'nope.bin'}\n"
                          f"outdir = {tmp_path / 'run'}\n")
        assert run_cli("train", "--config", str(config)) == 2
        capsys.readouterr()


class TestEval:
    def test_eval_reproduces_best_checkpoint_loss(self, tiny_dataset, trained_run, capsys, tmp_path):
        out_csv = tmp_path / "eval.csv"
        assert run_cli("eval", "--checkpoint", str(trained_run / "best.ckpt"),
                       "--dataset", str(tiny_dataset), "--split", "val",
                       "--batch-size", "6", "--out", str(out_csv)) == 0
        printed = capsys.readouterr().out
        line = [l for l in printed.splitlines() if "tasks:" in l][-1]
        mean = float(line.split("loss ")[1].split(" ")[0])
        metrics = (trained_run / "metrics.csv").read_text().splitlines()[1:]
        best_val = min(float(r.split(",")[2]) for r in metrics)
        assert abs(mean - best_val) <= 1e-6
        rows = out_csv.read_text().splitlines()
        assert rows[0] == "task,loss"
        per_task = [float(r.split(",")[1]) for r in rows[1:]]
        # stdout rounds the aggregate to 6 decimals
        assert abs(float(np.mean(per_task)) - mean) <= 5e-7

    def test_fresh_init_scores_near_uniform(self, tiny_dataset, tmp_path, capsys):
        # one-epoch training barely moves off the uniform baseline ln 10
        config = tmp_path / "t.cfg"
        config.write_text(f"family = swarm\ncode = 8-2-1\ndataset = {tiny_dataset}\n"
                          f"outdir = {tmp_path / 'run'}\ntask = direct\nmax_epochs = 1\n"
                          f"batch_size = 18\nlr0 = 1e-6\nseed = 3\n")
        assert run_cli("train", "--config", str(config)) == 0
        capsys.readouterr()
        assert run_cli("eval", "--checkpoint", str(tmp_path / "run" / "best.ckpt"),
                       "--dataset", str(tiny_dataset), "--split", "val",
                       "--out", str(tmp_path / "e.csv")) == 0
        line = [l for l in capsys.readouterr().out.splitlines() if "tasks:" in l][-1]
        mean = float(line.split("loss ")[1].split(" ")[0])
        assert 2.0 <= mean <= 2.6

    def test_empty_split_exits_3(self, trained_run, tmp_path, capsys):
        data = tmp_path / "noval.bin"
        assert run_cli("gen", "--task", "direct", "--count", "4", "--seed", "2",
                       "--out", str(data), "--val-count", "0") == 0
        assert run_cli("eval", "--checkpoint", str(trained_run / "best.ckpt"),
                       "--dataset", str(data), "--split", "val") == 3
        capsys.readouterr()

    def test_incompatible_checkpoint_exits_5(self, tiny_dataset, tmp_path, capsys):
        import numpy as np

        from swarmset.models import build_model
        from swarmset.training import AdamState, TrainConfig, save_checkpoint

        model = build_model("swarm", "8-2-1", 2, 20, np.random.default_rng(0))
        path = tmp_path / "bad.ckpt"
        save_checkpoint(path, model, AdamState.for_model(model), 1e-3, 1,
                        TrainConfig(max_epochs=1),
                        {"family": "swarm", "code": "8-2-1", "d_in": 2, "d_out": 20,
                         "pooling": "mean", "objective": "direct"})
        assert run_cli("eval", "--checkpoint", str(path),
                       "--dataset", str(tiny_dataset), "--split", "val") == 5
        capsys.readouterr()


class TestShuffleStudy:
    def test_single_shuffle_gives_zero_std(self, tiny_dataset, trained_run, tmp_path, capsys):
        out = tmp_path / "s.csv"
        assert run_cli("shuffle-study", "--checkpoint", str(trained_run / "best.ckpt"),
                       "--dataset", str(tiny_dataset), "--tasks", "3", "--shuffles", "1",
                       "--batch-size", "8", "--out", str(out)) == 0
        capsys.readouterr()
        rows = out.read_text().splitlines()[1:]
        assert len(rows) == 3
        assert all(float(r.split(",")[2]) == 0.0 for r in rows)

    def test_equivariant_model_has_tiny_relative_std(self, tiny_dataset, trained_run, tmp_path, capsys):
        out = tmp_path / "s.csv"
        assert run_cli("shuffle-study", "--checkpoint", str(trained_run / "best.ckpt"),
                       "--dataset", str(tiny_dataset), "--tasks", "3", "--shuffles", "20",
                       "--batch-size", "20", "--out", str(out)) == 0
        capsys.readouterr()
        rows = out.read_text().splitlines()[1:]
        assert all(float(r.split(",")[2]) <= 1e-4 for r in rows)


class TestEntropyMap:
    def test_grid_1x1_single_row(self, tiny_dataset, trained_run, tmp_path, capsys):
        out = tmp_path / "maps"
        assert run_cli("entropy-map", "--checkpoint", str(trained_run / "best.ckpt"),
                       "--dataset", str(tiny_dataset), "--task-index", "0",
                       "--grid", "1x1", "--range", "-2:2", "--out", str(out)) == 0
        capsys.readouterr()
        rows = (out / "entropy.csv").read_text().splitlines()
        assert rows[0] == "x,y,entropy" and len(rows) == 2

    def test_entropy_bounds_and_probability_normalization(self, tiny_dataset, trained_run,
                                                          tmp_path, capsys):
        out = tmp_path / "maps"
        assert run_cli("entropy-map", "--checkpoint", str(trained_run / "best.ckpt"),
                       "--dataset", str(tiny_dataset), "--task-index", "1",
                       "--grid", "5x4", "--range", "-3:3", "--out", str(out)) == 0
        capsys.readouterr()
        ent = np.array([float(r.split(",")[2])
                        for r in (out / "entropy.csv").read_text().splitlines()[1:]])
        assert ent.shape == (20,)
        assert np.all(ent >= 0.0) and np.all(ent <= math.log(10.0) + 1e-9)
        totals = np.zeros(20)
        for k in range(10):
            rows = (out / f"cluster_{k:02d}.csv").read_text().splitlines()[1:]
            totals += np.array([float(r.split(",")[2]) for r in rows])
        np.testing.assert_allclose(totals, 1.0, atol=1e-5)

    def test_out_of_range_task_index_exits_3(self, tiny_dataset, trained_run, capsys, tmp_path):
        assert run_cli("entropy-map", "--checkpoint", str(trained_run / "best.ckpt"),
                       "--dataset", str(tiny_dataset), "--task-index", "999",
                       "--grid", "2x2", "--range", "-1:1", "--out", str(tmp_path / "m")) == 3
        capsys.readouterr()

    def test_bad_grid_spec_exits_3(self, tiny_dataset, trained_run, capsys, tmp_path):
        assert run_cli("entropy-map", "--checkpoint", str(trained_run / "best.ckpt"),
                       "--dataset", str(tiny_dataset), "--task-index", "0",
                       "--grid", "axb", "--range", "-1:1", "--out", str(tmp_path / "m")) == 3
        capsys.readouterr()
