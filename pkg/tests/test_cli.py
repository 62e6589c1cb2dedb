import json

import numpy as np
import pytest

from gsaudio.wavio import read_wav, write_wav

from conftest import run_cli


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    proc = run_cli(["gen-data", "--out", out, "--n", 12, "--seed", 5,
                    "--absorption", 0.7])
    assert proc.returncode == 0, proc.stderr
    return out


@pytest.fixture(scope="module")
def tiny_run(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run") / "run"
    proc = run_cli(["train", "--dataset", tiny_dataset, "--out", out,
                    "--iterations", 40, "--eval-interval", 20, "--seed", 5])
    assert proc.returncode == 0, proc.stderr
    return out


def test_gen_data_summary_and_exit(tiny_dataset):
    assert (tiny_dataset / "manifest.json").exists()
    manifest = json.loads((tiny_dataset / "manifest.json").read_text())
    assert len(manifest["samples"]) == 12


def test_gen_data_validates_minimum():
    proc = run_cli(["gen-data", "--out", "/tmp/nonexistent-ignored", "--n", 3])
    assert proc.returncode == 1
    assert "5" in proc.stderr


def test_gen_data_same_seed_identical_manifest(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        proc = run_cli(["gen-data", "--out", out, "--n", 6, "--seed", 9])
        assert proc.returncode == 0
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()


def test_train_metrics_line_count(tiny_run):
    lines = (tiny_run / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 40 // 20 + 1
    for line in lines:
        record = json.loads(line)
        assert record["schema_version"] == 1


def test_train_writes_checkpoints(tiny_run):
    for sub in ("final", "best"):
        for name in ("points.ply", "field.bin", "binauralizer.bin", "config.json"):
            assert (tiny_run / sub / name).exists()


def test_render_reports_rms(tiny_run, tmp_path):
    mono_path = tmp_path / "probe.wav"
    write_wav(mono_path, np.random.default_rng(0).standard_normal(22050) * 0.25, 22050)
    out_path = tmp_path / "out.wav"
    proc = run_cli(["render", "--checkpoint", tiny_run / "final", "--pose",
                    "3.0,2.0,1.5,1.57", "--mono", mono_path, "--out", out_path])
    assert proc.returncode == 0, proc.stderr
    report = json.loads(proc.stdout)
    assert report["left_rms"] > 0 and report["right_rms"] > 0
    data, sr = read_wav(out_path)
    assert data.shape == (22050, 2)
    assert sr == 22050


def test_render_silent_input_silent_output(tiny_run, tmp_path):
    mono_path = tmp_path / "silent.wav"
    write_wav(mono_path, np.zeros(22050), 22050)
    out_path = tmp_path / "out.wav"
    proc = run_cli(["render", "--checkpoint", tiny_run / "final", "--pose",
                    "3.0,2.0,1.5,0.0", "--mono", mono_path, "--out", out_path])
    assert proc.returncode == 0, proc.stderr
    report = json.loads(proc.stdout)
    assert report["left_rms"] == 0.0
    assert report["right_rms"] == 0.0


def test_render_outside_bounds_warns_but_renders(tiny_run, tmp_path):
    mono_path = tmp_path / "probe.wav"
    write_wav(mono_path, np.random.default_rng(1).standard_normal(22050) * 0.2, 22050)
    out_path = tmp_path / "out.wav"
    proc = run_cli(["render", "--checkpoint", tiny_run / "final", "--pose",
                    "40.0,2.0,1.5,0.0", "--mono", mono_path, "--out", out_path])
    assert proc.returncode == 0
    assert out_path.exists()


def test_eval_json_schema(tiny_run, tiny_dataset, tmp_path):
    out_path = tmp_path / "eval.json"
    proc = run_cli(["eval", "--checkpoint", tiny_run / "final", "--dataset",
                    tiny_dataset, "--split", "val", "--out", out_path])
    assert proc.returncode == 0, proc.stderr
    report = json.loads(proc.stdout)
    assert report["schema_version"] == 1
    assert report["mode"] == "binaural"
    assert set(report["metrics"]) == {"mag", "env"}
    assert set(report["baselines"]) == {"mono_mono", "mono_energy", "stereo_energy"}
    assert json.loads(out_path.read_text()) == report


def test_eval_mode_mismatch_is_config_error(tiny_dataset, tmp_path):
    out = tmp_path / "rir_run"
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"mode": "rir", "iterations": 5, "eval_interval": 5,
                                  "densify_interval": 0, "init_points": 64, "seed": 0}))
    proc = run_cli(["train", "--config", config, "--dataset", tiny_dataset, "--out", out])
    assert proc.returncode == 1  # dataset has no impulse responses
    assert "impulse" in proc.stderr


def test_unknown_config_key_rejected(tiny_dataset, tmp_path):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"iterations": 5, "bogus_knob": 1}))
    proc = run_cli(["train", "--config", config, "--dataset", tiny_dataset,
                    "--out", tmp_path / "x"])
    assert proc.returncode == 1
    assert "bogus_knob" in proc.stderr


def test_bench_report(tiny_run, tmp_path):
    out_path = tmp_path / "bench.json"
    proc = run_cli(["bench", "--checkpoint", tiny_run / "final", "--n", 10,
                    "--out", out_path])
    assert proc.returncode == 0, proc.stderr
    report = json.loads(proc.stdout)
    assert report["n_renders"] == 10
    assert len(report["latencies_s"]) == 10
    assert set(report["seconds_per_render"]) == {"mean", "median", "p95"}
    assert set(report["breakdown_mean_s"]) == {"context_s", "masks_s", "reconstruct_s"}


def test_bench_minimum_renders(tiny_run):
    proc = run_cli(["bench", "--checkpoint", tiny_run / "final", "--n", 5])
    assert proc.returncode == 1


def test_bench_identical_audio_despite_timing(tiny_run, tmp_path):
    mono_path = tmp_path / "probe.wav"
    write_wav(mono_path, np.random.default_rng(2).standard_normal(22050) * 0.2, 22050)
    outs = []
    for name in ("r1.wav", "r2.wav"):
        out_path = tmp_path / name
        proc = run_cli(["render", "--checkpoint", tiny_run / "final", "--pose",
                        "2.5,2.5,1.5,0.5", "--mono", mono_path, "--out", out_path])
        assert proc.returncode == 0
        outs.append(out_path.read_bytes())
    assert outs[0] == outs[1]


def test_resume_matches_one_shot(tiny_dataset, tmp_path):
    full = tmp_path / "full"
    proc = run_cli(["train", "--dataset", tiny_dataset, "--out", full,
                    "--iterations", 40, "--eval-interval", 20, "--seed", 8, "--threads", 1])
    assert proc.returncode == 0, proc.stderr
    part = tmp_path / "part"
    proc = run_cli(["train", "--dataset", tiny_dataset, "--out", part,
                    "--iterations", 20, "--eval-interval", 20, "--seed", 8, "--threads", 1])
    assert proc.returncode == 0, proc.stderr
    proc = run_cli(["train", "--dataset", tiny_dataset, "--out", part,
                    "--iterations", 40, "--eval-interval", 20, "--seed", 8,
                    "--resume", part / "final", "--threads", 1])
    assert proc.returncode == 0, proc.stderr
    full_last = (full / "metrics.jsonl").read_text().splitlines()[-1]
    part_last = (part / "metrics.jsonl").read_text().splitlines()[-1]
    assert full_last == part_last


def test_ablate_vicinity_rows(tiny_dataset, tmp_path):
    out = tmp_path / "ablate"
    proc = run_cli(["ablate", "--dataset", tiny_dataset, "--axis", "vicinity",
                    "--iterations", 10, "--out", out, "--seed", 5])
    assert proc.returncode == 0, proc.stderr
    table = json.loads((out / "ablation.json").read_text())
    assert [row["percentile"] for row in table["rows"]] == [5, 10, 15, 20, 25]
    for row in table["rows"]:
        assert "mag" in row and "env" in row
    csv_lines = (out / "ablation.csv").read_text().splitlines()
    assert csv_lines[0] == "label,percentile,mag,env"
    assert len(csv_lines) == 6


def test_missing_required_flag_is_usage_error(tiny_dataset):
    proc = run_cli(["train", "--dataset", tiny_dataset])
    assert proc.returncode == 1
    assert "--out" in proc.stderr


def test_default_dataset_size_is_100():
    from gsaudio.cli import load_run_config
    assert load_run_config()["n_samples"] == 100


def test_train_from_supplied_splat_ply(tiny_dataset, tmp_path):
    from gsaudio.scene import save_gaussian_cloud, synthetic_cloud

    cloud = synthetic_cloud([0, 0, 0], [6, 4, 3], 77, np.random.default_rng(6))
    ply = tmp_path / "splat.ply"
    save_gaussian_cloud(ply, cloud)
    out = tmp_path / "run"
    proc = run_cli(["train", "--dataset", tiny_dataset, "--out", out,
                    "--point-cloud", ply, "--iterations", 10,
                    "--eval-interval", 10, "--seed", 5])
    assert proc.returncode == 0, proc.stderr
    summary = json.loads(proc.stdout)
    assert summary["points"] == 77


def test_ablate_alpha_init_rows(tiny_dataset, tmp_path):
    out = tmp_path / "ablate_alpha"
    proc = run_cli(["ablate", "--dataset", tiny_dataset, "--axis", "alpha_init",
                    "--iterations", 8, "--out", out, "--seed", 5])
    assert proc.returncode == 0, proc.stderr
    table = json.loads((out / "ablation.json").read_text())
    labels = [row["label"] for row in table["rows"]]
    assert len(labels) == 11
    assert "SH,R" in labels
    by_label = {row["label"]: row for row in table["rows"]}
    assert by_label["SH,R"]["dim"] == 52
    assert by_label["O"]["dim"] == 1
    assert by_label["S,SH,R,O"]["dim"] == 56
    for row in table["rows"]:
        assert "mag" in row and "env" in row
