import shutil
import subprocess
import sys

import pytest

from structprune.checkpoint import load_checkpoint
from structprune.cli import main
from structprune.config import RunConfig, dump_config

from test_driver import TINY


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(dump_config(RunConfig(**TINY, rounds=1, output_dir=str(tmp_path / "out"))))
    return path


def test_compress_then_report_eval_purify_scratch(cfg_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["compress", "--config", str(cfg_file)]) == 0
    text = capsys.readouterr().out
    assert "phase2" in text and (out / "final.acmp").exists()

    assert main(["report", "--config", str(cfg_file), "--csv"]) == 0
    csv = capsys.readouterr().out.splitlines()
    assert csv[0].startswith("round,phase,objective") and len(csv) == 4

    assert main(["eval", "--config", str(cfg_file)]) == 0
    assert "rates vs dense baseline" in capsys.readouterr().out

    assert main(["purify", "--config", str(cfg_file), "--checkpoint", str(out / "round-1.acmp")]) == 0
    assert (out / "purified.acmp").exists()
    capsys.readouterr()

    assert main(["scratch", "--config", str(cfg_file)]) == 0
    assert "from scratch" in capsys.readouterr().out
    assert "scratch" in (out / "report.csv").read_text()


def test_train_with_flag_overrides(cfg_file, tmp_path, capsys):
    assert main(["train", "--config", str(cfg_file), "--seed", "3", "--output", str(tmp_path / "o2")]) == 0
    ck = load_checkpoint(tmp_path / "o2" / "baseline.acmp")
    assert ck.metadata["seed"] == "3" and ck.metadata["stage"] == "trained"


def test_floor_abort_exit_code(cfg_file, capsys):
    assert main(["compress", "--config", str(cfg_file), "--acc-floor", "1.0", "--objective", "flops"]) == 2
    assert "ABORTED" in capsys.readouterr().out


def test_resume_flag(cfg_file, tmp_path, capsys):
    assert main(["compress", "--config", str(cfg_file)]) == 0
    first = capsys.readouterr().out
    assert main(["compress", "--config", str(cfg_file), "--resume", str(tmp_path / "out")]) == 0
    assert capsys.readouterr().out.splitlines()[:4] == first.splitlines()[:4]


def test_errors_exit_with_one(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense_key = 1\n")
    assert main(["train", "--config", str(bad)]) == 1
    assert "unknown key" in capsys.readouterr().err
    junk = tmp_path / "junk.acmp"
    junk.write_bytes(b"NOPE")
    assert main(["eval", "--checkpoint", str(junk)]) == 1
    assert "magic" in capsys.readouterr().err
    assert main(["report", "--output", str(tmp_path / "empty")]) == 1


def test_usage_errors():
    with pytest.raises(SystemExit):
        main([])
    with pytest.raises(SystemExit):
        main(["compress", "--objective", "latency"])


def test_module_and_console_script(tmp_path):
    run = subprocess.run([sys.executable, "-m", "structprune.cli", "--help"], capture_output=True, text=True)
    assert run.returncode == 0 and "compress" in run.stdout
    exe = shutil.which("structprune")
    if exe is None:
        pytest.skip("console script not installed")
    assert subprocess.run([exe, "report", "--help"], capture_output=True).returncode == 0
