from pathlib import Path

from offline_cbdc.cli import main

EXAMPLES = Path(__file__).resolve().parents[1] / "examples_scenarios"


class TestScenarioCommand:
    def test_runs_example(self, capsys, tmp_path):
        trace, capture = tmp_path / "t.txt", tmp_path / "c.bin"
        rc = main(["scenario", "run", str(EXAMPLES / "basic.txt"), "--trace", str(trace), "--capture", str(capture)])
        out = capsys.readouterr().out
        assert rc == 0
        assert out.splitlines()[0] == "line|command|result"
        assert "in_flight 0" in out
        assert trace.read_text().strip() and capture.stat().st_size > 0

    def test_bad_script(self, capsys, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("user alice\nteleport alice\n")
        assert main(["scenario", "run", str(bad)]) == 2
        assert "line 2" in capsys.readouterr().err


class TestOtherCommands:
    def test_bench_csv(self, capsys):
        assert main(["bench", "--n", "0,1", "--format", "csv"]) == 0
        out = capsys.readouterr().out
        assert out.startswith("variant,mode,n")

    def test_attack_destroy(self, capsys):
        assert main(["attack", "destroy"]) == 0
        assert "detected True" in capsys.readouterr().out

    def test_attack_replay(self, capsys):
        assert main(["attack", "replay", "--trials", "20"]) == 0
        assert "double_credits 0" in capsys.readouterr().out
