import json

import numpy as np
import pytest

from conftest import GOLDEN
from sinktrack import CANONICAL_CONFIG, make_toy_model
from sinktrack.anchor import from_prompt
from sinktrack.cli import main
from sinktrack.injection import InjectionPlan
from sinktrack.instrumentation import AttentionTrace, value_norm_report
from sinktrack.model import generate
from sinktrack.weights_io import load_model, save_tensors

GOLDEN_GEN = json.loads((GOLDEN / "cli_sinktrack_tokens.json").read_text())
PROMPT = ",".join(map(str, GOLDEN_GEN["prompt"]))


@pytest.fixture(scope="module")
def model_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "canonical.stkw"
    assert main(["make-toy-model", "--out", str(path)]) == 0
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def tokens_of(stdout):
    return [int(line) for line in stdout.split()]


class TestMakeToyModel:
    def test_defaults_are_canonical(self, model_path, canonical):
        w = load_model(model_path)
        assert w.config == CANONICAL_CONFIG
        np.testing.assert_array_equal(w.embedding, canonical.embedding)

    def test_bad_heads(self, capsys, tmp_path):
        code, _, err = run(capsys, "make-toy-model", "--out", tmp_path / "m", "--d-model", 30)
        assert code == 2 and "divisible" in err

    def test_repeatable(self, capsys, tmp_path, model_path):
        run(capsys, "make-toy-model", "--out", tmp_path / "again")
        assert (tmp_path / "again").read_bytes() == model_path.read_bytes()

    def test_env_seed(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("STKW_SEED", "7")
        code, out, _ = run(capsys, "make-toy-model", "--out", tmp_path / "m", "--layers", 1)
        assert code == 0 and json.loads(out)["seed"] == 7
        code, out, _ = run(capsys, "make-toy-model", "--out", tmp_path / "m", "--seed", 3)
        assert json.loads(out)["seed"] == 3

    def test_unwritable(self, capsys, tmp_path):
        code, _, err = run(capsys, "make-toy-model", "--out", tmp_path / "no" / "m")
        assert code == 1 and "no" in err


class TestGen:
    def test_none_matches_library(self, capsys, model_path, canonical):
        code, out, _ = run(capsys, "gen", "--model", model_path, "--prompt", PROMPT, "--max-new-tokens", 12)
        assert code == 0
        assert tokens_of(out) == generate(GOLDEN_GEN["prompt"], canonical, max_new_tokens=12).tokens

    def test_soft_alpha_one_is_none(self, capsys, model_path):
        _, none, _ = run(capsys, "gen", "--model", model_path, "--prompt", PROMPT)
        code, soft, _ = run(capsys, "gen", "--model", model_path, "--prompt", PROMPT, "--mode", "soft",
                            "--alpha-kind", "constant", "--alpha", 1.0, "--schedule", "all")
        assert code == 0 and soft == none

    def test_sinktrack_golden(self, capsys, model_path):
        code, out, _ = run(capsys, "gen", "--model", model_path, "--prompt", PROMPT, *GOLDEN_GEN["argv"])
        assert code == 0
        assert tokens_of(out) == GOLDEN_GEN["tokens"]

    def test_prompt_file_and_config(self, capsys, model_path, tmp_path):
        (tmp_path / "p.txt").write_text(PROMPT.replace(",", " ") + "\n")
        cfg = {"model": str(model_path), "mode": "sinktrack", "k": 5, "max_new_tokens": 16}
        (tmp_path / "run.json").write_text(json.dumps(cfg))
        code, out, _ = run(capsys, "gen", "--config", tmp_path / "run.json", "--prompt-file", tmp_path / "p.txt")
        assert code == 0 and tokens_of(out) == GOLDEN_GEN["tokens"]

    def test_unknown_config_key(self, capsys, model_path, tmp_path):
        (tmp_path / "run.json").write_text(json.dumps({"model": str(model_path), "colour": "red"}))
        code, _, err = run(capsys, "gen", "--config", tmp_path / "run.json", "--prompt", "0,1")
        assert code == 2 and "colour" in err

    @pytest.mark.parametrize("extra", [
        ["--mode", "soft", "--alpha", "1.2"],
        ["--mode", "sinktrack", "--alpha", "0.5"],
        ["--mode", "hard", "--schedule", "explicit", "--layers", "9"],
        ["--mode", "hard", "--source", "full"],
        ["--mode", "sinktrack", "--span", "0:3"],
    ])
    def test_invalid_plans(self, capsys, model_path, extra):
        code, _, err = run(capsys, "gen", "--model", model_path, "--prompt", PROMPT, *extra)
        assert code == 2 and err.startswith("error:")

    def test_bad_prompt(self, capsys, model_path):
        assert run(capsys, "gen", "--model", model_path, "--prompt", "3,4")[0] == 2
        assert run(capsys, "gen", "--model", model_path, "--prompt", "0,99")[0] == 2
        assert run(capsys, "gen", "--model", model_path)[0] == 2

    def test_missing_model(self, capsys, tmp_path):
        assert run(capsys, "gen", "--model", tmp_path / "nope", "--prompt", "0,1")[0] == 1

    def test_external_info(self, capsys, model_path, tmp_path, canonical):
        rows = canonical.embedding[[3, 4, 5]]
        save_tensors({"feat": rows}, tmp_path / "info.stkw")
        code, out, _ = run(capsys, "gen", "--model", model_path, "--prompt", PROMPT, "--mode", "sinktrack",
                           "--info-tensor", tmp_path / "info.stkw", "--max-new-tokens", 4)
        assert code == 0 and len(tokens_of(out)) == 4

    def test_trace_written(self, capsys, model_path, tmp_path):
        path = tmp_path / "t.jsonl"
        run(capsys, "gen", "--model", model_path, "--prompt", "0,5,6", "--max-new-tokens", 2, "--trace", path)
        tr = AttentionTrace.load(path)
        assert tr.steps() == [0, 1, 2] and len(tr.bos_values) == 4


@pytest.fixture(scope="module")
def traces(model_path, tmp_path_factory):
    d = tmp_path_factory.mktemp("traces")
    main(["gen", "--model", str(model_path), "--prompt", PROMPT, "--max-new-tokens", "8",
          "--trace", str(d / "none.jsonl")])
    main(["gen", "--model", str(model_path), "--prompt", PROMPT, "--max-new-tokens", "8",
          "--mode", "sinktrack", "--trace", str(d / "sink.jsonl")])
    return d


class TestAnalyze:
    def test_spearman_self(self, capsys, traces):
        t = traces / "none.jsonl"
        code, out, _ = run(capsys, "analyze", "spearman", "--before", t, "--after", t)
        assert code == 0 and json.loads(out)["rho"] == 1.0

    def test_drift_csv(self, capsys, traces):
        code, out, _ = run(capsys, "analyze", "drift", "--trace", traces / "none.jsonl",
                           "--checkpoints", "1,8", "--format", "csv")
        lines = out.strip().splitlines()
        assert code == 0 and len(lines) == 3
        assert lines[1].startswith("1,17,") and lines[2].startswith("8,24,")

    def test_drift_empty(self, capsys, tmp_path):
        (tmp_path / "e.jsonl").write_text("")
        assert run(capsys, "analyze", "drift", "--trace", tmp_path / "e.jsonl")[0] == 2

    def test_drift_missing_file(self, capsys, tmp_path):
        assert run(capsys, "analyze", "drift", "--trace", tmp_path / "absent.jsonl")[0] == 2

    def test_l1norm_matches_library(self, capsys, traces, canonical):
        code, out, _ = run(capsys, "analyze", "l1norm", "--before", traces / "none.jsonl",
                           "--after", traces / "sink.jsonl")
        assert code == 0
        prompt = GOLDEN_GEN["prompt"]
        base = generate(prompt, canonical, max_new_tokens=8)
        sink = generate(prompt, canonical, InjectionPlan(), from_prompt(prompt, canonical, "full"),
                        max_new_tokens=8)
        lib = value_norm_report(base, sink)
        got = json.loads(out)["rows"]
        assert [r["difference"] for r in got] == lib.differences
        assert [r["l1_before"] for r in got] == [r.l1_before for r in lib.rows]


class TestBench:
    def test_single_rep(self, capsys, model_path):
        code, out, _ = run(capsys, "bench-prefill", "--model", model_path, "--reps", 1, "--prompt-len", 8)
        d = json.loads(out)
        assert code == 0 and d["std_ms_with"] == 0.0 and d["std_ms_without"] == 0.0

    def test_none_vs_none(self, capsys, model_path):
        code, out, _ = run(capsys, "bench-prefill", "--model", model_path, "--reps", 200, "--prompt-len", 16,
                           "--mode", "none")
        d = json.loads(out)
        # sigma is the standard error of the difference of means
        assert code == 0 and abs(d["overhead_ms"]) < 3 * max(d["overhead_se_ms"], 1e-4)

    def test_zero_reps(self, capsys, model_path):
        assert run(capsys, "bench-prefill", "--model", model_path, "--reps", 0)[0] == 2
