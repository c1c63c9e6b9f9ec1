import json

import pytest

from nm_ast import checkpoint as ck
from nm_ast.cli import main
from nm_ast.config import RunConfig
from nm_ast.sparsity import check_pattern
from nm_ast.trainer import CSV_HEADER

TINY = RunConfig(d_model=16, n_heads=2, context_length=16, seq_len=16, batch_size=4, pretrain_steps=30,
                 pretrain_lr=1e-2, steps=20, lr=3e-3, refresh_interval=5, eval_every=10, eval_batch_size=8,
                 slorb_k=4)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.json").write_text(TINY.to_json())
    assert main(["make-corpus", "--out", str(d / "corpus.txt"), "--bytes", "12000"]) == 0
    assert main(["train-dense", "--config", str(d / "tiny.json"), "--data", str(d / "corpus.txt"),
                 "--out", str(d / "teacher.ckpt")]) == 0
    return d


def run_args(d, *extra):
    return ["--config", str(d / "tiny.json"), "--data", str(d / "corpus.txt"), *extra]


def test_missing_config_exit_2_names_path(work, capsys):
    missing = str(work / "nope.json")
    code = main(["train-dense", "--config", missing, "--data", str(work / "corpus.txt"), "--out", str(work / "x")])
    assert code == 2
    assert missing in capsys.readouterr().err


def test_bad_config_exit_2(work, capsys):
    (work / "bad.json").write_text('{"stepz": 1}')
    code = main(["config", "dump", "--config", str(work / "bad.json")])
    assert code == 2 and "stepz" in capsys.readouterr().err


def test_train_dense_metrics_and_eval_match(work, capsys):
    csv = (work / "teacher.metrics.csv").read_text().splitlines()
    assert csv[0] == CSV_HEADER
    logged = [line for line in csv if ",val,ppl," in line][-1].split(",")[3]
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(work / "teacher.ckpt"), "--data", str(work / "corpus.txt")]) == 0
    assert capsys.readouterr().out.strip() == logged


def test_one_shot_satisfies_pattern_and_header(work):
    out = work / "oneshot.ckpt"
    assert main(["retrain-sparse", *run_args(work, "--teacher", str(work / "teacher.ckpt"),
                                             "--out", str(out), "--mode", "one-shot")]) == 0
    c = ck.load(out)
    assert c.mode == "one_shot" and c.model.masked_layers()
    for lin in c.model.masked_layers().values():
        check_pattern(lin.mask.array, TINY.nm_pattern())


def test_ast_run_emits_flip_rows_and_records_decay(work):
    out = work / "ast.ckpt"
    assert main(["retrain-sparse", *run_args(work, "--teacher", str(work / "teacher.ckpt"), "--out", str(out))]) == 0
    rows = [line.split(",") for line in (work / "ast.metrics.csv").read_text().splitlines()[1:]]
    flip_steps = sorted({int(r[0]) for r in rows if r[2] == "flip_rate" and r[4] == "all"})
    assert flip_steps == [5, 10, 15, 20]
    c = ck.load(out)
    assert c.mode == "ast" and c.max_decay == pytest.approx(TINY.max_decay)


def test_architecture_mismatch_exit_3(work, capsys):
    (work / "wide.json").write_text(TINY.replace(d_model=32).to_json())
    code = main(["retrain-sparse", "--config", str(work / "wide.json"), "--data", str(work / "corpus.txt"),
                 "--teacher", str(work / "teacher.ckpt"), "--out", str(work / "w.ckpt")])
    assert code == 3 and "d_model" in capsys.readouterr().err


def test_pack_dense_exit_4(work):
    assert main(["pack", "--ckpt", str(work / "teacher.ckpt"), "--out", str(work / "dense_pack")]) == 4


@pytest.mark.parametrize("coding", ["fixed", "huffman"])
def test_pack_unpack_check(work, coding, capsys):
    ckpt = work / "oneshot.ckpt"
    if not ckpt.exists():
        test_one_shot_satisfies_pattern_and_header(work)
    out = work / f"pack_{coding}"
    assert main(["pack", "--ckpt", str(ckpt), "--out", str(out), "--coding", coding]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    expected = 0.0625 + 3 / 128 if coding == "fixed" else (8 + 8 / 3) / 128
    assert manifest["total"]["analytic_ratio"] == pytest.approx(expected, abs=1e-12)
    assert all(m["analytic_ratio"] == pytest.approx(expected) for m in manifest["layers"].values())
    capsys.readouterr()
    assert main(["unpack", str(out), "--check", "--ckpt", str(ckpt)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("OK ") for line in lines)
    first = sorted(manifest["layers"].values(), key=lambda m: m["file"])[0]
    raw = bytearray((out / first["file"]).read_bytes())
    raw[30] ^= 0xFF
    (out / first["file"]).write_bytes(bytes(raw))
    assert main(["unpack", str(out), "--check"]) == 1


def test_ratios_output(capsys):
    assert main(["ratios", "--nmax", "32"]) == 0
    out = capsys.readouterr().out
    for row, pct in [("1:2", "7.8125"), ("2:4", "8.3333"), ("4:8", "8.6607"), ("8:16", "8.9310"),
                     ("16:32", "9.1029")]:
        line = next(line for line in out.splitlines() if line.split()[0] == row)
        assert line.split()[3] == pct
    assert out.strip().endswith("True")


def test_config_dump_roundtrip(work, capsys):
    assert main(["config", "dump", "--config", str(work / "tiny.json")]) == 0
    dumped = capsys.readouterr().out
    assert dumped == TINY.to_json()
    (work / "dumped.json").write_text(dumped)
    assert main(["config", "dump", "--config", str(work / "dumped.json")]) == 0
    assert capsys.readouterr().out == dumped
    assert main(["config", "dump"]) == 0
    assert RunConfig.from_json(capsys.readouterr().out) == RunConfig()


def test_unknown_mode_rejected_by_argparse(work):
    with pytest.raises(SystemExit) as exc:
        main(["retrain-sparse", *run_args(work, "--teacher", "t", "--out", "o", "--mode", "dense")])
    assert exc.value.code == 2
