import json

import numpy as np
import pytest

from snforge import SubnetworkConfig, Supernet, SupernetConfig, count_params, extract_dense
from snforge.checkpoint import load_model, read_archive, save_model
from snforge.cli import main
from snforge.data import save_corpus
from snforge.model import DenseModel
from snforge.space import SearchSpace, save_space
from snforge.train import read_metrics

SUP = SupernetConfig(2, 8, 2, 4, 16, vocab_size=256, max_seq=16)


@pytest.fixture
def workspace(tmp_path, small_corpus):
    save_corpus(small_corpus, tmp_path / "corpus.snfc")
    save_model(tmp_path / "super.snfw", Supernet(SUP, seed=1))
    save_space(SearchSpace("coarse", "layerwise"), tmp_path / "space.json")
    (tmp_path / "evo.json").write_text(json.dumps({"population": 6, "elites": 2, "epochs": 3, "offspring": 3,
                                                   "random_samples": 2, "seed": 4}))
    (tmp_path / "train.json").write_text(json.dumps({"total_tokens": 8 * 16 * 4, "global_batch": 8,
                                                     "micro_batch": 4, "seq_len": 16, "eval_interval": 2,
                                                     "eval_batches": 2, "eval_batch_size": 4, "lr": 1e-3}))
    return tmp_path


def _bins(ws):
    sizes = sorted(count_params(SUP, c) for c in [SUP.full_subnet()])
    return f"1:{sizes[-1] // 2},{sizes[-1] // 2 + 1}:{sizes[-1]}"


def _search(ws, out, *extra):
    return main(["search", "--space", str(ws / "space.json"), "--supernet", str(ws / "super.snfw"),
                 "--bins", _bins(ws), "--evo", str(ws / "evo.json"), "--corpus", str(ws / "corpus.snfc"),
                 "--out", str(ws / out), "--eval-batches", "2", "--eval-batch-size", "4", "--seq-len", "16", *extra])


def test_search_end_to_end_and_deterministic(workspace):
    assert _search(workspace, "s1") == 0
    assert _search(workspace, "s2") == 0
    for i in range(2):
        best = json.loads((workspace / f"s1/best_bin{i}.json").read_text())
        cfg = SubnetworkConfig.from_dict(best["config"])
        assert count_params(SUP, cfg) == best["params"]
    a = (workspace / "s1/history.csv").read_bytes()
    assert a == (workspace / "s2/history.csv").read_bytes()
    assert (workspace / "s1/best_bin0.json").read_bytes() == (workspace / "s2/best_bin0.json").read_bytes()
    man = json.loads((workspace / "s1/manifest.json").read_text())
    assert man["status"] == "ok" and man["command"] == "search" and man["seed"] == 4
    assert "history.csv" in man["artifacts"] and len(man["input_hash"]) == 64


def test_search_seed_flag_overrides_file(workspace):
    assert _search(workspace, "s1") == 0
    assert _search(workspace, "s3", "--seed", "99") == 0
    man = json.loads((workspace / "s3/manifest.json").read_text())
    assert man["config"]["evo"]["seed"] == 99 and man["config"]["evo"]["population"] == 6


def test_search_importance_metric(workspace):
    assert _search(workspace, "imp", "--metric", "importance") == 0
    assert (workspace / "imp/importance.snfw").is_file()
    assert (workspace / "imp/best_bin0.json").is_file()


def test_infeasible_bin_exit_code(workspace, capsys):
    code = main(["search", "--space", str(workspace / "space.json"), "--supernet", str(workspace / "super.snfw"),
                 "--bins", "1:2,1:100000000", "--evo", str(workspace / "evo.json"), "--max-attempts", "20",
                 "--corpus", str(workspace / "corpus.snfc"), "--out", str(workspace / "inf"),
                 "--eval-batches", "1", "--eval-batch-size", "2", "--seq-len", "16"])
    assert code == 3
    assert "INFEASIBLE" in capsys.readouterr().out
    assert not (workspace / "inf/best_bin0.json").exists() and (workspace / "inf/best_bin1.json").exists()
    assert json.loads((workspace / "inf/manifest.json").read_text())["status"] == "partial"


def test_extract_full_and_partial(workspace, capsys):
    (workspace / "full.json").write_text(SUP.full_subnet().to_json())
    assert main(["extract", "--supernet", str(workspace / "super.snfw"), "--config", str(workspace / "full.json"),
                 "--out", str(workspace / "full.snfw")]) == 0
    _, src = read_archive(workspace / "super.snfw")
    _, dst = read_archive(workspace / "full.snfw")
    assert all(src[k].tobytes() == dst[k].tobytes() for k in src)
    capsys.readouterr()

    cfg = SubnetworkConfig(l=1, e=4, h=[1], h_s=[2], d=[8], q=[1])
    (workspace / "sub.json").write_text(cfg.to_json())
    assert main(["extract", "--supernet", str(workspace / "super.snfw"), "--config", str(workspace / "sub.json"),
                 "--out", str(workspace / "sub.snfw")]) == 0
    assert int(capsys.readouterr().out.strip()) == count_params(SUP, cfg)
    dense, _ = load_model(workspace / "sub.snfw")
    net, _ = load_model(workspace / "super.snfw")
    net.set_sub_network(cfg)
    x = np.arange(32).reshape(2, 16)
    assert np.abs(dense(x).data - net(x).data).max() < 1e-5


def test_extract_invalid_config(workspace, capsys):
    (workspace / "bad.json").write_text(json.dumps({"l": 3, "e": 8, "h": [2] * 3, "h_s": [4] * 3, "d": [16] * 3,
                                                    "q": [2] * 3}))
    code = main(["extract", "--supernet", str(workspace / "super.snfw"), "--config", str(workspace / "bad.json"),
                 "--out", str(workspace / "x.snfw")])
    assert code == 2 and "error" in capsys.readouterr().err


def _extract_half(ws):
    cfg = SubnetworkConfig(l=2, e=4, h=[1, 1], h_s=[4, 4], d=[8, 8], q=[1, 1])
    save_model(ws / "student.snfw", extract_dense(Supernet(SUP, seed=1), cfg))
    return ws / "student.snfw"


def test_pretrain_deterministic_and_eval_consistent(workspace, capsys):
    student = _extract_half(workspace)
    args = ["pretrain", "--model", str(student), "--corpus", str(workspace / "corpus.snfc"),
            "--train", str(workspace / "train.json")]
    assert main(args + ["--out", str(workspace / "p1")]) == 0
    assert main(args + ["--out", str(workspace / "p2")]) == 0
    assert (workspace / "p1/metrics.csv").read_bytes() == (workspace / "p2/metrics.csv").read_bytes()
    capsys.readouterr()
    assert main(["eval", "--model", str(workspace / "p1/model.snfw"), "--corpus", str(workspace / "corpus.snfc"),
                 "--train", str(workspace / "train.json")]) == 0
    printed = float(capsys.readouterr().out.strip())
    assert printed == read_metrics(workspace / "p1/metrics.csv")[-1]["val_ppl"]


def test_pretrain_random_init_differs(workspace):
    student = _extract_half(workspace)
    base = ["pretrain", "--model", str(student), "--corpus", str(workspace / "corpus.snfc"),
            "--train", str(workspace / "train.json")]
    assert main(base + ["--out", str(workspace / "warm")]) == 0
    assert main(base + ["--out", str(workspace / "cold"), "--init", "random"]) == 0
    warm = read_metrics(workspace / "warm/metrics.csv")[0]["val_ppl"]
    cold = read_metrics(workspace / "cold/metrics.csv")[0]["val_ppl"]
    assert warm != cold


def test_pretrain_supernet_checkpoint_stays_supernet(workspace):
    assert main(["pretrain", "--model", str(workspace / "super.snfw"), "--corpus", str(workspace / "corpus.snfc"),
                 "--train", str(workspace / "train.json"), "--out", str(workspace / "sp")]) == 0
    model, _ = load_model(workspace / "sp/model.snfw")
    assert isinstance(model, Supernet)


def test_pretrain_resume_reproduces_tail(workspace):
    student = _extract_half(workspace)
    base = ["pretrain", "--model", str(student), "--corpus", str(workspace / "corpus.snfc"),
            "--train", str(workspace / "train.json"), "--save-interval", "2"]
    assert main(base + ["--out", str(workspace / "ref")]) == 0
    assert main(base + ["--out", str(workspace / "cut"), "--total-tokens", str(8 * 16 * 4)]) == 0
    # rewrite the cut run's state back to step 2 by running a shorter job, then resume the full one
    assert main(base + ["--out", str(workspace / "half"), "--total-tokens", str(8 * 16 * 2)]) == 0
    assert main(base + ["--out", str(workspace / "half"), "--resume"]) == 0
    ref = read_metrics(workspace / "ref/metrics.csv")
    res = read_metrics(workspace / "half/metrics.csv")
    assert [r["step"] for r in res] == [r["step"] for r in ref]
    assert res[-1]["step"] == ref[-1]["step"]


def test_distill_records_both_components(workspace):
    student = _extract_half(workspace)
    assert main(["distill", "--model", str(student), "--teacher", str(workspace / "super.snfw"),
                 "--corpus", str(workspace / "corpus.snfc"), "--train", str(workspace / "train.json"),
                 "--k", "32", "--out", str(workspace / "d")]) == 0
    header = (workspace / "d/metrics.csv").read_text().splitlines()[0].split(",")
    assert "ce_component" in header and "kl_component" in header
    rows = read_metrics(workspace / "d/metrics.csv")
    assert rows[-1]["ce_component"] > 0 and rows[-1]["kl_component"] > 0
    man = json.loads((workspace / "d/manifest.json").read_text())
    assert man["config"]["distill"]["k"] == 32 and man["config"]["distill"]["alpha"] == 0.2


def test_eval_uniform_model(workspace, capsys):
    m = DenseModel(Supernet(SUP).model.arch)
    m.params["lm_head"].data[...] = 0
    save_model(workspace / "u.snfw", m)
    assert main(["eval", "--model", str(workspace / "u.snfw"), "--corpus", str(workspace / "corpus.snfc"),
                 "--batches", "2", "--batch-size", "4", "--seq-len", "16"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(256.0, abs=1.0)


def test_eval_missing_file(workspace, capsys):
    assert main(["eval", "--model", str(workspace / "nope.snfw"), "--corpus", str(workspace / "corpus.snfc")]) != 0
    assert "not found" in capsys.readouterr().err


def test_make_corpus_and_init(tmp_path, capsys):
    (tmp_path / "t.txt").write_bytes(b"hello world " * 100)
    assert main(["make-corpus", "--input", str(tmp_path / "t.txt"), "--out", str(tmp_path / "c.snfc")]) == 0
    assert main(["make-corpus", "--synthetic", "5000", "--out", str(tmp_path / "s.snfc")]) == 0
    assert main(["init-supernet", "--n-layer", "2", "--n-embd", "8", "--n-head", "2", "--head-size", "4",
                 "--intermediate-size", "16", "--max-seq", "16", "--out", str(tmp_path / "n.snfw")]) == 0
    net, _ = load_model(tmp_path / "n.snfw")
    assert net.config == SUP
    save_space(SearchSpace("coarse", "uniform"), tmp_path / "sp.json")
    capsys.readouterr()
    assert main(["space", "--space", str(tmp_path / "sp.json"), "--supernet", str(tmp_path / "n.snfw")]) == 0
    assert "coarse-uniform" in capsys.readouterr().out
