import json

import pytest
import torch

from fuseser import cli, gradchecks
from fuseser.dataio import load_dataset, synthetic_vocab
from fuseser.diffcore import finite_diff_gradcheck
from fuseser.evalens import PredictionSet, all_metrics

FAST_TRAIN = {"epochs": 2, "warmup_steps": 2, "lr_max": 1e-3, "lr_min": 1e-4}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["gen-synthetic", "--out", str(out), "--seed", "4", "--per-class", "8"]) == 0
    return out / "manifest.jsonl"


@pytest.fixture(scope="module")
def config(corpus, tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "run.json"
    p.write_text(json.dumps({"manifest": str(corpus), "train": FAST_TRAIN}))
    return p


@pytest.fixture(scope="module")
def trained(config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--config", str(config), "--strategy", "MDAT", "--out", str(out)]) == 0
    return out


def test_gen_synthetic_bad_config(tmp_path):
    assert cli.main(["gen-synthetic", "--out", str(tmp_path / "x"), "--per-class", "0"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"synthetic": {"bogus": 1}}))
    assert cli.main(["gen-synthetic", "--config", str(bad), "--out", str(tmp_path / "y")]) == 2


def test_config_schema_rejects_unknown_top_level(tmp_path, corpus):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"manifest": str(corpus), "extra": 1}))
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_train_outputs_and_strategy_round_trip(trained):
    run = json.loads((trained / "run_manifest.json").read_text())
    assert run["head"]["strategy"] == "MDAT"
    assert run["train"]["epochs"] == 2
    assert len((trained / "metrics.jsonl").read_text().splitlines()) == 2
    assert (trained / "checkpoint.bin").exists()


def test_predict_then_evaluate_matches_library(trained, corpus, tmp_path, capsys):
    preds = tmp_path / "mdat.jsonl"
    args = ["predict", "--config", str(trained / "run_manifest.json"),
            "--checkpoint", str(trained / "checkpoint.bin"), "--out", str(preds)]
    assert cli.main(args) == 0
    val = load_dataset(corpus, synthetic_vocab(4), split="val")
    ps = PredictionSet.load(preds, synthetic_vocab(4))
    assert set(ps.predictions) == {e.id for e in val.examples}

    capsys.readouterr()
    assert cli.main(["evaluate", str(preds), "--manifest", str(corpus)]) == 0
    printed = dict(line.split() for line in capsys.readouterr().out.splitlines())
    ids = sorted(ps.predictions)
    refs = {e.id: e.label for e in val.examples}
    expected = all_metrics([refs[i] for i in ids], ps.labels_for(ids), 4)
    for key, value in expected.items():
        assert printed[key] == f"{value:.3f}"


def test_predict_under_other_strategy_rejected(trained, config, tmp_path):
    args = ["predict", "--config", str(config), "--strategy", "SIMPLE",
            "--checkpoint", str(trained / "checkpoint.bin"), "--out", str(tmp_path / "p.jsonl")]
    assert cli.main(args) == 2


def test_evaluate_empty_file(corpus, tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert cli.main(["evaluate", str(empty), "--manifest", str(corpus)]) == 2


def test_evaluate_missing_file_is_data_error(corpus, tmp_path):
    assert cli.main(["evaluate", str(tmp_path / "none.jsonl"), "--manifest", str(corpus)]) == 1


def _write_preds(directory, corpus, names):
    val = load_dataset(corpus, synthetic_vocab(4), split="val")
    for k, name in enumerate(names):
        preds = {e.id: (e.label if (j + k) % 3 else (e.label + 1) % 4) for j, e in enumerate(val.examples)}
        PredictionSet(name, preds).save(directory / f"{name}.jsonl", synthetic_vocab(4))


def test_ensemble_search_cli(corpus, tmp_path):
    d = tmp_path / "preds"
    _write_preds(d, corpus, ["a", "b"])
    assert cli.main(["ensemble-search", "--manifest", str(corpus), "--predictions", str(d),
                     "--best-model", "a"]) == 2
    _write_preds(d, corpus, ["a", "b", "c", "d"])
    out = tmp_path / "table.json"
    assert cli.main(["ensemble-search", "--manifest", str(corpus), "--predictions", str(d),
                     "--best-model", "a", "--out", str(out)]) == 0
    table = json.loads(out.read_text())
    assert len(table) == 4 and all("a" in row["members"] for row in table)


def test_gradcheck_linear_passes():
    assert cli.main(["gradcheck", "linear", "--seeds", "3"]) == 0


def test_gradcheck_unknown_layer():
    assert cli.main(["gradcheck", "nope"]) == 2


def test_gradcheck_injected_bug_fails(monkeypatch):
    class Doubled(torch.autograd.Function):
        generate_vmap_rule = True

        @staticmethod
        def forward(x):
            return torch.sin(x)

        @staticmethod
        def setup_context(ctx, inputs, output):
            ctx.save_for_backward(inputs[0])

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return 2 * torch.cos(x) * g

    def broken(seed):
        x = torch.randn(5, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
        return finite_diff_gradcheck(lambda v: Doubled.apply(v["x"]), {"x": x})

    monkeypatch.setitem(gradchecks.REGISTRY, "broken", broken)
    assert cli.main(["gradcheck", "broken", "--seeds", "2"]) == 1


def test_bad_thread_env(monkeypatch):
    monkeypatch.setenv("FUSESER_THREADS", "many")
    assert cli.main(["gradcheck", "linear", "--seeds", "1"]) == 2
    monkeypatch.setenv("FUSESER_THREADS", "0")
    assert cli.main(["gradcheck", "linear", "--seeds", "1"]) == 2
