import json
import math

import numpy as np
import pytest

import inv2a


def test_metric_fixtures():
    assert inv2a.bleu("the red fox runs", "the red fox runs") == pytest.approx(100.0)
    assert inv2a.token_f1("the red fox", "a red fox runs") == pytest.approx(400.0 / 7.0)
    assert inv2a.exact_match(" the fox ", "the fox") == 1
    report = inv2a.evaluate([("the fox", "the fox"), ("a cat", "the dog")], "bleu,exact")
    assert report["n_samples"] == 2
    assert report["exact"] == pytest.approx(50.0)


def test_templates():
    assert inv2a.render_rewrite("y").endswith("keeping the same semantics: y")
    assert "Prompt A: a Prompt B: b" in inv2a.render_judge("a", "b")


def test_knn_mi_on_gaussians():
    rng = np.random.default_rng(0)
    u = rng.standard_normal((1000, 1))
    v = 0.9 * u + math.sqrt(1 - 0.81) * rng.standard_normal((1000, 1))
    assert abs(inv2a.knn_mutual_information(u, v) - 0.8304) < 0.1
    assert inv2a.knn_mutual_information(u, rng.standard_normal((1000, 1))) < 0.05


def test_perturbation_and_errors():
    text = "the small red fox runs in the night"
    assert inv2a.perturb_output(text, "random_swap", 0.0) == text
    assert inv2a.perturb_output(text, "random_swap", 0.5, seed=3) != text
    with pytest.raises(inv2a.SpecError):
        inv2a.perturb_output(text, "shuffle", 0.5)
    with pytest.raises(inv2a.ValidationError):
        inv2a.perturb_output(text, "random_swap", 2.0)


def test_dataset_and_config(tmp_path):
    inv2a.write_toy_dataset(tmp_path / "train.jsonl", 5, seed=1)
    records = inv2a.ingest_dataset(tmp_path / "train.jsonl")
    assert len(records) == 5
    assert len(inv2a.toy_prompts(5, 1)) == 5

    cfg = {
        "decoder": "toy-decoder",
        "encoder": "enc",
        "train_dataset": str(tmp_path / "train.jsonl"),
        "test_dataset": str(tmp_path / "train.jsonl"),
        "output_dir": str(tmp_path / "a"),
    }
    h = inv2a.config_hash(cfg)
    assert inv2a.config_hash(dict(cfg, output_dir=str(tmp_path / "b"))) == h
    assert inv2a.config_hash(dict(cfg, seed=5)) != h
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert inv2a.load_config(tmp_path / "cfg.json")["decoder"] == "toy-decoder"

    plan = inv2a.run_experiment(cfg, dry_run=True)["plan"]
    assert [p["stage"] for p in plan] == inv2a.stage_order()
    with pytest.raises(inv2a.ValidationError):
        inv2a.run_experiment(dict(cfg, method="telepathy"))


def test_missing_model():
    with pytest.raises(inv2a.ModelNotFound):
        inv2a.CausalLM.load("/nonexistent/inv2a/model")
