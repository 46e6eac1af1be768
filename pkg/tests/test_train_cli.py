import json
import subprocess
import sys

import pytest
import torch

from msp_reid.cli import main
from msp_reid.config import load_config
from msp_reid.train import TrainingSet, batch_losses, build_model, build_training_set, load_dataset, make_target
from msp_reid.losses import positive_clothes_mask, total_loss
from msp_reid.train import loss_weights

SMALL = [
    "dataset.synthetic.num_identities=6", "dataset.synthetic.clothes_per_identity=2",
    "dataset.synthetic.hairstyles_per_identity=2", "dataset.synthetic.images_per_combination=2",
    "dataset.synthetic.num_test_identities=2", "sampler.P=2", "sampler.K=2",
    "schedule.epochs=2", "schedule.milestones=[1]", "eval.every=1", "model.embed_dim=16",
]


def _args(*extra):
    out = []
    for s in SMALL + list(extra):
        out += ["--set", s]
    return out


def _lines(path):
    return [json.loads(l) for l in path.read_text().splitlines()]


def test_train_logs_every_step_and_resumes(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), *_args()]) == 0
    payload = json.loads(capsys.readouterr().out)
    recs = _lines(tmp_path / "logs" / "loss.jsonl")
    # 4 train identities, P=2: two batches per epoch
    assert payload["steps"] == 4 and [r["step"] for r in recs] == [1, 2, 3, 4]
    assert {"L_id", "L_tri", "L_att", "L_cal", "L_total"} <= set(recs[0])
    for name in ("config.yaml", "checkpoints/last.pt", "checkpoints/best.pt", "reports/final.json"):
        assert (tmp_path / name).exists()
    # resuming a finished run with more epochs continues from step 4
    assert main(["train", "--out", str(tmp_path), *_args("schedule.epochs=3")]) == 0
    recs2 = _lines(tmp_path / "logs" / "loss.jsonl")
    assert recs2[:4] == recs and [r["step"] for r in recs2] == list(range(1, 7))


def test_zero_weights_reduce_to_id_loss():
    cfg = load_config(None, SMALL + ["loss.lambda_tri=0", "loss.lambda_att=0", "loss.lambda_cal=0"])
    ds = load_dataset(cfg)
    ts = build_training_set(ds, cfg, (8, 4))
    model = build_model(cfg, int(ts.identity.max()) + 1, int(ts.clothes.max()) + 1)
    idx = list(range(4))
    w = loss_weights(cfg)
    comps, _, _ = batch_losses(model, torch.as_tensor(ts.images[idx]).permute(0, 3, 1, 2).float() / 255,
                               torch.as_tensor(ts.identity[idx]), torch.as_tensor(ts.clothes[idx]),
                               make_target(ts, idx, w.epsilon),
                               positive_clothes_mask(ts.positive_clothes, int(ts.identity.max()) + 1,
                                                     int(ts.clothes.max()) + 1), w)
    assert torch.equal(total_loss(comps, w), comps["L_id"])


def test_checkpoint_hash_mismatch(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), *_args("schedule.epochs=1")]) == 0
    capsys.readouterr()
    code = main(["eval", "--out", str(tmp_path), *_args("model.embed_dim=32")])
    err = json.loads(capsys.readouterr().err)
    assert code == 1 and err["error"] == "checkpoint_error" and "hash" in err["message"]


def test_eval_and_probe_outputs(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), *_args("schedule.epochs=1")]) == 0
    assert main(["eval", "--out", str(tmp_path), "--dump-attention", "--dump-retrieval"]) == 0
    rep = json.loads((tmp_path / "reports" / "eval.json").read_text())
    assert {"standard", "cloth_changing"} <= set(rep)
    dataset = load_dataset(load_config(None, SMALL))
    n_query, n_gallery = len(dataset.subset("query")), len(dataset.subset("gallery"))
    assert len(list((tmp_path / "dumps" / "attention").glob("*.png"))) == n_query
    assert len((tmp_path / "dumps" / "top10.csv").read_text().splitlines()) == 1 + n_query * min(10, n_gallery)
    for target in ("hairstyle", "clothes"):
        assert main(["probe", "--out", str(tmp_path), "--target", target]) == 0
    assert main(["probe", "--out", str(tmp_path), "--shuffle-labels"]) == 0
    shuffled = json.loads((tmp_path / "reports" / "probe_hairstyle_shuffled.json").read_text())
    assert shuffled["shuffled"] and 0 <= shuffled["accuracy"] <= 1


def test_augment_quadruples_and_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["augment", "--out", str(out), *_args()]) == 0
    summary = json.loads((a / "reports" / "augment.json").read_text())
    n_train = 4 * 2 * 2 * 2
    assert summary["augmented"] == 3 * n_train
    rows = _lines(a / "augment_manifest.jsonl")
    assert len(rows) == 3 * n_train and {r["style"] for r in rows} == {"short", "medium", "long"}
    assert (a / "augment_manifest.jsonl").read_bytes() == (b / "augment_manifest.jsonl").read_bytes()
    for row in rows[:5]:
        assert (a / row["output_path"]).read_bytes() == (b / row["output_path"]).read_bytes()


def test_errors_exit_codes(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "bogus.key=1"]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "configuration_error"
    assert main(["eval", "--out", str(tmp_path / "nothing")]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "checkpoint_error"


def test_console_script_runs():
    r = subprocess.run([sys.executable, "-m", "msp_reid.cli", "train", "--out", "/nonexistent/x",
                        "--set", "sampler.P=0"], capture_output=True, text=True)
    assert r.returncode == 2 and "configuration_error" in r.stderr
