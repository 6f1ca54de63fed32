"""Acceptance gate: one PASS/FAIL line per criterion, at the stated tolerances.

Run ``pytest tests/test_acceptance.py -v`` (lines are printed even under
capture) or ``python tests/test_acceptance.py`` for the bare report.
"""
import itertools
import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from wemnet import autodiff as ad
from wemnet.autodiff import Tensor
from wemnet.cli import main as cli_main
from wemnet.harness import RunConfig, ablation_run, gradcheck_run, probe_run, train
from wemnet.masks import batch_class_mask, weight_mask, weight_threshold
from wemnet.model import WemnetModel

SEEDS = range(10)
STANDARD = dict(n_per_domain=500, noise_sigma=0.1, rotation_deg=30.0)


def report(capsys, number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    if capsys is None:
        print(line)
    else:
        with capsys.disabled():
            print("\n" + line)
    assert ok, line


def small_model(seed=0, **kw):
    model = WemnetModel(5, 8, 3, seed=seed, **kw)
    rng = np.random.default_rng(seed + 100)
    x_s = Tensor(rng.normal(size=(4, 5)))
    x_t = Tensor(rng.normal(size=(4, 5)) + 0.5)
    y_s = Tensor(np.eye(3)[[0, 1, 2, 0]])
    return model, (x_s, y_s, x_t)


def backbone_grads(model):
    return [p.grad.copy() for name, p in model.named_parameters().items() if name.startswith("backbone.")]


def clear_grads(model):
    for p in model.parameters():
        p.grad = None


def test_c1_gradient_check(capsys):
    start = time.perf_counter()
    errors = gradcheck_run(seed=7, n_hidden=8, n_classes=3, n_per_domain=4)
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    report(capsys, 1, worst < 1e-4 and elapsed < 10.0,
           f"max rel err {worst:.2e} over {len(errors)} parameters (< 1e-4), {elapsed:.2f}s (< 10s)")


def test_c2_grl_contract(capsys):
    model, batch = small_model()
    model.adversarial_loss(*batch, reverse=False).backward()
    plain = backbone_grads(model)
    clear_grads(model)
    model.adversarial_loss(*batch).backward()
    negated = all(np.array_equal(a, -b) and np.any(b) for a, b in zip(backbone_grads(model), plain))
    clear_grads(model)
    model.grl_lambda = 0.0
    model.adversarial_loss(*batch).backward()
    zero = all(not np.any(g) for g in backbone_grads(model))
    report(capsys, 2, negated and zero,
           f"lambda=1 exact negation {negated}, lambda=0 exactly zero {zero}")


def test_c3_mask_invariants(capsys):
    rng = np.random.default_rng(2024)
    checked = failures = 0
    while checked < 1000:
        shape = (int(rng.integers(1, 9)), int(rng.integers(1, 17)))
        W = rng.normal(scale=float(rng.choice([1e-3, 0.1, 1.0, 5.0])), size=shape)
        s = 1 / (1 + np.exp(-np.abs(W)))
        if s.max() == s.min():
            continue
        checked += 1
        m = weight_mask(W).data
        thr = weight_threshold(W)
        ok = set(np.unique(m)) <= {0.0, 1.0} and 0.5 <= thr < 1.0 and m.flat[np.argmax(np.abs(W))] == 1.0
        failures += not ok
    gather_ok = True
    for n_c, n_h in itertools.product(range(1, 9), range(1, 17)):
        M = rng.integers(0, 2, size=(n_c, n_h)).astype(float)
        labels = rng.integers(0, n_c, size=2 * n_c)
        gather_ok &= np.array_equal(batch_class_mask(M, np.eye(n_c)[labels], "source").data, M[labels])
    report(capsys, 3, failures == 0 and gather_ok,
           f"{checked} random matrices, {failures} violations; row-gather exhaustive N_c<=8, N_h<=16: {gather_ok}")


def test_c4_zero_mask_identities(capsys):
    model, (x_s, y_s, x_t) = small_model(seed=4)
    model.discriminator.weight.data[:] = 0.42
    with ad.no_grad():
        f = model.features(ad.concat_rows(x_s, x_t))
        masks = model.compute_masks(f, y_s)
        dim_on = model.class_logits(f, masks).data.copy()
        model.dim_enabled = False
        dim_off = model.class_logits(f, model.compute_masks(f, y_s)).data
    dim_ok = not masks.domain.mask.data.any() and dim_on.tobytes() == dim_off.tobytes()

    model, (x_s, y_s, x_t) = small_model(seed=5)
    model.classifier.weight.data[:] = -0.7
    with ad.no_grad():
        f = model.features(ad.concat_rows(x_s, x_t))
        masks = model.compute_masks(f, y_s)
        sem_on = model.domain_logits(f, masks).data.copy()
        model.sem_enabled = False
        sem_off = model.domain_logits(f, model.compute_masks(f, y_s)).data
    sem_ok = not masks.batch.data.any() and sem_on.tobytes() == sem_off.tobytes()
    report(capsys, 4, dim_ok and sem_ok, f"M_d=0 class logits bit-identical {dim_ok}, M_c=0 domain logits bit-identical {sem_ok}")


def test_c5_loss_composition(capsys):
    logs = []
    train(RunConfig(dataset_params=dict(STANDARD), seed=0), on_step=logs.append)
    worst = max(abs(s.L_total - (s.L_cls + s.lam * s.L_adv)) for s in logs)
    report(capsys, 5, worst <= 1e-12 and all(s.lam == 1.0 for s in logs),
           f"max |L_total - (L_cls + lambda*L_adv)| = {worst:.1e} over {len(logs)} steps (<= 1e-12, lambda=1)")


def test_c6_ablation_direction(capsys):
    start = time.perf_counter()
    finals = {}
    for seed in SEEDS:
        results = ablation_run(RunConfig(dataset_params=dict(STANDARD), epochs=20, seed=seed))
        for name, hist in results.items():
            finals.setdefault(name, []).append(hist[-1].target_accuracy)
    elapsed = time.perf_counter() - start
    mean = {k: float(np.mean(v)) for k, v in finals.items()}
    gap = mean["full"] - mean["baseline"]
    ok = gap >= 2.0 and mean["+DIM"] >= mean["baseline"] and mean["+SEM"] >= mean["baseline"] and elapsed < 300
    detail = ", ".join(f"{k} {v:.2f}" for k, v in mean.items())
    report(capsys, 6, ok, f"mean target acc over {len(SEEDS)} seeds: {detail}; full-baseline {gap:+.2f} (>= 2); {elapsed:.0f}s (< 300s)")


def test_c7_domain_error_direction(capsys):
    src_wins = tgt_wins = 0
    for seed in SEEDS:
        _, table = probe_run(RunConfig(dataset_params=dict(STANDARD), seed=seed), epochs=10)
        src_wins += table["source"]["without"] < table["source"]["with"]
        tgt_wins += table["target"]["without"] < table["target"]["with"]
    report(capsys, 7, src_wins >= 8 and tgt_wins >= 8,
           f"err_d(f_hat_d) < err_d(f) in {src_wins}/10 seeds (source), {tgt_wins}/10 (target); need >= 8")


def test_c8_pseudo_score_normalization(capsys):
    worst = 0.0
    rows = 0
    original = WemnetModel.pseudo_scores

    def recording(self, *args, **kwargs):
        nonlocal worst, rows
        p = original(self, *args, **kwargs)
        worst = max(worst, float(np.abs(p.data.sum(axis=1) - 1.0).max()))
        rows += p.shape[0]
        return p

    WemnetModel.pseudo_scores = recording
    try:
        train(RunConfig(dataset_params=dict(STANDARD), seed=0))
        train(RunConfig(dataset="blobs", dataset_params=dict(n_per_domain=300, mean_shift_vector=3.0),
                        epochs=5, seed=1))
        model = WemnetModel(4, 16, 5, seed=2)
        model.classifier.weight.data *= 200.0  # saturated logits
        model.pseudo_scores(Tensor(np.random.default_rng(0).normal(size=(64, 4)) * 50))
    finally:
        WemnetModel.pseudo_scores = original
    report(capsys, 8, worst <= 1e-9, f"max |sum p_t - 1| = {worst:.1e} over {rows} target rows (<= 1e-9)")


def test_c9_determinism(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        (tmp / "c.json").write_text(json.dumps({"dataset_params": STANDARD, "seed": 3}))
        codes = [cli_main(["train", "--config", str(tmp / "c.json"), "--out", str(tmp / name)]) for name in "ab"]
        a = (tmp / "a" / "metrics.jsonl").read_bytes()
        b = (tmp / "b" / "metrics.jsonl").read_bytes()
    report(capsys, 9, codes == [0, 0] and a == b and len(a) > 0,
           f"two train invocations -> metrics.jsonl byte-identical {a == b} ({len(a)} bytes)")


def test_c10_image_benchmarks_out_of_scope(capsys):
    line = ("[N/A ] criterion 10: image-benchmark tables are out of desk scope; "
            "criteria 6 and 7 are the directional substitutes")
    if capsys is None:
        print(line)
    else:
        with capsys.disabled():
            print("\n" + line)


if __name__ == "__main__":
    failed = 0
    for name, fn in list(globals().items()):
        if name.startswith("test_c"):
            try:
                fn(None)
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
