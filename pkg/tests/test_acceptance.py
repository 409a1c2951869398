"""Acceptance gate: one pass/fail line per criterion.

Every criterion records its verdict into ``ACCEPTANCE_LINES`` (printed in the
terminal summary) before asserting, so a failing criterion still reports its
measured numbers.  The ablation criterion flags instead of failing.
"""
import itertools
import json
import math
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
import torch

from faprompt.backbone import BackboneConfig, ToyBackbone
from faprompt.cap import PromptBank, encode_prompt_bank, orthogonality_loss, prototype
from faprompt.cli import RunConfig, main
from faprompt.dap import PriorNetwork, patch_scores, prior_loss, select_top_patches
from faprompt.inference import evaluate
from faprompt.losses import dice_loss, focal_loss, global_loss, local_loss, total_loss
from faprompt.metrics import auroc, average_precision, pro
from faprompt.scoring import final_score, image_probability, inference_map
from faprompt.training import FAPrompt, TrainConfig, batch_order, epoch_means, load_batch, train
from faprompt.data import synth_dataset

from conftest import ACCEPTANCE_LINES, assert_grad_matches
from oracles import (
    brute_auroc,
    cosine,
    focal_loop,
    local_loop,
    pairwise_abs_cos,
    sort_oracle,
    stepwise_ap,
    sweep_pro,
    two_way_softmax,
)

TOY_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "toy.json"

# First reference run of configs/toy.json (seed 0); reruns must reproduce these within 1e-6.
REFERENCE = {
    "image_auroc": 0.974375,
    "image_ap": 0.9793535082281714,
    "pixel_auroc": 0.9514052270794637,
    "pixel_pro": 0.7677781330031335,
}
REFERENCE_TOL = 1e-6
E2E_BAR = 0.80
ABLATION_TOL = 0.02


def record(number: int, title: str, passed: bool, detail: str, verdict: str | None = None) -> None:
    verdict = verdict or ("PASS" if passed else "FAIL")
    line = f"[{verdict}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


class Checks:
    """Collects named sub-checks so one criterion reports all of them at once."""

    def __init__(self):
        self.failures: list[str] = []
        self.count = 0

    def __call__(self, name: str, ok: bool, detail: str = "") -> None:
        self.count += 1
        if not ok:
            self.failures.append(f"{name} {detail}".strip())

    def run(self, name: str, fn) -> None:
        try:
            fn()
        except AssertionError as exc:
            self(name, False, str(exc))
        else:
            self(name, True)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        head = f"{self.count - len(self.failures)}/{self.count} checks"
        return head if self.passed else f"{head}; failed: {'; '.join(self.failures)}"


def _dt(*shape, gen, low=None, high=None):
    if low is None:
        return torch.randn(*shape, generator=gen, dtype=torch.float64)
    return low + (high - low) * torch.rand(*shape, generator=gen, dtype=torch.float64)


def _binary(*shape, gen, p=0.4):
    return (torch.rand(*shape, generator=gen, dtype=torch.float64) < p).to(torch.float64)


# ---------------------------------------------------------------------------- 1


def _active_psi(d, m, dt, gen):
    """A double-precision prior network and input whose hidden units are all clearly active."""
    psi = PriorNetwork(d, m, dt, seed=int(torch.randint(0, 2**31 - 1, (1,), generator=gen))).double()
    for _ in range(1000):
        x = _dt(m, d, gen=gen)
        pre = psi.hidden(x.flatten())
        if bool((pre > 0.05).all()):
            return psi, x
    raise RuntimeError("no input with an active hidden layer found")


def test_criterion_1_gradient_suite():
    d, k, m, b = 8, 3, 2, 2
    shape = (4, 4)
    checks = Checks()
    worst = 0.0
    start = time.perf_counter()
    for seed in range(3):
        gen = torch.Generator().manual_seed(seed)

        def grad(name, f, x):
            def run():
                nonlocal worst
                worst = max(worst, assert_grad_matches(f, x, rtol=1e-3, step=1e-4))

            checks.run(f"{name}[seed {seed}]", run)

        rows = _dt(k, d, gen=gen).requires_grad_()
        grad("L_oc", lambda: orthogonality_loss(rows), rows)

        omega = _dt(b, d, gen=gen).requires_grad_()
        labels = torch.tensor([0.0, 1.0], dtype=torch.float64)
        grad("prior", lambda: prior_loss(omega, labels), omega)

        probs = _dt(*shape, gen=gen, low=0.05, high=0.95).requires_grad_()
        target = _binary(*shape, gen=gen)
        grad("focal", lambda: focal_loss(probs, target), probs)

        pred = _dt(*shape, gen=gen, low=0.05, high=0.95).requires_grad_()
        mask = _binary(*shape, gen=gen)
        grad("dice", lambda: dice_loss(pred, mask), pred)

        map_n = _dt(b, *shape, gen=gen, low=0.05, high=0.95).requires_grad_()
        map_a = _dt(b, *shape, gen=gen, low=0.05, high=0.95).requires_grad_()
        masks = _binary(b, *shape, gen=gen)
        grad("L_local/normal-map", lambda: local_loss(map_n, map_a, masks), map_n)
        grad("L_local/abnormal-map", lambda: local_loss(map_n, map_a, masks), map_a)

        scores = _dt(4, gen=gen, low=0.05, high=0.95).requires_grad_()
        image_labels = torch.tensor([0.0, 1.0, 1.0, 0.0], dtype=torch.float64)
        grad("L_global", lambda: global_loss(scores, image_labels), scores)

        psi, patches = _active_psi(d, m, d, gen)
        patches.requires_grad_()
        probe = _dt(d, gen=gen)

        def psi_out():
            return (psi(patches.flatten()) * probe).sum()

        grad("psi/input", psi_out, patches)
        for pname, param in psi.named_parameters():
            grad(f"psi/{pname}", psi_out, param)
    elapsed = time.perf_counter() - start
    checks("runtime", elapsed < 10.0, f"{elapsed:.2f}s")
    record(1, "gradient suite", checks.passed,
           f"{checks.summary()}, worst rel err {worst:.2e}, {elapsed:.2f}s")
    assert checks.passed, checks.summary()


# ---------------------------------------------------------------------------- 2


def test_criterion_2_formula_oracles():
    rng = np.random.default_rng(2024)
    checks = Checks()
    worst = {"patch": 0.0, "image": 0.0, "score": 0.0, "map": 0.0, "total": 0.0}
    for _ in range(100):
        l, d = int(rng.integers(1, 9)), int(rng.integers(2, 10))
        tau = float(rng.uniform(0.5, 100.0))
        patches, f_n, f_a = rng.normal(size=(l, d)), rng.normal(size=d), rng.normal(size=d)
        s_n, s_a = patch_scores(torch.from_numpy(patches), torch.from_numpy(f_n), torch.from_numpy(f_a), tau)
        for i in range(l):
            p = two_way_softmax(tau * cosine(patches[i], f_n), tau * cosine(patches[i], f_a))
            worst["patch"] = max(worst["patch"], abs(float(s_a[i]) - p), abs(float(s_n[i]) - (1 - p)))

        image = rng.normal(size=d)
        got = float(image_probability(torch.from_numpy(image), torch.from_numpy(f_n), torch.from_numpy(f_a), tau))
        want = two_way_softmax(tau * cosine(image, f_n), tau * cosine(image, f_a))
        worst["image"] = max(worst["image"], abs(got - want))

        s_img = float(rng.uniform())
        sa, sh = rng.uniform(size=l), rng.uniform(size=l)
        got = float(final_score(torch.tensor(s_img, dtype=torch.float64), torch.from_numpy(sa), torch.from_numpy(sh)))
        want = 0.5 * (s_img + 0.5 * (max(sa.tolist()) + max(sh.tolist())))
        worst["score"] = max(worst["score"], abs(got - want))

        h, w = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        maps = [rng.uniform(size=(h, w)) for _ in range(4)]
        fused = inference_map(*(torch.from_numpy(x) for x in maps)).numpy()
        for i in range(h):
            for j in range(w):
                a, n, ap, np_ = (float(x[i, j]) for x in maps)
                worst["map"] = max(worst["map"], abs(fused[i, j] - (a + (1 - n) + ap + (1 - np_)) / 4))

        b, k = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        map_shape = (b, 4, 4)
        free_n, free_a, prior_n, prior_a = (rng.uniform(0.01, 0.99, map_shape) for _ in range(4))
        masks = (rng.uniform(size=map_shape) < 0.3).astype(np.float64)
        scores, labels = rng.uniform(0.01, 0.99, b), rng.integers(0, 2, b).astype(np.float64)
        omega, rows = rng.normal(size=(b, d)), rng.normal(size=(k, d))
        t = torch.from_numpy
        lib = total_loss(
            local_loss(t(prior_n), t(prior_a), t(masks)) + local_loss(t(free_n), t(free_a), t(masks)),
            global_loss(t(scores), t(labels)),
            prior_loss(t(omega), t(labels)),
            orthogonality_loss(t(rows)),
        )
        local = sum(local_loop(prior_n[i], prior_a[i], masks[i]) + local_loop(free_n[i], free_a[i], masks[i])
                    for i in range(b)) / b
        glob = focal_loop(scores, labels)
        prior = sum(sum(v * v for v in omega[i]) for i in range(b) if labels[i] == 0)
        oc = pairwise_abs_cos(rows.tolist())
        worst["total"] = max(worst["total"], abs(float(lib.total) - (local + glob + prior + oc)))
    for name, err in worst.items():
        checks(name, err <= 1e-9, f"max err {err:.2e}")
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(2, "formula oracles (100 instances each, tol 1e-9)", checks.passed, f"{checks.summary()}; {detail}")
    assert checks.passed, checks.summary()


# ---------------------------------------------------------------------------- 3


def _text_backbone():
    return ToyBackbone(BackboneConfig(embedding_dim=8, token_dim=8, deep_prompt_depth=2, deep_prompt_length=3,
                                      text_layers=3, patch_size=4, input_size=(16, 16), seed=7)).double()


def test_criterion_3_cap_properties():
    checks = Checks()
    eye = torch.eye(6, dtype=torch.float64)
    for rows, scales in (([0, 1, 2], [1.0, 2.0, 0.5]), ([5, 0, 3, 1], [-3.0, 1.0, 7.0, -0.25]), ([4, 2], [1e-3, 1e3])):
        value = float(orthogonality_loss(eye[rows] * torch.tensor(scales, dtype=torch.float64)[:, None]))
        checks(f"orthogonal rows {rows}", value == 0.0, f"got {value!r}")
    three = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1 / math.sqrt(2), 1 / math.sqrt(2)]], dtype=torch.float64)
    value = float(orthogonality_loss(three))
    checks("three-vector example", abs(value - math.sqrt(2)) <= 1e-6, f"got {value!r}")

    bb = _text_backbone()
    bank = PromptBank.for_backbone(bb, n_normal=2, n_abnormal=2, n_prompts=4, seed=3).double()
    base = encode_prompt_bank(bank, bb)
    original = bank.abnormal_tokens.detach().clone()
    for perm in itertools.permutations(range(4)):
        with torch.no_grad():
            bank.abnormal_tokens.copy_(original[list(perm)])
        moved = encode_prompt_bank(bank, bb)
        checks(f"bank permutation {perm}", torch.equal(moved.prototype, base.prototype))
    gen = torch.Generator().manual_seed(11)
    for trial in range(50):
        emb = torch.nn.functional.normalize(torch.randn(7, 16, generator=gen), dim=-1)
        perm = torch.randperm(7, generator=gen)
        checks(f"random permutation {trial}", torch.equal(prototype(emb[perm]), prototype(emb)))
    single = PromptBank.for_backbone(bb, n_normal=2, n_abnormal=2, n_prompts=1, seed=3).double()
    one = encode_prompt_bank(single, bb)
    checks("K=1 prototype", torch.equal(one.prototype, one.per_prompt[0]))
    record(3, "CAP properties", checks.passed, f"{checks.summary()}; sqrt(2) example {value:.12f}")
    assert checks.passed, checks.summary()


# ---------------------------------------------------------------------------- 4


def test_criterion_4_dap_properties():
    checks = Checks()
    size = (32, 32)
    cfg = TrainConfig(input_size=size, n_prompts=3, n_patches=4, use_prior=False, seed=1)
    bb = ToyBackbone(BackboneConfig(embedding_dim=32, token_dim=32, deep_prompt_depth=2, deep_prompt_length=2,
                                    text_layers=3, input_size=size, seed=1))
    model = FAPrompt(bb, cfg)
    data = synth_dataset(seed=1, n_train=0, n_test=6, size=32)
    images, _, _ = load_batch(data, range(6), size)
    with torch.no_grad():
        out = model.forward(images)
    checks("omega is zero", not out.prior.omega.any())
    for name in ("patch_normal", "patch_abnormal", "map_normal", "map_abnormal"):
        checks(f"{name} bit-equal", torch.equal(getattr(out, name), getattr(out, f"{name}_prior")))
    free_proto = out.prompt_free.prototype.expand_as(out.prompt_refined.prototype)
    checks("prototype bit-equal", torch.equal(free_proto, out.prompt_refined.prototype))

    gen = torch.Generator().manual_seed(4)
    worst = 0.0
    for _ in range(20):
        omega = torch.randn(5, 16, generator=gen, dtype=torch.float64).requires_grad_()
        labels = torch.randint(0, 2, (5,), generator=gen)
        prior_loss(omega, labels).backward()
        expected = 2 * omega.detach() * (labels == 0).to(torch.float64)[:, None]
        worst = max(worst, float((omega.grad - expected).abs().max()))
    checks("prior gradient 2*omega", worst <= 1e-9, f"max err {worst:.2e}")

    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(1000):
        l = int(rng.integers(1, 65))
        m = int(rng.integers(1, l + 1))
        scores = rng.integers(0, 6, l) / 5.0  # coarse values force ties
        emb = rng.normal(size=(l, 3))
        idx, sel = select_top_patches(torch.from_numpy(scores), torch.from_numpy(emb), m)
        want = sort_oracle(scores.tolist(), m)
        if idx.tolist() != want or not np.array_equal(sel.numpy(), emb[want]):
            mismatches += 1
    checks("top-M sort oracle", mismatches == 0, f"{mismatches} mismatches")
    record(4, "DAP properties", checks.passed,
           f"{checks.summary()}; 2*omega err {worst:.1e}; top-M 1000 vectors, {mismatches} mismatches")
    assert checks.passed, checks.summary()


# ---------------------------------------------------------------------------- 5


def test_criterion_5_metric_oracles():
    checks = Checks()
    rng = np.random.default_rng(55)
    errs = {"auroc": 0.0, "ap": 0.0, "pro": 0.0}
    for _ in range(5):
        scores = rng.integers(0, 40, 500) / 39.0
        labels = (rng.random(500) < 0.4).astype(int)
        errs["auroc"] = max(errs["auroc"], abs(auroc(scores, labels) - brute_auroc(scores.tolist(), labels.tolist())))
        errs["ap"] = max(errs["ap"], abs(average_precision(scores, labels) - stepwise_ap(scores.tolist(), labels.tolist())))
    for _ in range(60):
        n = int(rng.integers(1, 4))
        masks = [(rng.random((5, 5)) < 0.3).astype(int) for _ in range(n)]
        masks[0][2, 2] = 1
        masks[-1][0, 0] = 0
        maps = [rng.integers(0, 8, (5, 5)) / 7.0 for _ in range(n)]
        errs["pro"] = max(errs["pro"], abs(pro(maps, masks) - sweep_pro(maps, masks)))
    checks("auroc n=500", errs["auroc"] <= 1e-12, f"{errs['auroc']:.1e}")
    checks("average precision", errs["ap"] <= 1e-12, f"{errs['ap']:.1e}")
    checks("pro 5x5", errs["pro"] <= 1e-9, f"{errs['pro']:.1e}")
    record(5, "metric oracles", checks.passed,
           f"{checks.summary()}; " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))
    assert checks.passed, checks.summary()


# ---------------------------------------------------------------------------- 6


def _mean_prior_norm(model, images):
    with torch.no_grad():
        return float(model.forward(images).prior.omega.norm(dim=-1).mean())


def _prior_only_steps(model, dataset, steps):
    """The prior penalty alone, same optimiser and batch stream as ``train``."""
    cfg = model.config
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    while step < steps:
        for batch in batch_order(len(dataset), cfg.batch_size, rng):
            if step >= steps:
                break
            images, _, labels = load_batch(dataset, batch, cfg.input_size)
            loss = prior_loss(model.forward(images).prior.omega, labels)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1


def test_criterion_6_prior_nulling():
    size = (64, 64)
    steps = 200
    normal = synth_dataset(seed=0, n_train=160, n_test=0, size=64).select("train", label=0)
    assert not any(normal.labels)
    cfg = TrainConfig(input_size=size, seed=0, epochs=math.ceil(steps * 8 / len(normal)))
    bcfg = BackboneConfig(embedding_dim=64, token_dim=64, input_size=size, seed=0)
    images, _, _ = load_batch(normal, range(len(normal)), size)

    start = time.perf_counter()
    bb = ToyBackbone(bcfg)
    model = FAPrompt(bb, cfg)
    initial = _mean_prior_norm(model, images)
    ckpt = train(cfg, normal, bb, model=model, max_steps=steps)
    final = _mean_prior_norm(model, images)
    elapsed = time.perf_counter() - start
    ratio = final / initial

    isolated = FAPrompt(bb, cfg)
    _prior_only_steps(isolated, normal, steps)
    isolated_ratio = _mean_prior_norm(isolated, images) / initial

    passed = ratio < 0.01 and elapsed < 60.0 and len(ckpt.history) == steps
    record(6, "prior nulling on all-normal stream", passed,
           f"full objective: mean |omega| {initial:.4f} -> {final:.4f} (ratio {ratio:.4f}, need < 0.01), "
           f"{len(ckpt.history)} steps, {elapsed:.1f}s; prior term alone: ratio {isolated_ratio:.4f}")
    assert len(ckpt.history) == steps
    assert elapsed < 60.0
    assert ratio < 0.01, f"mean |omega| ratio {ratio:.4f} after {steps} steps"


# ---------------------------------------------------------------------------- 7 / 8


def _toy_run_config(**train_overrides) -> RunConfig:
    doc = json.loads(TOY_CONFIG.read_text())
    doc["train"].update(train_overrides)
    return RunConfig.from_dict(doc)


def _api_run(**train_overrides):
    cfg = _toy_run_config(**train_overrides)
    start = time.perf_counter()
    train_set, test_set = cfg.datasets()
    bb = ToyBackbone(cfg.backbone)
    ckpt = train(cfg.train, train_set, bb)
    report, _ = evaluate(FAPrompt.from_checkpoint(ckpt, bb), test_set, cfg.eval["fpr_limit"], cfg.eval["batch_size"])
    return report, epoch_means(ckpt.history), time.perf_counter() - start


@pytest.fixture(scope="module")
def reference_run():
    return _api_run()


def test_criterion_7_end_to_end_toy_run(reference_run):
    report, epochs, elapsed = reference_run
    checks = Checks()
    checks("loss decreases", epochs[-1] < epochs[0], f"{epochs[0]:.4f} -> {epochs[-1]:.4f}")
    checks("image AUROC", report.image_auroc > E2E_BAR, f"{report.image_auroc:.4f}")
    checks("pixel AUROC", report.pixel_auroc > E2E_BAR, f"{report.pixel_auroc:.4f}")
    for key, ref in REFERENCE.items():
        got = getattr(report, key)
        checks(f"{key} reproduces", abs(got - ref) <= REFERENCE_TOL, f"{got!r} vs {ref!r}")
    checks("runtime", elapsed < 300.0, f"{elapsed:.1f}s")
    record(7, "end-to-end toy run", checks.passed,
           f"{checks.summary()}; image AUROC {report.image_auroc:.4f}, pixel AUROC {report.pixel_auroc:.4f}, "
           f"AP {report.image_ap:.4f}, PRO {report.pixel_pro:.4f}, loss {epochs[0]:.3f} -> {epochs[-1]:.3f}, "
           f"{elapsed:.1f}s")
    assert checks.passed, checks.summary()


def test_criterion_8_ablation_trend(reference_run):
    full = reference_run[0]
    variants = {
        "no compound prompts (K=1)": {"n_prompts": 1},
        "no orthogonality loss": {"use_oc": False},
        "no data-dependent prior": {"use_prior": False},
    }
    table = [f"    {'variant':<28} {'image AUROC':>11} {'pixel AUROC':>11}",
             f"    {'full model':<28} {full.image_auroc:>11.4f} {full.pixel_auroc:>11.4f}"]
    flags = []
    for name, overrides in variants.items():
        report, _, _ = _api_run(**overrides)
        table.append(f"    {name:<28} {report.image_auroc:>11.4f} {report.pixel_auroc:>11.4f}")
        if full.image_auroc < report.image_auroc - ABLATION_TOL:
            flags.append(f"image AUROC below '{name}'")
        if overrides.get("use_prior") is False and full.pixel_auroc < report.pixel_auroc - ABLATION_TOL:
            flags.append(f"pixel AUROC below '{name}'")
    passed = not flags
    record(8, "ablation trend (non-blocking)", passed,
           "full model within tolerance of every variant" if passed else "; ".join(flags),
           verdict="PASS" if passed else "FLAG")
    ACCEPTANCE_LINES.extend(table)
    print("\n".join(table))
    if flags:
        warnings.warn("ablation trend flagged: " + "; ".join(flags), stacklevel=1)


# ---------------------------------------------------------------------------- 9


def test_criterion_9_cli_determinism(tmp_path):
    doc = json.loads(TOY_CONFIG.read_text())
    reports = []
    for run in ("first", "second"):
        doc["output_dir"] = str(tmp_path / run)
        config = tmp_path / f"{run}.json"
        config.write_text(json.dumps(doc))
        assert main(["train", "--config", str(config)]) == 0
        assert main(["eval", "--config", str(config), "--checkpoint", str(tmp_path / run / "checkpoint.fapk")]) == 0
        reports.append((tmp_path / run / "eval_report.json").read_bytes())
    identical = reports[0] == reports[1]
    values = json.loads(reports[0])
    matches_api = all(abs(values[k] - v) <= REFERENCE_TOL for k, v in REFERENCE.items())
    record(9, "CLI train+eval determinism", identical,
           f"EvalReport JSON byte-identical across two runs: {identical}; "
           f"matches API reference numbers: {matches_api}")
    assert identical
