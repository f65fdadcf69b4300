"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary
(and immediately, when run with ``-s``). Run standalone with
``python tests/test_acceptance.py``.
"""

import contextlib
import json
import math
import struct
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from titn import nn
from titn import tensor as T
from titn.augment import cutmix, sample_lambda
from titn.cli import build_parser, main, model_config, resolve, train_config
from titn.distill import (
    OracleTeacher,
    TeacherFileError,
    cross_entropy,
    cutmix_loss,
    distillation_loss,
    read_teacher_logits,
    teacher_hard_label,
    write_teacher_logits,
)
from titn.gradcheck import numerical_grad, relative_error
from titn.model import ModelConfig, TitnModel, load_checkpoint, save_checkpoint
from titn.pipeline import classification_metrics, cosine_lr, make_synthetic, train
from titn.pipeline.data import load_cifar, load_mnist, parse_cifar, parse_idx_images, write_cifar, write_idx
from titn.pipeline.train import predict


@contextlib.contextmanager
def criterion(num: int):
    """Collects ``(ok, detail)`` into ``box`` and reports it, failing the test if not ok."""
    box = {"ok": False, "detail": ""}
    try:
        yield box
    except Exception as exc:
        box["ok"], box["detail"] = False, f"{type(exc).__name__}: {exc}"
        raise
    finally:
        ACCEPTANCE[num] = (box["ok"], box["detail"])
        print(f"criterion {num:2d}: {'PASS' if box['ok'] else 'FAIL'}  {box['detail']}")
    assert box["ok"], box["detail"]


def cli_json(argv, capsys):
    assert main(argv) == 0
    return json.loads(capsys.readouterr().out)


# 1 ------------------------------------------------------------------------------------

def test_criterion_01_parameter_count(capsys):
    with criterion(1) as c:
        t0 = time.perf_counter()
        small = cli_json(["inspect", "--dataset", "cifar100", "--json"], capsys)
        large = cli_json(["inspect", "--dataset", "cifar100", "--patch-size", "16",
                          "--pixel-size", "4", "--json"], capsys)
        elapsed = time.perf_counter() - t0
        ref = 5.85e6
        devs = [abs(r["total_params"] - ref) / ref for r in (small, large)]
        c["ok"] = max(devs) <= 0.02 and elapsed < 1.0
        c["detail"] = (f"patch 8: {small['total_params']:,} ({devs[0]:+.2%}), "
                       f"patch 16: {large['total_params']:,} ({devs[1]:+.2%}) vs 5.85M +-2%; "
                       f"{elapsed:.3f}s")


# 2 ------------------------------------------------------------------------------------

def test_criterion_02_gradient_check():
    with criterion(2) as c:
        t0 = time.perf_counter()
        cfg = ModelConfig(image_size=8, patch_size=4, pixel_size=2, patch_dim=16, pixel_dim=8,
                          depth=2, outer_heads=2, inner_heads=2, num_classes=3)
        model = TitnModel.init(cfg, seed=0)
        rng = np.random.default_rng(1)
        # move off the symmetric init (zero biases, unit norms) so every path carries signal
        for _, p in model.named_parameters():
            p.data = p.data + rng.standard_normal(p.shape) * 0.1
        x = rng.standard_normal((2, 3, 8, 8))

        def loss():
            cls, dist = model(x)
            return distillation_loss(cls, dist, [0, 1], [2, 0], 0.6, [1, 2], alpha=0.5)

        model.zero_grad()
        loss().backward()
        worst_norm, worst_elem, worst_name = 0.0, 0.0, ""
        for name, p in model.named_parameters():
            analytic = p.grad.copy()
            numeric = numerical_grad(loss, p, h=1e-5)
            rn = relative_error(analytic, numeric)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
            re = float(np.max(np.abs(analytic - numeric) / denom))
            if max(rn, re) > max(worst_norm, worst_elem):
                worst_name = name
            worst_norm, worst_elem = max(worst_norm, rn), max(worst_elem, re)
        elapsed = time.perf_counter() - t0
        c["ok"] = worst_norm < 1e-4 and worst_elem < 1e-4 and elapsed < 120
        c["detail"] = (f"max rel err per tensor {worst_norm:.2e}, per element {worst_elem:.2e} "
                       f"(worst {worst_name}) < 1e-4; {elapsed:.1f}s")


# 3 ------------------------------------------------------------------------------------

def test_criterion_03_softmax_and_norm_invariants():
    with criterion(3) as c:
        rng = np.random.default_rng(3)
        worst_sum = worst_mean = worst_std = worst_eps = 0.0
        eps = 1e-5
        for _ in range(100):
            scores = rng.standard_normal((4, 9, 9)) * rng.uniform(0.1, 20)
            s = T.softmax(scores, axis=-1).data
            worst_sum = max(worst_sum, float(np.max(np.abs(s.sum(-1) - 1))))
            p = nn.LayerNormParams.init(32, eps=eps)
            kept = []
            # token std >= 3 keeps eps / (2 var) below 1e-6, i.e. out of the eps regime
            x = rng.standard_normal((6, 32)) * rng.uniform(3, 30) + rng.uniform(-50, 50)
            nn.layer_norm(x, p, pre_affine=kept)
            xhat = kept[0].data
            worst_mean = max(worst_mean, float(np.max(np.abs(xhat.mean(-1)))))
            worst_std = max(worst_std, float(np.max(np.abs(xhat.std(-1) - 1))))
            # the remaining shortfall is exactly the eps shrinkage sd / sqrt(var + eps)
            expected = x.std(-1) / np.sqrt(x.var(-1) + eps)
            worst_eps = max(worst_eps, float(np.max(np.abs(xhat.std(-1) - expected))))
        c["ok"] = worst_sum < 1e-9 and worst_mean < 1e-9 and worst_std < 1e-6 and worst_eps < 1e-12
        c["detail"] = (f"softmax |sum-1| {worst_sum:.1e}; LN |mean| {worst_mean:.1e}, "
                       f"|std-1| {worst_std:.1e} (eps shrinkage model {worst_eps:.1e}) over 100 inputs")


# 4 ------------------------------------------------------------------------------------

def test_criterion_04_loss_identities():
    with criterion(4) as c:
        rng = np.random.default_rng(4)
        errs = {}
        for _ in range(20):
            tc, td = rng.standard_normal((8, 6)) * 3, rng.standard_normal((8, 6)) * 3
            l1, l2, lt = (rng.integers(0, 6, 8) for _ in range(3))
            lam = rng.uniform()
            cm = cutmix_loss(tc, l1, l2, lam).item()

            def dl(alpha, *, a=tc, b=td, y1=l1, y2=l2, yt=lt, lm=lam):
                return distillation_loss(a, b, y1, y2, lm, yt, alpha).item()

            e = {
                "cutmix lam=1": abs(cutmix_loss(tc, l1, l2, 1.0).item() - cross_entropy(tc, l1).item()),
                "cutmix lam=0": abs(cutmix_loss(tc, l1, l2, 0.0).item() - cross_entropy(tc, l2).item()),
                "alpha=1": abs(dl(1.0) - cm),
                "alpha=0": abs(dl(0.0) - cross_entropy(td, lt).item()),
                "collapse": abs(dl(0.5, b=tc, y2=l1, yt=l1) - cross_entropy(tc, l1).item()),
            }
            a = np.array([0.0, 0.25, 0.7, 1.0])
            f = np.array([dl(v) for v in a])
            line = f[0] + (f[-1] - f[0]) * a
            e["affine in alpha"] = float(np.max(np.abs(f - line)))
            for k, v in e.items():
                errs[k] = max(errs.get(k, 0.0), v)
        c["ok"] = max(errs.values()) <= 1e-10
        c["detail"] = "; ".join(f"{k} {v:.1e}" for k, v in errs.items()) + " (<= 1e-10)"


# 5 ------------------------------------------------------------------------------------

def test_criterion_05_cutmix_area_law():
    with criterion(5) as c:
        rng = np.random.default_rng(5)
        h, w = 32, 32
        x = np.stack([np.full((3, h, w), float(i + 1)) for i in range(4)])
        partner = np.array([1, 2, 3, 0])  # no fixed points: partners differ at every pixel
        law_bad = audit_bad = 0
        for _ in range(1000):
            mix = cutmix(x, np.arange(4), sample_lambda(0.5, rng), rng, partner=partner)
            y1, y2, x1, x2 = mix.box
            area = (y2 - y1) * (x2 - x1)
            law_bad += mix.lam != 1.0 - area / (h * w)
            changed = (mix.images != x).any(axis=1).sum(axis=(1, 2))
            audit_bad += any(1.0 - k / (h * w) != mix.lam for k in changed)
        c["ok"] = law_bad == 0 and audit_bad == 0
        c["detail"] = f"1000 draws: area-law mismatches {law_bad}, pixel-audit mismatches {audit_bad}"


# 6, 7 ---------------------------------------------------------------------------------

def toy_setup(seed: int, teacher: str = "oracle", alpha=None):
    argv = ["train", "--seed", str(seed), "--teacher", teacher]
    if alpha is not None:
        argv += ["--distill-alpha", str(alpha)]
    opts = resolve(build_parser().parse_args(argv))
    tr, te = make_synthetic(opts["num_classes"], opts["train_size"], opts["test_size"],
                            opts["image_size"], 3, seed=opts["data_seed"])
    cfg = model_config(opts, tr.channels, tr.num_classes)
    tcfg = train_config(opts)
    tcfg.record_time = False
    return cfg, tcfg, tr, te


def run_toy(seed: int, alpha=None):
    cfg, tcfg, tr, te = toy_setup(seed, "oracle", alpha)
    model = TitnModel.init(cfg, seed=seed)
    hist = train(model, tr, te, OracleTeacher(tr.labels, tr.num_classes), tcfg)
    return model, hist, tr, te


@pytest.mark.slow
def test_criterion_06_toy_training():
    with criterion(6) as c:
        cfg, tcfg, _, _ = toy_setup(0)
        assert cfg.depth == 2 and cfg.patch_dim == 32 and tcfg.epochs == 20
        t0 = time.perf_counter()
        _, hist, tr, te = run_toy(0)
        elapsed = time.perf_counter() - t0
        _, again, _, _ = run_toy(0)
        same = [h.as_dict() for h in hist] == [h.as_dict() for h in again]
        best = max(h.top1 for h in hist)
        c["ok"] = (len(tr), len(te)) == (1500, 300) and best >= 0.9 and elapsed < 600 and same
        c["detail"] = (f"top-1 {hist[-1].top1:.3f} after 20 epochs (best {best:.3f}, >= 0.90); "
                       f"{elapsed:.1f}s; rerun identical: {same}")


@pytest.mark.slow
def test_criterion_07_distillation_smoke():
    with criterion(7) as c:
        seeds = (0, 1, 2)
        distilled, baseline, agreement = [], [], []
        for s in seeds:
            model, hist, tr, te = run_toy(s)
            distilled.append(hist[-1].top1)
            mean, std = tr.channel_stats()
            _, dist_logits = predict(model, te.images, mean, std)
            teacher = teacher_hard_label(OracleTeacher(te.labels, te.num_classes).scores(te.images, np.arange(len(te))))
            agreement.append(float(np.mean(dist_logits.argmax(1) == teacher)))
            baseline.append(run_toy(s, alpha=1.0)[1][-1].top1)
        d, b = float(np.mean(distilled)), float(np.mean(baseline))
        c["ok"] = d >= b - 0.02 and min(agreement) > 0.85
        c["detail"] = (f"distilled mean top-1 {d:.3f} {np.round(distilled, 3).tolist()} vs alpha=1 "
                       f"{b:.3f} {np.round(baseline, 3).tolist()} (>= -2pp); distill-head agreement "
                       f"{np.round(agreement, 3).tolist()} (> 0.85)")


# 8 ------------------------------------------------------------------------------------

def brute_force(scores, labels, k):
    preds = [sorted(range(k), key=lambda j: (-row[j], j)) for row in scores]
    n = len(labels)
    out = {"top1": sum(p[0] == y for p, y in zip(preds, labels)) / n,
           "top5": sum(y in p[:5] for p, y in zip(preds, labels)) / n}
    ps, rs, fs = [], [], []
    for cls in range(k):
        tp = sum(p[0] == cls and y == cls for p, y in zip(preds, labels))
        npred = sum(p[0] == cls for p in preds)
        nact = sum(y == cls for y in labels)
        pr = tp / npred if npred else 0.0
        rc = tp / nact if nact else 0.0
        ps.append(pr)
        rs.append(rc)
        fs.append(2 * pr * rc / (pr + rc) if pr + rc else 0.0)
    out.update(precision=math.fsum(ps) / k, recall=math.fsum(rs) / k, f1=math.fsum(fs) / k)
    return out


def test_criterion_08_metric_oracle():
    with criterion(8) as c:
        rng = np.random.default_rng(8)
        k = 12
        scores = rng.integers(0, 8, (1000, k)).astype(float)  # coarse values: many ties
        labels = rng.integers(0, k - 1, 1000)  # last class never occurs
        got = classification_metrics(scores, labels, k)
        ref = brute_force(scores, labels, k)
        bad = [name for name in ref if got[name] != ref[name]]
        c["ok"] = not bad
        c["detail"] = ("1000 pairs, exact match on top1/top5/precision/recall/f1" if not bad
                       else f"mismatch on {bad}")


# 9 ------------------------------------------------------------------------------------

def test_criterion_09_scheduler_endpoints():
    with criterion(9) as c:
        T_ = 300
        a, b, m = cosine_lr(0, T_, 0.1), cosine_lr(T_, T_, 0.1), cosine_lr(T_ / 2, T_, 0.1)
        c["ok"] = a == 0.1 and abs(b) < 1e-12 and abs(m - 0.05) < 1e-12
        c["detail"] = f"lr(0)={a!r}, lr(T)={b:.1e}, lr(T/2)-0.05={m - 0.05:.1e}"


# 10 -----------------------------------------------------------------------------------

def test_criterion_10_format_roundtrips(tmp_path):
    with criterion(10) as c:
        checks = {}
        model = TitnModel.init(ModelConfig(image_size=8, patch_size=4, pixel_size=2, patch_dim=16,
                                           pixel_dim=8, depth=2, outer_heads=2, inner_heads=2,
                                           num_classes=3), seed=10)
        save_checkpoint(tmp_path / "m.ckpt", model, {"k": 1})
        loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
        checks["checkpoint"] = meta == {"k": 1} and all(
            a.data.tobytes() == b.data.tobytes() and n1 == n2
            for (n1, a), (n2, b) in zip(model.named_parameters(), loaded.named_parameters()))

        rng = np.random.default_rng(10)
        img = rng.integers(0, 256, (7, 28, 28)).astype(np.uint8)
        lab = rng.integers(0, 10, 7)
        hand = struct.pack(">IIII", 2051, 7, 28, 28) + img.tobytes()
        write_idx(tmp_path / "t10k-images-idx3-ubyte", tmp_path / "t10k-labels-idx1-ubyte", img, lab)
        ds = load_mnist(tmp_path, "test")
        checks["idx"] = (np.array_equal(parse_idx_images(hand)[:, 0], img)
                         and np.array_equal(ds.images[:, 0], img) and np.array_equal(ds.labels, lab)
                         and (tmp_path / "t10k-images-idx3-ubyte").read_bytes() == hand)

        ok = True
        for variant in (10, 100):
            ci = rng.integers(0, 256, (5, 3, 32, 32)).astype(np.uint8)
            cl = rng.integers(0, variant, 5)
            head = [bytes([l]) if variant == 10 else bytes([0, l]) for l in cl]
            raw = b"".join(h + im.tobytes() for h, im in zip(head, ci))
            got_i, got_l = parse_cifar(raw, variant)
            path = tmp_path / f"c{variant}.bin"
            write_cifar(path, ci, cl, variant)
            back = load_cifar(path, variant, "test")
            ok &= (np.array_equal(got_i, ci) and np.array_equal(got_l, cl)
                   and path.read_bytes() == raw and np.array_equal(back.images, ci))
        checks["cifar"] = ok

        write_teacher_logits(tmp_path / "t.tlog", rng.standard_normal((4, 3)))
        good = (tmp_path / "t.tlog").read_bytes()
        rejected = 0
        corrupt = [b"XLOG" + good[4:], good[:4] + struct.pack("<I", 7) + good[8:],
                   good[:8] + struct.pack("<I", 99) + good[12:], good[:12]]
        for i, buf in enumerate(corrupt):
            (tmp_path / f"bad{i}.tlog").write_bytes(buf)
            try:
                read_teacher_logits(tmp_path / f"bad{i}.tlog")
            except TeacherFileError:
                rejected += 1
        checks["tlog"] = (rejected == len(corrupt)
                          and read_teacher_logits(tmp_path / "t.tlog").scores.tobytes() == good[16:])
        c["ok"] = all(checks.values())
        c["detail"] = ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items())


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
