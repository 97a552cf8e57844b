"""Acceptance gate: one PASS/FAIL line per primary criterion (see the terminal summary)."""

import json
import time

import numpy as np
import pytest

from gruntlab import dsp, eval as ev, lld
from gruntlab.cli import main
from gruntlab.features import extract_all, extract_feature
from gruntlab.ingest import (AudioClip, SyntheticSpec, generate_synthetic_corpus,
                             shuffle_scores_within_players, write_clip_store)
from gruntlab.learn.nets import grad_check, tiny_config

from conftest import GATE_LINES, make_manifest, sine


def gate(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    GATE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def corpus():
    """The default 20 x 30 synthetic corpus with disjoint F0 ranges."""
    return generate_synthetic_corpus(SyntheticSpec(n_players=20, clips_per_player=30, seed=7))


@pytest.fixture(scope="module")
def feature_store(corpus):
    _, clips = corpus
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = extract_all(clips, name)[0]
        return cache[name]
    return get


def test_dimension_identities():
    rng = np.random.default_rng(0)
    clip = AudioClip(0.3 * rng.standard_normal(44100), 44100)
    start = time.perf_counter()
    x_lld = extract_feature(clip, "lld")
    x_mfcc = extract_feature(clip, "mfcc")
    x_spec = extract_feature(clip, "spectrogram")
    elapsed = time.perf_counter() - start
    flat = [lld.aggregate(a, "flat").values.size for a in (x_lld, x_mfcc, x_spec)]
    ok = (x_lld.shape == (100, 130) and x_mfcc.shape == (44, 40) and x_spec.shape == (227, 227)
          and flat == [13000, 1760, 51529] and elapsed < 1.0)
    gate("dimension identities", ok,
         f"LLD {x_lld.shape}, MFCC {x_mfcc.shape}, spectrogram {x_spec.shape}, flat {flat}, "
         f"{elapsed:.3f} s per clip (< 1 s)")


def test_gradient_correctness():
    start = time.perf_counter()
    reports = {arch: grad_check(tiny_config(arch), n_trials=20, seed=0, h=1e-5)
               for arch in ("crnn", "lstm_rnn")}
    elapsed = time.perf_counter() - start
    worst = max(r.max_rel_error for r in reports.values())
    ok = worst < 1e-4 and all(r.finite and r.trials >= 20 for r in reports.values()) and elapsed < 120
    gate("gradient correctness", ok,
         ", ".join(f"{a} max rel err {r.max_rel_error:.2e} over {r.trials} trials"
                   for a, r in reports.items()) + f"; {elapsed:.1f} s (< 120 s)")


def test_uar_oracle():
    rng = np.random.default_rng(1)
    worst = 0.0
    counts_ok = True
    for _ in range(1000):
        n_classes = int(rng.integers(2, 4))
        n = int(rng.integers(n_classes, 80))
        truth = rng.integers(0, n_classes, n)
        truth[:n_classes] = np.arange(n_classes)
        pred = rng.integers(0, n_classes, n)
        tally = np.zeros((n_classes, n_classes), dtype=int)
        for t, p in zip(truth, pred):
            tally[t, p] += 1
        recalls = [sum(1 for t, p in zip(truth, pred) if t == c and p == c) / sum(1 for t in truth if t == c)
                   for c in range(n_classes)]
        cm = ev.confusion(truth, pred, [str(c) for c in range(n_classes)])
        counts_ok &= np.array_equal(cm.counts, tally)
        worst = max(worst, abs(ev.uar(cm) - sum(recalls) / n_classes))
    # 1000 women (96.5 % correct) and 1000 men (87.5 % correct)
    example = ev.uar(ev.ConfusionMatrix(np.array([[965, 35], [125, 875]]), ev.CLASS_NAMES["sex"]))
    ok = counts_ok and worst < 1e-12 and abs(example - 0.92) < 1e-15
    gate("UAR oracle", ok, f"1000 random label sets, max |diff| {worst:.1e}; "
                           f"recalls 0.965/0.875 -> {example:.12f}")


def test_leakage_freedom():
    rng = np.random.default_rng(2)
    violations = 0
    fired = 0
    for trial in range(1000):
        k = int(rng.integers(2, 6))
        n_f = int(rng.integers(0, 12))
        n_m = int(rng.integers(0, 12))
        if n_f + n_m < k:
            n_m = k - n_f
        sexes = list(rng.permutation(["female"] * n_f + ["male"] * n_m))
        players = [f"pl{int(i)}" for i in rng.choice(10 ** 6, n_f + n_m, replace=False)]
        manifest = make_manifest(players, 2 * int(rng.integers(1, 3)), sexes=sexes)
        plan = ev.plan_folds(manifest, k, int(rng.integers(2 ** 31)))
        sex = manifest.player_sex()
        members = plan.players()
        sizes = [len(f) for f in plan.folds]
        per_sex = [[sum(sex[p] == s for p in f) for f in plan.folds] for s in ("female", "male")]
        if (len(members) != len(set(members)) or set(members) != set(sex)
                or max(sizes) - min(sizes) > 1 or any(max(c) - min(c) > 1 for c in per_sex)):
            violations += 1
        feats = {r.key: np.zeros((1, 2)) for r in manifest.records}
        try:
            rep = ev.cross_validate(manifest, plan, "score", "combined", feats,
                                    ev.FeatureSpec("compare_functionals"), ev.ConstantSpec(0))
        except ev.LeakageError:
            fired += 1
            continue
        tested = [p for f in rep.folds for p in f.test_players]
        if sorted(tested) != sorted(sex):
            violations += 1
    gate("leakage freedom", violations == 0 and fired == 0,
         f"1000 random plans: {violations} invariant violations, {fired} leakage assertions")


def test_chance_level(corpus, feature_store):
    manifest, _ = corpus
    feats = feature_store("mfcc")
    means = []
    for task, subset in (("sex", "combined"), ("score", "combined"), ("score", "women"),
                         ("score", "men")):
        for label in (0, 1):
            rep = ev.run_experiment(manifest, feats, task, subset, ev.FeatureSpec("mfcc", "mean"),
                                    ev.ConstantSpec(label))
            means.append(rep.uar_mean)
    worst = max(abs(m - 0.5) for m in means)
    gate("chance level", worst <= 1e-12,
         f"constant predictor over {len(means)} task/subset/label runs, max |uar_mean - 0.5| {worst:.1e}")


def test_end_to_end_separable(corpus, feature_store):
    manifest, _ = corpus
    start = time.perf_counter()
    feats = feature_store("spectrogram")
    svm = ev.run_experiment(manifest, feats, "sex", "combined", ev.FeatureSpec("spectrogram", "flat"),
                            ev.SvmSpec(1e-3))
    crnn = ev.run_experiment(manifest, feats, "sex", "combined", ev.FeatureSpec("spectrogram"),
                             ev.NetSpec("crnn", "V", epochs=30, feature="spectrogram"))
    elapsed = time.perf_counter() - start
    ok = svm.uar_mean >= 0.95 and crnn.uar_mean >= 0.90 and elapsed < 1800
    gate("end-to-end separable run", ok,
         f"sex task, 20x30 corpus, 5 folds: SVM flat spectrogram {svm.uar_mean:.3f} "
         f"(+-{svm.uar_std:.3f}, >= 0.95), CRNN HP V {crnn.uar_mean:.3f} (+-{crnn.uar_std:.3f}, "
         f">= 0.90); {elapsed:.0f} s (< 1800 s)")


def test_weak_signal(corpus, feature_store):
    manifest, _ = corpus
    feats = feature_store("compare_functionals")
    spec = ev.FeatureSpec("compare_functionals")
    real = ev.run_experiment(manifest, feats, "score", "combined", spec, ev.SvmSpec(1e-3))
    shuffled = ev.run_experiment(shuffle_scores_within_players(manifest, 0), feats, "score",
                                 "combined", spec, ev.SvmSpec(1e-3))
    ok = real.uar_mean >= 0.55 and abs(shuffled.uar_mean - 0.5) <= 0.04
    gate("weak-signal run", ok,
         f"score task, ComParE-like functionals + SVM C=1e-3: {real.uar_mean:.3f} (>= 0.55); "
         f"labels shuffled within players: {shuffled.uar_mean:.3f} (0.50 +- 0.04)")


def test_determinism(corpus, tmp_path):
    manifest, clips = corpus
    store = tmp_path / "corpus"
    write_clip_store(store, manifest, clips)
    runs = [["--feature", "mfcc", "--aggregation", "mean", "--c-grid", "1e-3,1e-1"],
            ["--feature", "mfcc", "--model", "crnn", "--hp", "III", "--epochs", "2"]]
    same = []
    for i, flags in enumerate(runs):
        docs = []
        for rep in range(2):
            out = tmp_path / f"run{i}_{rep}"
            code = main(["crossval", "--clips", str(store), "--cache", str(tmp_path / "cache"),
                         "--task", "score", "--seed", "3", "--out", str(out)] + flags)
            assert code == 0
            doc = json.loads((out / "report.json").read_text())
            doc.pop("timestamp")
            docs.append(json.dumps(doc, sort_keys=True).encode())
        same.append(docs[0] == docs[1])
    gate("determinism", all(same), f"{len(runs)} crossval configurations run twice, "
                                   f"report.json identical apart from timestamp: {same}")


def test_dsp_micro_oracles():
    hann = dsp.hann_window(4)
    hann_ok = np.allclose(hann, [0.0, 0.5, 1.0, 0.5], atol=1e-15)
    n = 706
    w = dsp.hann_window(n)
    acc = np.zeros(n * 11)
    for i in range(21):
        acc[i * n // 2:i * n // 2 + n] += w
    cola = float(np.max(np.abs(acc[n:-n] - 1.0)))
    x = np.random.default_rng(3).standard_normal((20, 128))
    dct_err = float(np.max(np.abs(dsp.idct_ii(dsp.dct_ii(x, 128)) - x)))
    f0, voicing = lld.f0_autocorrelation(sine(220, 16000, n=640).samples, 16000)
    res = dsp.resample(sine(1000, 44100), 16000).samples
    peak = int(np.argmax(np.abs(np.fft.rfft(res)))) * 16000 / res.size
    ok = hann_ok and cola < 1e-9 and dct_err < 1e-9 and abs(f0 - 220) <= 2 and abs(peak - 1000) <= 1
    gate("DSP micro-oracles", ok,
         f"hann(4) closed form {hann_ok}; COLA dev {cola:.1e}; DCT round trip {dct_err:.1e}; "
         f"220 Hz sine F0 {f0:.2f} Hz; resampled 1 kHz peak at {peak:.1f} Hz")
